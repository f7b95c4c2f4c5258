"""Published JSON schemas, loadable by name."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Any

import jsonschema
from referencing import Registry, Resource

SCHEMA_NAMES = (
    "model",
    "edit",
    "run_result",
    "aggregate",
    "comparison",
    "assessment",
    "sweep",
    "scenario_manifest",
    "scenario_report",
    "diagnostics",
    "scenario_list",
)


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict[str, Any]:
    if name not in SCHEMA_NAMES:
        raise KeyError(f"unknown schema {name!r}")
    text = resources.files(__package__).joinpath(f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry() -> Registry:
    resources_ = []
    for n in SCHEMA_NAMES:
        schema = load_schema(n)
        resources_.append((schema["$id"], Resource.from_contents(schema)))
    return Registry().with_resources(resources_)


def validator(name: str) -> jsonschema.protocols.Validator:
    schema = load_schema(name)
    cls = jsonschema.validators.validator_for(schema)
    return cls(schema, registry=_registry())


def check(name: str, document: Any) -> None:
    """Raise ``jsonschema.ValidationError`` if *document* does not match.

    The most specific error is raised, so nested failures inside ``anyOf``
    branches report their own path.
    """
    error = jsonschema.exceptions.best_match(validator(name).iter_errors(document))
    if error is not None:
        raise error
