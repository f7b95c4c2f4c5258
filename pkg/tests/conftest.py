from __future__ import annotations

import copy
import json
import sys
from pathlib import Path
from typing import Any

import pytest

from fsbp.model import model_from_dict

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
ROOT = HERE.parent
SCENARIO_DIR = ROOT / "src" / "fsbp" / "scenarios"

sys.path.insert(0, str(HERE))


def single_block(
    *,
    intensity: float = 0.5,
    service: float = 1.0,
    capacity: int = 1,
    timeout: float | None = None,
    horizon: int = 1000,
    warmup: int = 100,
    **block_extra: Any,
) -> dict[str, Any]:
    block = {"id": "q", "name": "Server", "service_time_days": service, "capacity": capacity,
             "timeout_days": timeout, **block_extra}
    return {
        "name": "single",
        "horizon_days": horizon,
        "warmup_days": warmup,
        "blocks": [block],
        "sources": [{"id": "src", "name": "Arrivals", "intensity": intensity, "target": "q"}],
        "routes": [{"from": "src", "to": "q"}],
    }


def build(doc: dict[str, Any]):
    return model_from_dict(copy.deepcopy(doc))


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def scenario_doc(name: str) -> dict[str, Any]:
    return json.loads((SCENARIO_DIR / name).read_text(encoding="utf-8"))


@pytest.fixture
def mm1_path() -> Path:
    return FIXTURES / "mm1.json"
