"""Discrete-event simulation and functional-stability assessment of business processes."""

__version__ = "0.1.0"
