"""Shipped JSON schemas for every emitted report."""

from __future__ import annotations

import json
from importlib import resources

NAMES = ("solve_report", "light_segments", "integrals", "growth", "experiment", "suite")


def load(name: str) -> dict:
    """Parsed schema ``<name>.schema.json``."""
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}; available: {', '.join(NAMES)}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text())
