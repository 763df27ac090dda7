"""Named experiment suites: run, aggregate PASS/FAIL, write JSON."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from bilab import experiments as ex


@dataclass
class SuiteResult:
    name: str
    results: list[ex.ExperimentResult]
    wall_time: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "passed": self.passed,
            "wall_time": self.wall_time,
            "experiments": [r.to_dict() for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def table(self) -> str:
        rows = []
        for r in self.results:
            for c in r.checks:
                rows.append(f"{'PASS' if c.passed else 'FAIL'}  {r.name:<28} {c.name:<44} {c.value:<12.5g} {c.threshold:.5g}")
        head = f"{'':4}  {'experiment':<28} {'check':<44} {'value':<12} threshold"
        verdict = f"suite {self.name}: {'PASS' if self.passed else 'FAIL'} ({self.wall_time:.1f} s)"
        return "\n".join([head, *rows, verdict])


def _nolight() -> list[ex.ExperimentResult]:
    return [ex.nolight_experiment()]


def _quanticharges() -> list[ex.ExperimentResult]:
    return [ex.quanticharges_experiment()]


def _counterexample() -> list[ex.ExperimentResult]:
    return [ex.integrability_experiment(), ex.weak_form_experiment(), ex.detector_experiment()]


SUITES: dict[str, Callable[[], list[ex.ExperimentResult]]] = {
    "nolight": _nolight,
    "quanticharges": _quanticharges,
    "counterexample-integrability": _counterexample,
}


def run_suite(name: str, output_dir: str | Path | None = None) -> SuiteResult:
    """Run a registered suite; with ``output_dir`` also write ``suite.json`` there."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}")
    t0 = time.perf_counter()
    results = SUITES[name]()
    res = SuiteResult(name, results, time.perf_counter() - t0)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "suite.json").write_text(res.to_json())
    return res
