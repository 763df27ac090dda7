"""Scenario files: parse, build the problem, run the solve and write artifacts.

A scenario is a TOML document::

    name = "radial-2d"
    seed = 0

    [grid]
    kind = "ball"            # box | ball
    center = [0.0, 0.0]      # ball
    radius = 1.0             # ball
    # lower = [...]          # box
    # upper = [...]          # box
    resolution = 129

    [boundary]
    kind = "zero"            # zero | affine | expression | file
    # slope = [0.5, 0.0]     # affine: phi = slope . x + offset
    # offset = 0.0
    # expression = "0.2*x1"
    # path = "phi.bin"

    [source]
    kind = "charges"         # none | charges | density | file
    charges = [{ at = [0.0, 0.0], q = 6.283185307179586 }]
    # expression = "exp(-10*r**2)"   # density
    # path = "rho.bin"               # file
    width_cells = [16, 8, 4, 2]      # continuation widths in units of h (charges)

    [solver]
    method = "admm"
    tol = 1e-9

    [[diagnostics]]
    op = "radial_oracle"
    b = 1.0

    [[diagnostics]]
    op = "light_segments"
    tol_light = 1e-7
    exclude_core = 3.0               # skip 3 final widths around each charge

    [output]
    csv = true

Relative paths are resolved against the scenario file's directory.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from bilab import diagnostics as diag
from bilab import fieldio
from bilab.energy import GuardPolicy, energy_density
from bilab.exact import RadialParams, radial_field
from bilab.grid import BoundaryDatum, DomainSpec, Grid, ScalarField, admissible_boundary, build_grid
from bilab.solver import SolveReport, SolverConfig, continuation_solve, solve
from bilab.sources import DensityExpression, ExpressionError, MeasureSource, MollifiedSource, density_field, mollify

OUTPUT_ENV = "BILAB_OUTPUT_ROOT"
DEFAULT_OUTPUT = "bilab-output"
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

_SOLVER_KEYS = {"method", "tol", "max_iter", "stage_tol", "tau", "sigma", "theta", "beta", "relaxation", "adaptive_beta", "trace_every"}
_DIAG_OPS = {"radial_oracle", "integrals", "light_segments", "sff", "growth", "lorentzian", "energy_density"}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario."""


@dataclass
class Scenario:
    name: str
    grid: dict
    boundary: dict
    source: dict
    solver: dict
    diagnostics: list[dict]
    output: dict
    seed: int | None = None
    initial: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def dimension(self) -> int:
        g = self.grid
        return len(g["center"]) if g["kind"] == "ball" else len(g["lower"])


# ---------------------------------------------------------------------------
# parsing


def builtin_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("bilab.scenarios").iterdir() if p.name.endswith(".toml"))


def load_scenario(ref: str | Path) -> Scenario:
    """Parse a scenario file, or a built-in scenario by name."""
    path = Path(ref)
    if path.exists():
        return parse_scenario(path.read_text(), path.parent.resolve())
    if str(ref) in builtin_names():
        text = resources.files("bilab.scenarios").joinpath(f"{ref}.toml").read_text()
        return parse_scenario(text, Path.cwd())
    raise ScenarioError(f"no scenario file or built-in scenario named {str(ref)!r}")


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ScenarioError(f"missing required key '{key}' in {where}")
    return table[key]


def _vector(value, key: str, m: int | None = None) -> list[float]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
        raise ScenarioError(f"'{key}' must be a list of numbers")
    if m is not None and len(value) != m:
        raise ScenarioError(f"'{key}' has {len(value)} entries for a {m}-dimensional grid")
    return [float(v) for v in value]


def parse_scenario(text: str, base_dir: Path | None = None) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"parse error: {exc}") from exc
    base_dir = Path(base_dir or Path.cwd())
    name = str(doc.get("name", "scenario"))
    grid = dict(_require(doc, "grid", "the scenario"))
    kind = _require(grid, "kind", "[grid]")
    if kind == "ball":
        m = len(_vector(_require(grid, "center", "[grid]"), "grid.center"))
        r = _require(grid, "radius", "[grid]")
        if not isinstance(r, (int, float)) or r <= 0:
            raise ScenarioError("'grid.radius' must be a positive number")
    elif kind == "box":
        m = len(_vector(_require(grid, "lower", "[grid]"), "grid.lower"))
        _vector(_require(grid, "upper", "[grid]"), "grid.upper", m)
    else:
        raise ScenarioError(f"unknown grid kind {kind!r}; expected 'box' or 'ball'")
    res = _require(grid, "resolution", "[grid]")
    if isinstance(res, list):
        if len(res) != m or not all(isinstance(k, int) for k in res):
            raise ScenarioError(f"'grid.resolution' must be an integer or {m} integers")
    elif not isinstance(res, int):
        raise ScenarioError("'grid.resolution' must be an integer")

    boundary = dict(doc.get("boundary", {"kind": "zero"}))
    bkind = boundary.setdefault("kind", "zero")
    if bkind == "affine":
        _vector(_require(boundary, "slope", "[boundary]"), "boundary.slope", m)
    elif bkind == "expression":
        _check_expression(_require(boundary, "expression", "[boundary]"), m, "boundary.expression")
    elif bkind == "file":
        _existing(base_dir, _require(boundary, "path", "[boundary]"))
    elif bkind != "zero":
        raise ScenarioError(f"unknown boundary kind {bkind!r}")

    source = dict(doc.get("source", {"kind": "none"}))
    skind = source.setdefault("kind", "none")
    if skind == "charges":
        charges = _require(source, "charges", "[source]")
        if not isinstance(charges, list) or not charges:
            raise ScenarioError("'source.charges' must be a non-empty list of {at, q} tables")
        for c in charges:
            if not isinstance(c, dict):
                raise ScenarioError("each charge must be a table with 'at' and 'q'")
            _vector(_require(c, "at", "a charge"), "charge.at", m)
            if not isinstance(_require(c, "q", "a charge"), (int, float)):
                raise ScenarioError("'q' of a charge must be a number")
        cells = source.setdefault("width_cells", [16, 8, 4, 2])
        if not cells or any(not isinstance(k, (int, float)) or k <= 0 for k in cells):
            raise ScenarioError("'source.width_cells' must be a list of positive numbers")
    elif skind == "density":
        _check_expression(_require(source, "expression", "[source]"), m, "source.expression")
    elif skind == "file":
        _existing(base_dir, _require(source, "path", "[source]"))
    elif skind != "none":
        raise ScenarioError(f"unknown source kind {skind!r}")

    solver = dict(doc.get("solver", {}))
    guard = {k: solver.pop(k) for k in ("delta_guard", "w_max") if k in solver}
    unknown = set(solver) - _SOLVER_KEYS
    if unknown:
        raise ScenarioError(f"unknown solver keys: {sorted(unknown)}")
    try:
        SolverConfig(**solver, guard=GuardPolicy(**guard))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid [solver]: {exc}") from exc
    solver["guard"] = guard

    diags = doc.get("diagnostics", [])
    if not isinstance(diags, list):
        raise ScenarioError("'diagnostics' must be an array of tables")
    for d in diags:
        op = _require(d, "op", "a diagnostics entry")
        if op not in _DIAG_OPS:
            raise ScenarioError(f"unknown diagnostic op {op!r}; expected one of {sorted(_DIAG_OPS)}")
    initial = doc.get("initial")
    if initial is not None:
        _existing(base_dir, initial)
    seed = doc.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ScenarioError("'seed' must be an integer")
    return Scenario(name, grid, boundary, source, solver, list(diags), dict(doc.get("output", {})), seed, initial, base_dir)


def _check_expression(expr, m: int, key: str) -> None:
    if not isinstance(expr, str):
        raise ScenarioError(f"'{key}' must be a string")
    try:
        DensityExpression.parse(expr)(np.zeros((1, m)))
    except (ExpressionError, IndexError, KeyError) as exc:
        raise ScenarioError(f"bad expression in '{key}': {exc}") from exc


def _existing(base: Path, rel: str) -> Path:
    path = (base / rel).resolve()
    if not path.exists():
        raise ScenarioError(f"referenced file {rel!r} does not exist")
    return path


# ---------------------------------------------------------------------------
# building


def build_problem(sc: Scenario):
    """Grid, boundary datum and source (a MeasureSource for charges, else a MollifiedSource or None)."""
    g = sc.grid
    if g["kind"] == "ball":
        dom = DomainSpec.ball(g["center"], float(g["radius"]))
    else:
        dom = DomainSpec.box(g["lower"], g["upper"])
    grid = build_grid(dom, g["resolution"])
    b = sc.boundary
    if b["kind"] == "zero":
        phi = BoundaryDatum.zero(grid)
    elif b["kind"] == "affine":
        phi = BoundaryDatum.affine(grid, b["slope"], float(b.get("offset", 0.0)))
    elif b["kind"] == "expression":
        expr = DensityExpression.parse(b["expression"])
        phi = BoundaryDatum.from_function(grid, expr)
    else:
        phi = BoundaryDatum(grid, np.where(grid.boundary, _read(sc, b["path"], grid).values, 0.0))
    s = sc.source
    if s["kind"] == "none":
        source = None
    elif s["kind"] == "charges":
        source = MeasureSource.point_charges([(c["at"], float(c["q"])) for c in s["charges"]])
        source.check_inside(grid)
    elif s["kind"] == "density":
        source = MollifiedSource.from_density(density_field(grid, s["expression"]))
    else:
        source = MollifiedSource.from_density(_read(sc, s["path"], grid))
    return grid, phi, source


def _read(sc: Scenario, rel: str, grid: Grid) -> ScalarField:
    out = fieldio.read_field(_existing(sc.base_dir, rel), grid)
    if not isinstance(out, ScalarField):
        raise ScenarioError(f"{rel!r} holds a vector field; a scalar field is required")
    return out


def solver_config(sc: Scenario, deterministic: bool = False) -> SolverConfig:
    opts = {k: v for k, v in sc.solver.items() if k != "guard"}
    return SolverConfig(**opts, guard=GuardPolicy(**sc.solver.get("guard", {})), deterministic=deterministic, seed=sc.seed)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunOutcome:
    exit_code: int
    output_dir: Path | None
    message: str
    report: SolveReport | None = None


def output_root(cli_value: str | None = None) -> Path:
    return Path(cli_value or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def run_scenario(
    ref: str | Path | Scenario,
    output_dir: str | Path | None = None,
    allow_marginal: bool = False,
    deterministic: bool = False,
) -> RunOutcome:
    """Run one scenario; errors become exit code 1 with a message, never exceptions."""
    try:
        sc = ref if isinstance(ref, Scenario) else load_scenario(ref)
        grid, phi, source = build_problem(sc)
    except (ScenarioError, ValueError, fieldio.FieldFormatError) as exc:
        return RunOutcome(EXIT_ERROR, None, f"error: {exc}")
    margin = admissible_boundary(grid, phi)
    if margin <= 0 and not allow_marginal:
        return RunOutcome(EXIT_ERROR, None, f"error: boundary datum is not admissible (margin {margin:.3e}); use --allow-marginal")
    out = output_root(output_dir) / sc.name
    out.mkdir(parents=True, exist_ok=True)
    cfg = solver_config(sc, deterministic)
    u0 = _read(sc, sc.initial, grid) if sc.initial else None
    final_source = source
    if isinstance(source, MeasureSource):
        widths = [k * grid.h for k in sc.source["width_cells"]]
        report = continuation_solve(grid, phi, source, widths, cfg, u0=u0)
        final_source = mollify(source, widths[-1], grid)
    else:
        report = solve(grid, phi, source, cfg, u0=u0, check_boundary=False)
        report.boundary_margin = margin
    field_path = out / "solution.bin"
    fieldio.write_field(field_path, report.solution)
    if sc.output.get("csv", False):
        fieldio.write_csv(out / "solution.csv", report.solution)
    doc = report.to_dict(field_path.name)
    doc["scenario"] = sc.name
    doc["diagnostics"] = []
    for spec in sc.diagnostics:
        try:
            entry = _run_diagnostic(spec, report, grid, final_source, out, sc)
        except ValueError as exc:
            # the solve stands; a diagnostic whose hypotheses fail is reported, not fatal
            entry = {"op": spec["op"], "error": str(exc)}
            report.warnings.append(f"diagnostic {spec['op']} failed: {exc}")
        if spec["op"] == "radial_oracle":
            doc["oracle"] = entry
        else:
            doc["diagnostics"].append(entry)
    (out / "report.json").write_text(json.dumps(doc, indent=2, allow_nan=False))
    code = EXIT_OK if report.converged else EXIT_NOT_CONVERGED
    summary = _summary(sc, report, doc, code)
    (out / "summary.txt").write_text(summary)
    return RunOutcome(code, out, summary, report)


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _run_diagnostic(spec: dict, report: SolveReport, grid: Grid, source, out: Path, sc: Scenario) -> dict:
    op = spec["op"]
    u = report.solution
    guard = report.config.guard
    if op == "radial_oracle":
        params = RadialParams(m=grid.m, T=float(spec.get("T", 1.0)), b=float(spec.get("b", 1.0)))
        exact = radial_field(params, grid)
        widths = sc.source.get("width_cells", [2])
        r_excl = float(spec.get("exclusion", 3.0)) * widths[-1] * grid.h
        r = np.linalg.norm(grid.coords(), axis=-1)
        mask = grid.active & (r >= r_excl)
        err = float(np.abs(u.values - exact.values)[mask].max() / np.abs(exact.values[mask]).max())
        return {"op": op, "b": params.b, "m": params.m, "exclusion_radius": r_excl, "relative_linf_error": err}
    if op == "integrals":
        reg = spec.get("region", {"kind": "all"})
        if reg["kind"] == "box":
            region = diag.Region.box(reg["lower"], reg["upper"])
        elif reg["kind"] == "annulus":
            region = diag.Region.annulus(reg["center"], reg["r_in"], reg["r_out"])
        else:
            region = None
        rep = diag.log_weighted_integrals(u, float(spec.get("q0", 1.0)), region, guard)
        (out / "integrals.json").write_text(rep.to_json())
        return {"op": op, "file": "integrals.json", **rep.to_dict()}
    if op == "light_segments":
        # optional: skip balls of exclude_core mollification widths around each charge
        exclude = []
        if "exclude_core" in spec and sc.source.get("kind") == "charges":
            radius = float(spec["exclude_core"]) * sc.source["width_cells"][-1] * grid.h
            exclude = [(c["at"], radius) for c in sc.source["charges"]]
        rep = diag.detect_light_segments(u, spec.get("tol_light"), exclude=exclude)
        (out / "light_segments.json").write_text(rep.to_json())
        rep.to_csv(out / "light_segments.csv")
        return {"op": op, "file": "light_segments.json", "segments": len(rep.segments), "globally_null": rep.globally_null}
    if op == "sff":
        rep = diag.second_fundamental_form(u, guard)
        fieldio.write_field(out / "sff.bin", rep.field)
        vals = rep.field.values[rep.evaluated]
        return {"op": op, "file": "sff.bin", "max": _finite(float(vals.max())) if vals.size else None,
                "evaluated": int(rep.evaluated.sum()), "capped": rep.capped}
    if op == "energy_density":
        ed = energy_density(u, guard)
        if "csv" in spec and spec["csv"]:
            cells = grid.cell_centers()[grid.cell_active]
            np.savetxt(out / "energy_density.csv", np.column_stack([cells, ed.values[grid.cell_active], ed.beta[grid.cell_active]]),
                       delimiter=",", header=",".join([f"x{i + 1}" for i in range(grid.m)] + ["w", "beta"]), comments="")
        return {"op": op, "max_w": ed.max(), "exceedances": ed.exceedances}
    if op == "growth":
        rng = np.random.default_rng(spec.get("seed", sc.seed or 0))
        pairs = spec.get("pairs")
        if pairs is None:
            pairs = diag.random_growth_samples(grid, int(spec.get("count", 20)), rng)
        margins = []
        for y, s, t in pairs:
            margins.append({"y": list(map(float, y)), "s": float(s), "t": float(t),
                            "margin": diag.growth_check(u, source, y, float(s), float(t), guard)})
        (out / "growth.json").write_text(json.dumps({"h": grid.h, "checks": margins}, indent=2))
        return {"op": op, "file": "growth.json", "min_margin": min(c["margin"] for c in margins), "h": grid.h}
    if op == "lorentzian":
        o = spec["center"]
        R = float(spec["R"])
        ball = diag.lorentzian_ball(u, [o], R)
        ld = diag.lorentzian_distance(u, o)
        fieldio.write_field(out / "lorentzian_distance.bin", ld)
        return {"op": op, "center": list(map(float, o)), "R": R, "ball_nodes": int(ball.sum()), "file": "lorentzian_distance.bin"}
    raise ScenarioError(f"unknown diagnostic op {op!r}")


def _summary(sc: Scenario, report: SolveReport, doc: dict, code: int) -> str:
    lines = [
        f"scenario     {sc.name}",
        f"status       {'converged' if report.converged else 'NOT converged'} (exit {code})",
        f"iterations   {report.iterations}",
        f"energy       {report.energy:.12g}",
        f"max slope    {report.max_slope:.6f}",
        f"residuals    primal {report.primal_residual:.3e}  dual {report.dual_residual:.3e}  weak {report.weak_residual:.3e}",
        f"wall time    {report.wall_time:.2f} s  ({report.method}, {report.backend} kernels)",
    ]
    if "oracle" in doc:
        o = doc["oracle"]
        lines.append(f"oracle       relative Linf error {o['relative_linf_error']:.4e} outside r = {o['exclusion_radius']:.4g}")
    for d in doc["diagnostics"]:
        keys = [k for k in d if k not in ("op", "file", "region")]
        lines.append(f"{d['op']:<12} " + "  ".join(f"{k}={d[k]}" for k in keys[:4]))
    for w in report.warnings:
        lines.append(f"warning      {w}")
    return "\n".join(lines) + "\n"
