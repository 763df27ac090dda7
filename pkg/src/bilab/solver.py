"""Constrained minimization of the discrete Born-Infeld action.

Two first-order splittings of ``min sum_cells V f(Ku) - <rho, u>`` with the
boundary nodes pinned:

``admm``
    Augmented-Lagrangian splitting p = Ku.  The u-step is a linear solve with
    the fixed matrix K_I^T K_I (factored once), the p-step is the cellwise prox
    of f.  Equivalent to a primal-dual iteration preconditioned by the discrete
    Laplacian, and the default.
``pdhg``
    Plain primal-dual hybrid gradient with tau*sigma*||K||^2 <= 1 and
    over-relaxation theta.  Matrix-free; used when factoring is too costly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import splu

from bilab import kernels
from bilab.energy import GuardPolicy
from bilab.grid import BoundaryDatum, Grid, ScalarField, admissible_boundary, gradient_operator
from bilab.sources import MeasureSource, MollifiedSource, mollify

METHODS = ("admm", "pdhg")


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 20000
    tol: float = 1e-9
    method: str = "admm"
    tau: float | None = None
    sigma: float | None = None
    theta: float = 1.0
    beta: float = 1.0
    relaxation: float = 1.9
    adaptive_beta: bool = True
    stage_tol: float | None = None
    guard: GuardPolicy = field(default_factory=GuardPolicy)
    deterministic: bool = False
    trace_every: int = 10
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 < self.relaxation < 2.0:
            raise ValueError("relaxation must lie in (0, 2)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guard"] = asdict(self.guard)
        return d


@dataclass
class StageRecord:
    width: float
    iterations: int
    energy: float
    du_inf: float
    converged: bool


@dataclass
class SolveReport:
    solution: ScalarField
    converged: bool
    iterations: int
    wall_time: float
    energy_trace: list[tuple[int, float]]
    primal_residual: float
    dual_residual: float
    weak_residual: float
    max_slope: float
    exceedances: int
    max_abs_u: float
    method: str
    backend: str
    config: SolverConfig
    history: list[StageRecord] = field(default_factory=list)
    boundary_margin: float | None = None
    warnings: list[str] = field(default_factory=list)
    state: dict | None = field(default=None, repr=False)

    @property
    def energy(self) -> float:
        return self.energy_trace[-1][1] if self.energy_trace else math.nan

    def energy_monotone(self, burn_in: float = 0.1, rtol: float = 1e-9) -> bool:
        """Trace nonincreasing over its trailing (1 - burn_in) fraction, up to rtol."""
        vals = np.array([v for _, v in self.energy_trace])
        vals = vals[int(math.ceil(burn_in * len(vals))) :]
        vals = vals[np.isfinite(vals)]
        if vals.size < 2:
            return True
        scale = max(1.0, float(np.abs(vals).max()))
        return bool(np.all(np.diff(vals) <= rtol * scale))

    def to_dict(self, field_path: str | None = None) -> dict:
        def fin(x):
            return None if x is None or not math.isfinite(x) else float(x)

        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "method": self.method,
            "backend": self.backend,
            "energy": fin(self.energy),
            "energy_trace": [[int(k), fin(v)] for k, v in self.energy_trace],
            "energy_monotone": self.energy_monotone(),
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "weak_residual": self.weak_residual,
            "max_slope": self.max_slope,
            "exceedances": self.exceedances,
            "max_abs_u": self.max_abs_u,
            "boundary_margin": fin(self.boundary_margin),
            "history": [{k: fin(v) if isinstance(v, float) else v for k, v in asdict(s).items()} for s in self.history],
            "warnings": list(self.warnings),
            "config": self.config.to_dict(),
            "grid": {
                "kind": self.solution.grid.kind,
                "shape": list(self.solution.grid.shape),
                "spacing": list(self.solution.grid.spacing),
                "origin": list(self.solution.grid.origin),
            },
            "solution_file": field_path,
        }

    def to_json(self, field_path: str | None = None) -> str:
        return json.dumps(self.to_dict(field_path), indent=2, allow_nan=False)


def operator_norm(grid: Grid, iters: int = 100, seed: int = 0) -> float:
    """||K|| on interior-supported fields by power iteration on K^T K."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(grid.shape) * grid.interior
    lam = 0.0
    for _ in range(iters):
        n = np.linalg.norm(u)
        if n == 0:
            return 0.0
        u /= n
        v = -kernels.divergence(kernels.gradient(u, grid.spacing) * grid.cell_active, grid.spacing) * grid.interior
        lam_new = float(np.sum(u * v))
        u = v
        if abs(lam_new - lam) <= 1e-6 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(max(lam, 0.0)) * 1.01


def test_basis(grid: Grid, kmax: int = 3) -> list[np.ndarray]:
    """Sine products on the bounding box, zeroed off the interior, sup-normalized."""
    axes = grid.axes()
    lo = np.asarray(grid.origin)
    ext = np.asarray(grid.upper) - lo
    out = []
    for ks in np.ndindex(*(kmax,) * grid.m):
        fac = [np.sin((k + 1) * np.pi * (a - l) / e) for k, a, l, e in zip(ks, axes, lo, ext)]
        eta = fac[0]
        for f in fac[1:]:
            eta = np.multiply.outer(eta, f)
        eta = eta * grid.interior
        n = np.abs(eta).max()
        if n > 0:
            out.append(eta / n)
    return out


def weak_residual_norm(grid: Grid, u: np.ndarray, rho: np.ndarray, w_max: float, basis=None) -> float:
    """max over the test basis of |sum V w Du.D eta - <rho, eta>|."""
    p = kernels.gradient(u, grid.spacing) * grid.cell_active
    fl = kernels.energy_density(p, w_max) * p
    nodal = (-kernels.divergence(fl, grid.spacing) - rho) * grid.interior * grid.cell_volume
    basis = test_basis(grid) if basis is None else basis
    return float(max(abs(np.sum(nodal * eta)) for eta in basis)) if basis else 0.0


class _Problem:
    """Arrays shared by the iterations of one grid."""

    def __init__(self, grid: Grid, phi: BoundaryDatum, rho: np.ndarray, workers: int = 1):
        self.grid = grid
        self.workers = workers
        self.sp = grid.spacing
        self.cmask = grid.cell_active.astype(float)
        self.imask = grid.interior
        self.ubnd = np.where(grid.boundary, phi.values, 0.0)
        self.rho = np.where(grid.interior, rho, 0.0)
        self.rho_active = np.where(grid.active, rho, 0.0)
        self._solver = None

    def K(self, u):
        return kernels.gradient(u, self.sp) * self.cmask

    def KT(self, p):
        return -kernels.divergence(p * self.cmask, self.sp) * self.imask

    def assemble(self, u_int):
        return np.where(self.imask, u_int, self.ubnd)

    def solve_laplace(self, rhs):
        """Solve K_I^T K_I x = rhs on interior nodes."""
        if self._solver is None:
            if self.grid.kind == "box":
                self._solver = _box_solver(self.grid, workers=self.workers)
            else:
                self._solver = _sparse_solver(self.grid)
        return self._solver(rhs)


def _box_solver(grid: Grid, workers: int = 1):
    # Each 1D factor restricted to interior nodes is a Dirichlet tridiagonal:
    # D^T D = tridiag(-1, 2, -1)/h^2 and A^T A = tridiag(1, 2, 1)/4, both
    # diagonalized by the type-I sine transform.
    n = [s - 2 for s in grid.shape]
    theta = [np.pi * np.arange(1, k + 1) / (k + 1) for k in n]
    diff = [4.0 * np.sin(t / 2) ** 2 / h**2 for t, h in zip(theta, grid.spacing)]
    avg = [np.cos(t / 2) ** 2 for t in theta]
    lam = np.zeros(n)
    for d in range(grid.m):
        term = np.ones(())
        for e in range(grid.m):
            term = np.multiply.outer(term, diff[e] if e == d else avg[e])
        lam += term
    inner = tuple(slice(1, -1) for _ in range(grid.m))

    def run(rhs):
        out = np.zeros(grid.shape)
        out[inner] = sfft.idstn(sfft.dstn(rhs[inner], type=1, workers=workers) / lam, type=1, workers=workers)
        return out

    return run


def _sparse_solver(grid: Grid):
    K = gradient_operator(grid)
    idx = np.flatnonzero(grid.interior.ravel())
    KI = K[:, idx]
    lu = splu((KI.T @ KI).tocsc(), permc_spec="COLAMD" if grid.m == 2 else "MMD_AT_PLUS_A")

    def run(rhs):
        out = np.zeros(grid.shape)
        out.ravel()[idx] = lu.solve(rhs.ravel()[idx])
        return out

    return run


def _check_inputs(grid, phi, source):
    if phi.grid is not grid and phi.grid.shape != grid.shape:
        raise ValueError("boundary datum lives on a different grid")
    rho = np.zeros(grid.shape)
    if source is not None:
        if source.density.grid.shape != grid.shape:
            raise ValueError("source lives on a different grid")
        rho = np.asarray(source.density.values, dtype=float)
        if not np.all(np.isfinite(rho[grid.active])):
            raise ValueError("source field is not finite")
    return rho


def _initial_field(prob: _Problem, config: SolverConfig, u0):
    g = prob.grid
    if u0 is None:
        if config.seed is None:
            return prob.assemble(np.zeros(g.shape))
        rng = np.random.default_rng(config.seed)
        # random interior values, kept spacelike by a small amplitude
        return prob.assemble(rng.uniform(-0.25, 0.25, g.shape) * g.h)
    vals = u0.values if isinstance(u0, ScalarField) else np.asarray(u0, dtype=float)
    return prob.assemble(np.where(g.active, vals, 0.0))


def solve(
    grid: Grid,
    phi: BoundaryDatum,
    source: MollifiedSource | None,
    config: SolverConfig | None = None,
    u0: ScalarField | np.ndarray | None = None,
    state: dict | None = None,
    check_boundary: bool = True,
) -> SolveReport:
    """Minimize the discrete action with Dirichlet data ``phi``.

    ``u0`` warm-starts the primal field, ``state`` the splitting variables
    returned by an earlier report.  Without ``state`` a strictly spacelike
    ``u0`` also seeds the dual with its flux.  Non-convergence is reported,
    not raised.
    """
    config = config or SolverConfig()
    rho = _check_inputs(grid, phi, source)
    warnings: list[str] = []
    margin = None
    if check_boundary:
        margin = admissible_boundary(grid, phi)
        if margin <= 0:
            warnings.append(f"boundary datum has nonpositive admissibility margin {margin:.3e}")
    prob = _Problem(grid, phi, rho, workers=1 if config.deterministic else -1)
    u = _initial_field(prob, config, u0)
    if state is None and u0 is not None:
        state = _dual_from_primal(prob, config, u)
    t0 = time.perf_counter()
    if config.method == "admm":
        out = _admm(prob, config, u, state)
    else:
        out = _pdhg(prob, config, u, state)
    u, it, conv, pres, dres, trace, st, umax = out
    wall = time.perf_counter() - t0
    sol = ScalarField(grid, np.where(grid.active, u, 0.0))
    p = prob.K(u)
    slope = float(np.sqrt(np.max(np.sum(p * p, axis=0)))) if grid.n_cells else 0.0
    w = kernels.energy_density(p, config.guard.w_max)
    exc = int(np.count_nonzero((w >= config.guard.w_max) & grid.cell_active))
    wres = weak_residual_norm(grid, u, rho, config.guard.w_max)
    if slope > 1.0:
        warnings.append(f"final iterate exceeds unit slope by {slope - 1.0:.2e}")
    return SolveReport(
        solution=sol,
        converged=conv,
        iterations=it,
        wall_time=wall,
        energy_trace=trace,
        primal_residual=pres,
        dual_residual=dres,
        weak_residual=wres,
        max_slope=slope,
        exceedances=exc,
        max_abs_u=umax,
        method=config.method,
        backend=kernels.BACKEND,
        config=config,
        boundary_margin=margin,
        warnings=warnings,
        state=st,
    )


def _dual_from_primal(prob: _Problem, cfg: SolverConfig, u: np.ndarray) -> dict | None:
    """Splitting state consistent with a strictly spacelike start: flux w Du as the dual.

    An exact discrete minimizer is then a fixed point of the iteration.
    """
    p = prob.K(u)
    if np.max(np.sum(p * p, axis=0), initial=0.0) >= 1.0:
        return None
    flux = kernels.energy_density(p, cfg.guard.w_max) * p * prob.cmask
    if cfg.method == "admm":
        return {"method": "admm", "p": p, "lam": flux / cfg.beta, "beta": cfg.beta}
    return {"method": "pdhg", "y": flux}


def _energy(prob: _Problem, u: np.ndarray, source_rho: np.ndarray) -> float:
    g = prob.grid
    p = prob.K(u)
    s = np.sum(p * p, axis=0)
    if s.max(initial=0.0) > 1.0 + 1e-12:
        return math.inf
    s = np.minimum(s, 1.0)
    lag = float(np.sum(s / (1.0 + np.sqrt(1.0 - s)))) * g.cell_volume
    return lag - float(np.sum(source_rho * u)) * g.cell_volume


def _guarded_prox(q, tau, guard: GuardPolicy):
    p = kernels.prox_radial(q, tau)
    if guard.delta_guard > 0:
        cap = 1.0 - guard.delta_guard
        n = np.sqrt(np.sum(p * p, axis=0))
        p *= np.minimum(1.0, cap / np.maximum(n, 1e-300))
    return p


def _admm(prob: _Problem, cfg: SolverConfig, u, state):
    g = prob.grid
    rho_pair = prob.rho_active
    beta = cfg.beta
    Ku = prob.K(u)
    if state and state.get("method") == "admm":
        p = state["p"].copy()
        lam = state["lam"].copy()
        beta = state.get("beta", beta)
    else:
        p = _guarded_prox(Ku, 1.0 / beta, cfg.guard)
        lam = np.zeros_like(Ku)
    cbnd = prob.K(prob.ubnd)
    trace = []
    umax = float(np.abs(u).max())
    pres = dres = math.inf
    conv = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        rhs = prob.rho / beta + prob.KT(p - lam - cbnd)
        u = prob.assemble(prob.solve_laplace(rhs))
        Ku = prob.K(u)
        p_old = p
        Kh = cfg.relaxation * Ku + (1.0 - cfg.relaxation) * p_old
        p = _guarded_prox(Kh + lam, 1.0 / beta, cfg.guard)
        lam += Kh - p
        pres = float(np.abs(Ku - p).max())
        dres = float(beta * np.abs(p - p_old).max())
        umax = max(umax, float(np.abs(u).max()))
        if it % cfg.trace_every == 0 or it == 1:
            trace.append((it, _energy(prob, u, rho_pair)))
        if pres <= cfg.tol and dres <= cfg.tol:
            conv = True
            break
        if cfg.adaptive_beta and it % 10 == 0:
            if pres > 10 * dres:
                beta *= 2.0
                lam /= 2.0
            elif dres > 10 * pres:
                beta /= 2.0
                lam *= 2.0
    if not trace or trace[-1][0] != it:
        trace.append((it, _energy(prob, u, rho_pair)))
    st = {"method": "admm", "p": p, "lam": lam, "beta": beta}
    return u, it, conv, pres, dres, trace, st, umax


def _pdhg(prob: _Problem, cfg: SolverConfig, u, state):
    g = prob.grid
    L = operator_norm(g)
    tau = cfg.tau
    sigma = cfg.sigma
    if tau is None and sigma is None:
        tau = sigma = 1.0 / L
    elif tau is None:
        tau = 1.0 / (sigma * L * L)
    elif sigma is None:
        sigma = 1.0 / (tau * L * L)
    if tau * sigma * L * L > 1.0 + 1e-12:
        raise ValueError("step sizes violate tau*sigma*||K||^2 <= 1")
    theta = cfg.theta
    if state and state.get("method") == "pdhg":
        y = state["y"].copy()
    else:
        y = np.zeros((g.m,) + g.cell_shape)
    ubar = u.copy()
    trace = []
    umax = float(np.abs(u).max())
    pres = dres = math.inf
    conv = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        y_old = y
        y = kernels.dual_prox(y + sigma * prob.K(ubar), sigma)
        u_old = u
        u = prob.assemble(u - tau * (prob.KT(y) - prob.rho))
        ubar = u + theta * (u - u_old)
        du = u - u_old
        dy = y - y_old
        # primal-dual residuals in slope units
        pres = float(np.abs(du / tau - prob.KT(dy)).max()) * g.h
        dres = float(np.abs(dy / sigma - prob.K(du)).max())
        umax = max(umax, float(np.abs(u).max()))
        if it % cfg.trace_every == 0 or it == 1:
            trace.append((it, _energy(prob, u, prob.rho_active)))
        if pres <= cfg.tol and dres <= cfg.tol:
            conv = True
            break
    if not trace or trace[-1][0] != it:
        trace.append((it, _energy(prob, u, prob.rho_active)))
    return u, it, conv, pres, dres, trace, {"method": "pdhg", "y": y}, umax


def continuation_solve(
    grid: Grid,
    phi: BoundaryDatum,
    source: MeasureSource,
    widths: Sequence[float],
    config: SolverConfig | None = None,
    u0: ScalarField | None = None,
) -> SolveReport:
    """Solve along decreasing mollification widths, warm-starting each stage."""
    config = config or SolverConfig()
    widths = [float(w) for w in widths]
    if not widths:
        raise ValueError("at least one width is required")
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise ValueError("widths must be strictly decreasing")
    history: list[StageRecord] = []
    prev = u0
    state = None
    report = None
    total_it = 0
    total_time = 0.0
    margin = admissible_boundary(grid, phi)
    for k, width in enumerate(widths):
        src = mollify(source, width, grid)
        report = solve(grid, phi, src, config, u0=prev, state=state, check_boundary=False)
        total_it += report.iterations
        total_time += report.wall_time
        du = math.nan if prev is None or k == 0 else float(np.abs(report.solution.values - prev.values).max())
        history.append(StageRecord(width, report.iterations, report.energy, du, report.converged))
        prev = report.solution
        state = report.state
        if not report.converged:
            report.warnings.append(f"continuation aborted at width {width:.4g}")
            break
        # later stages start from a converged field; drop the random seed
        if config.seed is not None:
            config = _replace_seed(config)
    report.history = history
    report.iterations = total_it
    report.wall_time = total_time
    report.boundary_margin = margin
    if margin <= 0:
        report.warnings.append(f"boundary datum has nonpositive admissibility margin {margin:.3e}")
    return report


def _replace_seed(cfg: SolverConfig) -> SolverConfig:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["seed"] = None
    return SolverConfig(**d)
