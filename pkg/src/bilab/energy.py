"""The Born-Infeld Lagrangian, discrete action, energy density, prox and residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from bilab import kernels
from bilab.grid import Grid, ScalarField, discrete_gradient
from bilab.sources import MeasureSource, MollifiedSource

FEASIBILITY_SLACK = 1e-12


@dataclass(frozen=True)
class GuardPolicy:
    """``delta_guard`` shrinks the feasible ball during iteration; ``w_max`` caps reported w."""

    delta_guard: float = 0.0
    w_max: float = 1e8

    def __post_init__(self):
        if not 0.0 <= self.delta_guard < 1.0:
            raise ValueError("delta_guard must lie in [0, 1)")
        if not self.w_max >= 1.0:
            raise ValueError("w_max must be at least 1")


@dataclass(frozen=True)
class ActionValue:
    total: float
    lagrangian: float
    pairing: float
    feasible: bool = True
    max_slope: float = 0.0


@dataclass(frozen=True)
class EnergyDensity:
    """Cell-wise w; cells at the cap are counted in ``exceedances``."""

    grid: Grid
    values: np.ndarray
    exceedances: int
    w_max: float

    @property
    def beta(self) -> np.ndarray:
        """Hyperbolic angle arccosh(w), a reporting column."""
        return np.arccosh(np.maximum(self.values, 1.0))

    def max(self) -> float:
        return float(self.values[self.grid.cell_active].max()) if self.grid.cell_active.any() else 1.0


def lagrangian_density(p) -> np.ndarray | float:
    """1 - sqrt(1 - |p|^2) for |p| <= 1 and +inf beyond; p has its components on the last axis."""
    arr = np.asarray(p, dtype=float)
    s = np.sum(arr * arr, axis=-1)
    with np.errstate(invalid="ignore"):
        out = np.where(s <= 1.0, s / (1.0 + np.sqrt(np.maximum(1.0 - s, 0.0))), np.inf)
    return float(out) if out.ndim == 0 else out


def power_series_lagrangian(t, terms: int = 200) -> np.ndarray:
    """Partial sum of 1 - sqrt(1 - t) = sum_j b_j t^j, b_j = (2j-2)!/(j!(j-1)! 2^(2j-1))."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    b = 0.5
    tj = t.copy()
    for j in range(1, terms + 1):
        out += b * tj
        # b_{j+1}/b_j = (2j)(2j-1) / ((j+1) j 4)
        b *= (2 * j) * (2 * j - 1) / ((j + 1) * j * 4.0)
        tj = tj * t
    return out


def pairing(source: MeasureSource | MollifiedSource | None, v: ScalarField) -> float:
    """<rho, v>: nodal quadrature for densities, multilinear interpolation at point charges."""
    if source is None:
        return 0.0
    g = v.grid
    vals = np.where(g.active, v.values, 0.0)
    total = 0.0
    if source.density is not None:
        if source.density.grid.shape != g.shape:
            raise ValueError("source density and field live on different grids")
        total += float(np.sum(source.density.values * vals) * g.cell_volume)
    if isinstance(source, MeasureSource) and source.charges:
        interp = RegularGridInterpolator(g.axes(), vals, method="linear")
        total += float(np.dot(source.weights, interp(source.locations)))
    return total


def action(u: ScalarField, source: MeasureSource | MollifiedSource | None = None) -> ActionValue:
    """Cell-midpoint quadrature of the Lagrangian minus <rho, u>; +inf when infeasible."""
    g = u.grid
    p = discrete_gradient(u).values
    mask = g.cell_active
    s = np.sum(p * p, axis=0)[mask]
    smax = float(np.sqrt(s.max())) if s.size else 0.0
    pair = pairing(source, u)
    if smax > 1.0 + FEASIBILITY_SLACK:
        return ActionValue(math.inf, math.inf, pair, False, smax)
    s = np.minimum(s, 1.0)
    lag = float(np.sum(s / (1.0 + np.sqrt(1.0 - s))) * g.cell_volume)
    return ActionValue(lag - pair, lag, pair, True, smax)


def energy_density(u: ScalarField, guard: GuardPolicy | None = None) -> EnergyDensity:
    """w = (1 - |Du|^2)^(-1/2) per cell, capped at ``guard.w_max``."""
    guard = guard or GuardPolicy()
    g = u.grid
    p = discrete_gradient(u).values
    w = kernels.energy_density(p, guard.w_max)
    w = np.where(g.cell_active, w, 1.0)
    return EnergyDensity(g, w, int(np.count_nonzero(w >= guard.w_max)), guard.w_max)


def prox_lagrangian(q, tau: float) -> np.ndarray:
    """argmin_p f(p) + |p - q|^2 / (2 tau); components on the last axis."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    arr = np.asarray(q, dtype=float)
    moved = np.moveaxis(np.atleast_1d(arr).reshape(-1, arr.shape[-1]), -1, 0)
    out = kernels.prox_radial(np.ascontiguousarray(moved), float(tau))
    return np.moveaxis(out, 0, -1).reshape(arr.shape)


def prox_scalar_residual(a, r, tau) -> np.ndarray:
    """Residual of r + tau r / sqrt(1 - r^2) = a, relative to max(1, a)."""
    a = np.asarray(a, dtype=float)
    r = np.asarray(r, dtype=float)
    return np.abs(r + tau * r / np.sqrt(1.0 - r * r) - a) / np.maximum(1.0, a)


def prox_slope(a, tau: float) -> np.ndarray:
    """Scalar prox in the slope variable: t = r / sqrt(1 - r^2) for the prox radius r of |q| = a."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return kernels.prox_slope(np.atleast_1d(np.asarray(a, dtype=float)), float(tau))


def prox_slope_residual(a, t, tau) -> np.ndarray:
    """The scalar prox equation in the slope variable, t/sqrt(1+t^2) + tau t = a, relative to max(1, a).

    Equivalent to the residual in r, but free of the ulp(r) / (1 - r)^(3/2)
    floor that any double r close to 1 carries.
    """
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.abs(t / np.sqrt(1.0 + t * t) + tau * t - a) / np.maximum(1.0, a)


def flux(u: ScalarField, guard: GuardPolicy | None = None) -> np.ndarray:
    """Cell field w Du."""
    p = discrete_gradient(u).values
    return energy_density(u, guard).values * p


def weak_residual(u: ScalarField, source, eta: ScalarField, guard: GuardPolicy | None = None) -> float:
    """sum_cells V w Du . D eta - <rho, eta> for eta vanishing on boundary nodes."""
    g = u.grid
    if np.any(np.abs(eta.values[g.boundary]) > 0):
        raise ValueError("test function must vanish on boundary nodes")
    de = discrete_gradient(eta).values
    return float(np.sum(flux(u, guard) * de) * g.cell_volume) - pairing(source, eta)


def variational_inequality_gap(u: ScalarField, source, psi: ScalarField, guard: GuardPolicy | None = None) -> float:
    """<rho, u - psi> - sum_cells V w Du . (Du - D psi); nonnegative at the minimizer."""
    g = u.grid
    dpsi = discrete_gradient(psi).values
    smax = float(np.sqrt(np.max(np.sum(dpsi * dpsi, axis=0)[g.cell_active]))) if g.n_cells else 0.0
    if smax > 1.0 + FEASIBILITY_SLACK:
        raise ValueError(f"psi is not weakly spacelike (max slope {smax})")
    scale = max(1.0, float(np.abs(u.values[g.active]).max()))
    if np.any(np.abs(psi.values[g.boundary] - u.values[g.boundary]) > 1e-12 * scale):
        raise ValueError("psi must agree with u on boundary nodes")
    du = discrete_gradient(u).values
    diff = ScalarField(g, np.where(g.active, u.values - psi.values, 0.0))
    work = float(np.sum(flux(u, guard) * (du - dpsi)) * g.cell_volume)
    return pairing(source, diff) - work
