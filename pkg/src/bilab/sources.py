"""Measure sources rho = sum a_i delta_{x_i} + rho_AC dx, mollification and norms."""

from __future__ import annotations

import ast
import itertools
import math
import operator
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gamma

from bilab.grid import Grid, ScalarField


class ResolutionError(ValueError):
    """Mollification width not resolvable on the grid."""


@dataclass(frozen=True, eq=False)
class MeasureSource:
    charges: tuple[tuple[np.ndarray, float], ...] = ()
    density: ScalarField | None = None
    tag: str = ""

    @classmethod
    def point_charges(cls, charges: Sequence[tuple[Sequence[float], float]], density=None, tag="") -> "MeasureSource":
        return cls(tuple((np.asarray(x, dtype=float), float(a)) for x, a in charges), density, tag)

    @property
    def locations(self) -> np.ndarray:
        if not self.charges:
            return np.zeros((0, 0))
        return np.array([x for x, _ in self.charges])

    @property
    def weights(self) -> np.ndarray:
        return np.array([a for _, a in self.charges], dtype=float)

    def negated(self) -> "MeasureSource":
        dens = None if self.density is None else ScalarField(self.density.grid, -self.density.values)
        return MeasureSource(tuple((x, -a) for x, a in self.charges), dens, self.tag)

    def plus_charges(self, extra: Sequence[tuple[Sequence[float], float]]) -> "MeasureSource":
        more = tuple((np.asarray(x, dtype=float), float(a)) for x, a in extra)
        return MeasureSource(self.charges + more, self.density, self.tag)

    def check_inside(self, grid: Grid) -> None:
        for x, _ in self.charges:
            lo = np.asarray(grid.origin)
            hi = np.asarray(grid.upper)
            if np.any(x <= lo) or np.any(x >= hi):
                raise ValueError(f"charge at {x} is not strictly inside the grid box")


@dataclass(frozen=True, eq=False)
class MollifiedSource:
    """Smooth source on a grid; ``density`` holds rho_j, and H_j = -rho_j."""

    origin: MeasureSource | None
    width: float
    density: ScalarField
    tag: str = ""

    @property
    def grid(self) -> Grid:
        return self.density.grid

    @property
    def H(self) -> np.ndarray:
        return -self.density.values

    def mass(self) -> float:
        g = self.grid
        return float(self.density.values[g.active].sum() * g.cell_volume)

    def l1(self) -> float:
        g = self.grid
        return float(np.abs(self.density.values[g.active]).sum() * g.cell_volume)

    @classmethod
    def from_density(cls, field: ScalarField, tag: str = "") -> "MollifiedSource":
        if not np.all(np.isfinite(field.values[field.grid.active])):
            raise ValueError("source density is not finite")
        return cls(None, 0.0, field, tag)

    def negated(self) -> "MollifiedSource":
        return MollifiedSource(self.origin, self.width, ScalarField(self.grid, -self.density.values), self.tag)


def bump(r: np.ndarray) -> np.ndarray:
    """(1 - r^2)^3 on r < 1, zero outside; C^2 with compact support."""
    return np.where(r < 1.0, (1.0 - np.minimum(r, 1.0) ** 2) ** 3, 0.0)


def _stencil(grid: Grid, width: float) -> np.ndarray:
    half = [int(math.ceil(width / h)) for h in grid.spacing]
    ax = [h * np.arange(-k, k + 1) for h, k in zip(grid.spacing, half)]
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    return bump(np.linalg.norm(pts, axis=-1) / width)


def corners_from_cells(cells: np.ndarray) -> np.ndarray:
    """Nodal density receiving an equal share of every cell value from each of its 2**m cells."""
    m = cells.ndim
    out = np.zeros(tuple(n + 1 for n in cells.shape))
    for bits in itertools.product((0, 1), repeat=m):
        out[tuple(slice(b, b + n) for b, n in zip(bits, cells.shape))] += cells
    return out / 2**m


def mollify(source: MeasureSource, width: float, grid: Grid | None = None) -> MollifiedSource:
    """Replace every charge and the density by its convolution with a unit-mass bump.

    Each charge's kernel is sampled at active cell centres around its exact
    (off-grid) position, rescaled to the charge, and each cell's mass is split
    equally among its corners.  Densities built this way are orthogonal to the
    grid-scale oscillations (checkerboards) that the corner-averaged gradient
    cannot see, so narrow kernels do not excite them.
    The density is spread node by node with the same renormalisation, so the
    signed mass is preserved to roundoff.
    """
    if grid is None:
        if source.density is None:
            raise ValueError("a grid is needed to mollify a charge-only source")
        grid = source.density.grid
    if width < 2.0 * grid.h * (1 - 1e-12):
        raise ResolutionError(f"mollification width {width} is below 2h = {2 * grid.h}")
    vol = grid.cell_volume
    out = np.zeros(grid.shape)
    act = grid.active
    if source.charges:
        centers = grid.cell_centers()
        cells = np.zeros(grid.cell_shape)
        for x, a in source.charges:
            k = bump(np.linalg.norm(centers - x, axis=-1) / width) * grid.cell_active
            z = k.sum() * vol
            if z <= 0:
                raise ResolutionError(f"charge at {x} has no active cells within width {width}")
            cells += a * k / z
        out += corners_from_cells(cells)
    if source.density is not None:
        if source.density.grid is not grid:
            raise ValueError("density lives on a different grid")
        st = _stencil(grid, width)
        actf = act.astype(float)
        z = fftconvolve(actf, st, mode="same") * vol
        rho = np.where(act, source.density.values, 0.0)
        scaled = np.divide(rho, z, out=np.zeros_like(rho), where=act & (z > 0))
        out += fftconvolve(scaled, st, mode="same") * vol * actf
    out[~act] = 0.0
    return MollifiedSource(source, float(width), ScalarField(grid, out), source.tag)


def total_variation(source: MeasureSource | MollifiedSource) -> float:
    if isinstance(source, MollifiedSource):
        return source.l1()
    tv = float(np.sum(np.abs(source.weights))) if source.charges else 0.0
    if source.density is not None:
        g = source.density.grid
        tv += float(np.abs(source.density.values[g.active]).sum() * g.cell_volume)
    return tv


def ball_mass(source: MeasureSource | MollifiedSource, center: Sequence[float], radius: float) -> float:
    """|rho|(B_radius(center)) with open ball and nodal quadrature for densities."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    total = 0.0
    dens = source.density
    if isinstance(source, MeasureSource):
        for x, a in source.charges:
            if np.linalg.norm(x - c) < radius:
                total += abs(a)
    if dens is not None:
        g = dens.grid
        inside = (np.linalg.norm(g.coords() - c, axis=-1) < radius) & g.active
        total += float(np.abs(dens.values[inside]).sum() * g.cell_volume)
    return total


def sphere_area(m: int) -> float:
    """Surface measure of the unit sphere S^{m-1} in R^m (omega_{m-1})."""
    return 2.0 * math.pi ** (m / 2) / gamma(m / 2)


@dataclass(frozen=True)
class SeparationMargin:
    margin: float
    threshold: float
    min_distance: float
    applicable: bool = True


def charge_separation_margin(source: MeasureSource, m: int) -> SeparationMargin:
    """min pairwise distance minus the no-light-segment threshold for point charges.

    The threshold is (m/omega)^(1/(m-1)) * (m-1)/(m-2) * [S_-^(1/(m-1)) + S_+^(1/(m-1))]
    with omega the area of S^{m-1} and S_-/S_+ the total negative/positive
    charge.  In dimension 2 the criterion does not apply and the margin is +inf.
    """
    weights = source.weights
    if m == 2:
        return SeparationMargin(math.inf, math.inf, math.inf, applicable=False)
    if m < 2:
        raise ValueError("dimension must be at least 2")
    e = 1.0 / (m - 1)
    neg = float(np.abs(weights[weights < 0]).sum()) if weights.size else 0.0
    pos = float(weights[weights > 0].sum()) if weights.size else 0.0
    threshold = (m / sphere_area(m)) ** e * (m - 1) / (m - 2) * (neg**e + pos**e)
    locs = source.locations
    if locs.shape[0] < 2:
        dmin = math.inf
    else:
        diff = locs[:, None, :] - locs[None, :, :]
        d = np.sqrt((diff**2).sum(-1))
        d[np.diag_indices_from(d)] = np.inf
        dmin = float(d.min())
    return SeparationMargin(dmin - threshold, threshold, dmin)


# --- closed-form density expressions -------------------------------------------------

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_FUNCS = {"exp": np.exp}


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class DensityExpression:
    """Arithmetic in constants, coordinates x1..xm, the radius r = |x| and exp()."""

    text: str
    tree: ast.Expression = field(repr=False, compare=False, default=None)

    @classmethod
    def parse(cls, text: str) -> "DensityExpression":
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse density {text!r}: {exc.msg}") from None
        for node in ast.walk(tree):
            ok = isinstance(
                node,
                (ast.Expression, ast.BinOp, ast.UnaryOp, ast.USub, ast.UAdd, ast.Constant, ast.Name, ast.Call, ast.Load)
                + tuple(_BINOPS),
            )
            if not ok:
                raise ExpressionError(f"{type(node).__name__} is not allowed in density {text!r}")
            if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
                raise ExpressionError(f"only exp() may be called in density {text!r}")
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ExpressionError(f"non-numeric constant in density {text!r}")
        return cls(text, tree)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        m = pts.shape[-1]
        env = {f"x{i + 1}": pts[..., i] for i in range(m)}
        env["r"] = np.linalg.norm(pts, axis=-1)
        return np.broadcast_to(np.asarray(self._eval(self.tree.body, env), dtype=float), pts.shape[:-1]).copy()

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in env:
                raise ExpressionError(f"unknown symbol {node.id!r} in density {self.text!r}")
            return env[node.id]
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.Call):
            if len(node.args) != 1:
                raise ExpressionError("exp() takes one argument")
            return _FUNCS[node.func.id](self._eval(node.args[0], env))
        raise ExpressionError(f"unsupported expression node {type(node).__name__}")


def density_field(grid: Grid, expr: str | DensityExpression) -> ScalarField:
    if isinstance(expr, str):
        expr = DensityExpression.parse(expr)
    vals = expr(grid.coords())
    vals[~grid.active] = 0.0
    return ScalarField(grid, vals)
