"""Structured grids, fields and the corner-averaged gradient/divergence pair.

Nodes live on the lattice ``origin + i * spacing`` of a bounding box.  A grid
kind (``box``, ``ball`` or ``mask``) selects which lattice points belong to the
domain ("active" nodes).  Active nodes are split into interior nodes (all
``3**m - 1`` lattice neighbours active) and boundary nodes.  Gradients are
sampled at cell centres, a cell being active when all of its ``2**m`` corners
are active nodes.

Fields are stored as arrays over the full bounding-box lattice; entries at
inactive nodes/cells are held at zero and never read.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from bilab import kernels


class ConfigurationError(ValueError):
    """Raised for degenerate domain descriptions."""


@dataclass(frozen=True)
class DomainSpec:
    """Description of Omega: a box, a ball, or a box with a node predicate.

    For ``ball`` the bounding box is ``center -/+ radius``.  For ``mask`` the
    ``predicate`` receives an ``(n, m)`` coordinate array and returns a boolean
    array marking lattice points inside the closed domain.
    """

    kind: str
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0
    predicate: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "DomainSpec":
        return cls("box", lower=tuple(map(float, lower)), upper=tuple(map(float, upper)))

    @classmethod
    def ball(cls, center: Sequence[float], radius: float) -> "DomainSpec":
        c = tuple(map(float, center))
        r = float(radius)
        return cls(
            "ball",
            lower=tuple(x - r for x in c),
            upper=tuple(x + r for x in c),
            center=c,
            radius=r,
        )

    @classmethod
    def mask(cls, lower, upper, predicate) -> "DomainSpec":
        return cls(
            "mask",
            lower=tuple(map(float, lower)),
            upper=tuple(map(float, upper)),
            predicate=predicate,
        )

    @property
    def dimension(self) -> int:
        return len(self.lower)


@dataclass(frozen=True, eq=False)
class Grid:
    kind: str
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...]
    active: np.ndarray
    interior: np.ndarray
    boundary: np.ndarray
    cell_active: np.ndarray
    domain: DomainSpec | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.shape)

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.shape)

    @property
    def n_nodes(self) -> int:
        return int(self.active.sum())

    @property
    def n_interior(self) -> int:
        return int(self.interior.sum())

    @property
    def n_boundary(self) -> int:
        return int(self.boundary.sum())

    @property
    def n_cells(self) -> int:
        return int(self.cell_active.sum())

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def h(self) -> float:
        """Largest spacing; the resolution scale used by tolerances."""
        return float(max(self.spacing))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(o + (n - 1) * h for o, n, h in zip(self.origin, self.shape, self.spacing))

    @property
    def diameter(self) -> float:
        pts = self.coords()[self.active]
        if self.kind == "ball":
            return 2.0 * self.domain.radius
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def axes(self) -> list[np.ndarray]:
        return [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.shape)]

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (m,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        ax = [o + h * (np.arange(n - 1) + 0.5) for o, h, n in zip(self.origin, self.spacing, self.shape)]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def node_index(self, point: Sequence[float]) -> tuple[int, ...]:
        """Lattice multi-index of ``point``; raises if it is not an active node."""
        idx = []
        for x, o, h, n in zip(point, self.origin, self.spacing, self.shape):
            k = (x - o) / h
            ki = int(round(k))
            if abs(k - ki) > 1e-8 or not 0 <= ki < n:
                raise ValueError(f"point {tuple(point)} is not a grid node")
            idx.append(ki)
        idx = tuple(idx)
        if not self.active[idx]:
            raise ValueError(f"point {tuple(point)} lies outside the domain")
        return idx

    def node_point(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([o + h * i for o, h, i in zip(self.origin, self.spacing, idx)])

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.shape))


def build_grid(domain: DomainSpec, resolution: int | Sequence[int]) -> Grid:
    """Lattice the domain's bounding box with ``resolution`` nodes per axis."""
    m = domain.dimension
    if m < 1:
        raise ConfigurationError("domain has no axes")
    res = (int(resolution),) * m if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if len(res) != m:
        raise ConfigurationError(f"resolution has {len(res)} entries for a {m}-dimensional domain")
    if min(res) < 3:
        raise ConfigurationError("resolution must be at least 3 nodes per axis")
    if domain.kind == "ball" and domain.radius <= 0:
        raise ConfigurationError("ball radius must be positive")
    extents = [u - l for l, u in zip(domain.lower, domain.upper)]
    if min(extents) <= 0:
        raise ConfigurationError(f"degenerate extent {extents}")
    spacing = tuple(e / (n - 1) for e, n in zip(extents, res))
    origin = tuple(domain.lower)

    axes = [o + h * np.arange(n) for o, h, n in zip(origin, spacing, res)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if domain.kind == "box":
        active = np.ones(res, dtype=bool)
    elif domain.kind == "ball":
        dist = np.linalg.norm(pts - np.asarray(domain.center), axis=-1)
        active = dist <= domain.radius * (1 + 1e-12)
    elif domain.kind == "mask":
        if domain.predicate is None:
            raise ConfigurationError("mask domain needs a predicate")
        active = np.asarray(domain.predicate(pts.reshape(-1, m)), dtype=bool).reshape(res)
    else:
        raise ConfigurationError(f"unknown domain kind {domain.kind!r}")
    if not active.any():
        raise ConfigurationError("domain contains no grid nodes")
    return _classify(domain.kind, res, spacing, origin, active, domain)


def _classify(kind, shape, spacing, origin, active, domain) -> Grid:
    m = len(shape)
    padded = np.pad(active, 1, constant_values=False)
    interior = active.copy()
    for off in itertools.product((-1, 0, 1), repeat=m):
        if not any(off):
            continue
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shape))
        interior &= padded[sl]
    boundary = active & ~interior
    cell_active = np.ones(tuple(n - 1 for n in shape), dtype=bool)
    for bits in itertools.product((0, 1), repeat=m):
        sl = tuple(slice(b, b + n - 1) for b, n in zip(bits, shape))
        cell_active &= active[sl]
    for a in (active, interior, boundary, cell_active):
        a.setflags(write=False)
    return Grid(kind, tuple(shape), tuple(spacing), tuple(origin), active, interior, boundary, cell_active, domain)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values; ``extended`` marks fields allowed to carry +inf."""

    grid: Grid
    values: np.ndarray
    extended: bool = False

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not self.extended and not np.all(np.isfinite(self.values[self.grid.active])):
            raise ValueError("non-finite values in a finite field")

    def nodal(self) -> np.ndarray:
        """Active-node values in row-major lattice order."""
        return self.values[self.grid.active]


@dataclass(frozen=True, eq=False)
class VectorField:
    """Cell-centred m-vectors, stored component-first: ``(m,) + cell_shape``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        expected = (self.grid.m,) + self.grid.cell_shape
        if self.values.shape != expected:
            raise ValueError(f"vector field shape {self.values.shape}, expected {expected}")

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=0))


@dataclass(frozen=True, eq=False)
class BoundaryDatum:
    """phi on boundary nodes, optionally tagged with the closed form it came from.

    ``descriptor`` is one of ``("zero",)``, ``("affine", c, d)``,
    ``("radial", callable_of_r)`` or ``None``.
    """

    grid: Grid
    values: np.ndarray
    descriptor: tuple | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values[self.grid.boundary])):
            raise ValueError("boundary datum must be finite on boundary nodes")

    @property
    def slope(self) -> float | None:
        if self.descriptor and self.descriptor[0] == "affine":
            return float(np.linalg.norm(self.descriptor[1]))
        if self.descriptor and self.descriptor[0] == "zero":
            return 0.0
        return None

    @classmethod
    def zero(cls, grid: Grid) -> "BoundaryDatum":
        return cls(grid, np.zeros(grid.shape), ("zero",))

    @classmethod
    def affine(cls, grid: Grid, c: Sequence[float], d: float = 0.0) -> "BoundaryDatum":
        c = np.asarray(c, dtype=float)
        vals = grid.coords() @ c + d
        vals = np.where(grid.boundary, vals, 0.0)
        return cls(grid, vals, ("affine", tuple(c), float(d)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray], descriptor=None) -> "BoundaryDatum":
        pts = grid.coords()
        vals = np.zeros(grid.shape)
        vals[grid.boundary] = fn(pts[grid.boundary])
        return cls(grid, vals, descriptor)

    def shifted(self, c: float) -> "BoundaryDatum":
        vals = np.where(self.grid.boundary, self.values + c, 0.0)
        return BoundaryDatum(self.grid, vals, None)


def discrete_gradient(u: ScalarField) -> VectorField:
    """Cell-centred gradient: per axis, the mean of the 2**(m-1) parallel edge differences."""
    g = u.grid
    p = kernels.gradient(np.where(g.active, u.values, 0.0), g.spacing)
    p *= g.cell_active
    return VectorField(g, p)


def discrete_divergence(p: VectorField) -> ScalarField:
    """Negative adjoint of :func:`discrete_gradient`, evaluated at interior nodes.

    For u vanishing off the interior, ``sum(grad(u) * p) == -sum(u * div(p))``.
    Boundary and inactive nodes carry zero.
    """
    g = p.grid
    vals = kernels.divergence(p.values * g.cell_active, g.spacing)
    vals *= g.interior
    return ScalarField(g, vals)


def gradient_operator(grid: Grid) -> sp.csr_matrix:
    """Sparse matrix of the gradient, rows ``(component, cell)`` in C order over the full lattice."""
    m = grid.m
    blocks = []
    for d in range(m):
        op = None
        for a in range(m):
            n = grid.shape[a]
            if a == d:
                f = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / grid.spacing[a]
            else:
                f = sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n))
            op = f if op is None else sp.kron(op, f)
        blocks.append(op)
    K = sp.vstack(blocks).tocsr()
    rowmask = np.tile(grid.cell_active.ravel(), m)
    return sp.diags(rowmask.astype(float)) @ K


def _edge_list(grid: Grid):
    """Edges of the node graph with Euclidean weights (3**m - 1 neighbourhood).

    A move spanning a k-dimensional sub-box is allowed when every corner of
    that sub-box is active, so diagonal moves never cut a re-entrant corner.
    """
    m = grid.m
    shape = grid.shape
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    rows, cols, wts = [], [], []
    h = np.asarray(grid.spacing)
    for off in itertools.product((-1, 0, 1), repeat=m):
        off = np.array(off)
        if not off.any() or tuple(off) < tuple(np.zeros(m, int)):
            continue
        lo = np.maximum(0, -off)
        hi = np.array(shape) - np.maximum(0, off)
        src = tuple(slice(l, u) for l, u in zip(lo, hi))
        ok = np.ones(tuple(hi - lo), dtype=bool)
        nz = np.flatnonzero(off)
        for bits in itertools.product((0, 1), repeat=len(nz)):
            shift = np.zeros(m, int)
            shift[nz] = np.array(bits) * off[nz]
            sl = tuple(slice(l + s, u + s) for l, u, s in zip(lo, hi, shift))
            ok &= grid.active[sl]
        dst = tuple(slice(l + o, u + o) for l, u, o in zip(lo, hi, off))
        a = flat[src][ok]
        b = flat[dst][ok]
        w = float(np.linalg.norm(off * h))
        rows.append(a)
        cols.append(b)
        wts.append(np.full(a.size, w))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    wts = np.concatenate(wts)
    n = flat.size
    return sp.coo_matrix((wts, (rows, cols)), shape=(n, n)).tocsr()


def intrinsic_distance(grid: Grid, x: Sequence[float], y: Sequence[float]) -> float:
    """Shortest-path length between nodes ``x`` and ``y`` through the domain's node graph.

    Paths may run along boundary nodes (the closure of Omega); returns ``inf``
    when the nodes lie in different components.
    """
    ix = np.ravel_multi_index(grid.node_index(x), grid.shape)
    iy = np.ravel_multi_index(grid.node_index(y), grid.shape)
    if ix == iy:
        return 0.0
    graph = _edge_list(grid)
    d = dijkstra(graph, directed=False, indices=ix)
    return float(d[iy])


def graph_distances(grid: Grid, sources: np.ndarray) -> np.ndarray:
    """Rows of graph distances from each flat node index in ``sources`` to every lattice node."""
    graph = _edge_list(grid)
    return dijkstra(graph, directed=False, indices=np.asarray(sources))


def admissible_boundary(grid: Grid, phi: BoundaryDatum, metric: str = "auto", chunk: int = 2048) -> float:
    """``min_{x != y on the boundary} d(x, y) - |phi(x) - phi(y)|``.

    A strictly positive margin certifies at grid scale that phi admits a
    spacelike extension.  ``metric='auto'`` uses the Euclidean distance on
    convex kinds (box, ball), where it coincides with the intrinsic one, and
    grid-graph distances on masked domains.
    """
    bidx = np.flatnonzero(grid.boundary.ravel())
    if bidx.size < 2:
        return float("inf")
    vals = phi.values.ravel()[bidx]
    if metric == "auto":
        metric = "euclidean" if grid.kind in ("box", "ball") else "graph"
    best = np.inf
    if metric == "euclidean":
        pts = grid.coords().reshape(-1, grid.m)[bidx]
        for s in range(0, bidx.size, chunk):
            a = pts[s : s + chunk]
            d = np.sqrt(((a[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
            dv = np.abs(vals[s : s + chunk, None] - vals[None, :])
            rows = np.arange(a.shape[0])
            d[rows, s + rows] = np.inf
            best = min(best, float((d - dv).min()))
    elif metric == "graph":
        graph = _edge_list(grid)
        for s in range(0, bidx.size, chunk):
            d = dijkstra(graph, directed=False, indices=bidx[s : s + chunk])[:, bidx]
            dv = np.abs(vals[s : s + chunk, None] - vals[None, :])
            rows = np.arange(d.shape[0])
            d[rows, s + rows] = np.inf
            best = min(best, float((d - dv).min()))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return best
