"""Post-solve diagnostics: curvature norms, weighted integrals, Lorentzian balls,
light-segment detection and the local growth estimate for w."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bilab import kernels
from bilab.energy import GuardPolicy
from bilab.grid import Grid, ScalarField, discrete_gradient
from bilab.sources import ball_mass, sphere_area


class SpacelikeViolation(ValueError):
    """A node pair separated faster than light speed."""


# ---------------------------------------------------------------------------
# nodal derivatives


def deep_interior(grid: Grid) -> np.ndarray:
    """Nodes whose full 3**m neighbourhood consists of interior nodes."""
    pad = np.pad(grid.interior, 1, constant_values=False)
    out = grid.interior.copy()
    for off in itertools.product((-1, 0, 1), repeat=grid.m):
        if any(off):
            sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, grid.shape))
            out &= pad[sl]
    return out


def _shift(a: np.ndarray, axis: int, k: int) -> np.ndarray:
    """a[i + k] along ``axis`` with zero fill."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(k, n), slice(0, n - k)
    else:
        src[axis], dst[axis] = slice(0, n + k), slice(-k, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def nodal_gradient(u: ScalarField) -> np.ndarray:
    """Mean of the 2**m cell gradients around each node; shape (m,) + shape.

    Only meaningful at nodes whose surrounding cells are all active.
    """
    g = u.grid
    p = discrete_gradient(u).values
    pad = np.pad(p, [(0, 0)] + [(1, 1)] * g.m)
    out = np.zeros((g.m,) + g.shape)
    for bits in itertools.product((0, 1), repeat=g.m):
        sl = (slice(None),) + tuple(slice(b, b + n) for b, n in zip(bits, g.shape))
        out += pad[sl]
    return out / 2**g.m


def nodal_hessian(u: ScalarField) -> np.ndarray:
    """Centred second differences; shape (m, m) + shape, valid at deep-interior nodes."""
    g = u.grid
    v = np.where(g.active, u.values, 0.0)
    m = g.m
    H = np.zeros((m, m) + g.shape)
    for i in range(m):
        hi = g.spacing[i]
        H[i, i] = (_shift(v, i, 1) - 2.0 * v + _shift(v, i, -1)) / hi**2
        for j in range(i + 1, m):
            pp = _shift(_shift(v, i, 1), j, 1)
            pm = _shift(_shift(v, i, 1), j, -1)
            mp = _shift(_shift(v, i, -1), j, 1)
            mm = _shift(_shift(v, i, -1), j, -1)
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * hi * g.spacing[j])
    return H


def curvature_terms(H: np.ndarray, Du: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """|D2u|^2, |D2u(Du, .)|^2 and D2u(Du, Du) for Hessians (m, m, ...) and gradients (m, ...)."""
    hess2 = np.sum(H * H, axis=(0, 1))
    HDu = np.einsum("ij...,j...->i...", H, Du)
    return hess2, np.sum(HDu * HDu, axis=0), np.sum(HDu * Du, axis=0)


def sff_from_terms(w, hess2, hdu2, hduu):
    """||II|| = sqrt(w^2 |D2u|^2 + 2 w^4 |D2u(Du,.)|^2 + w^6 D2u(Du,Du)^2)."""
    return np.sqrt(w**2 * hess2 + 2.0 * w**4 * hdu2 + w**6 * hduu**2)


@dataclass(frozen=True)
class SecondFormReport:
    field: ScalarField
    evaluated: np.ndarray
    capped: int


def second_fundamental_form(u: ScalarField, guard: GuardPolicy | None = None) -> SecondFormReport:
    """||II|| at deep-interior nodes; NaN elsewhere and at capped nodes."""
    guard = guard or GuardPolicy()
    g = u.grid
    Du = nodal_gradient(u)
    w = kernels.energy_density(Du, guard.w_max)
    deep = deep_interior(g)
    capped = deep & (w >= guard.w_max)
    ok = deep & ~capped
    hess2, hdu2, hduu = curvature_terms(nodal_hessian(u), Du)
    vals = np.full(g.shape, np.nan)
    vals[ok] = sff_from_terms(w, hess2, hdu2, hduu)[ok]
    return SecondFormReport(ScalarField(g, vals, extended=True), ok, int(capped.sum()))


def second_fundamental_form_norm(u: ScalarField, guard: GuardPolicy | None = None) -> ScalarField:
    return second_fundamental_form(u, guard).field


# ---------------------------------------------------------------------------
# weighted integrals


@dataclass(frozen=True)
class Region:
    """Integration region: ``box`` (lower, upper), ``annulus`` (center, r_in, r_out) or ``all``."""

    kind: str = "all"
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    center: tuple[float, ...] | None = None
    r_in: float = 0.0
    r_out: float = math.inf

    @classmethod
    def box(cls, lower, upper) -> "Region":
        return cls("box", lower=tuple(map(float, lower)), upper=tuple(map(float, upper)))

    @classmethod
    def annulus(cls, center, r_in, r_out) -> "Region":
        if not 0 <= r_in < r_out:
            raise ValueError("annulus needs 0 <= r_in < r_out")
        return cls("annulus", center=tuple(map(float, center)), r_in=float(r_in), r_out=float(r_out))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "all":
            return np.ones(pts.shape[:-1], dtype=bool)
        if self.kind == "box":
            tol = 1e-12 * max(1.0, *np.abs(self.lower), *np.abs(self.upper))
            return np.all((pts >= np.asarray(self.lower) - tol) & (pts <= np.asarray(self.upper) + tol), axis=-1)
        if self.kind == "annulus":
            r = np.linalg.norm(pts - np.asarray(self.center), axis=-1)
            return (r >= self.r_in) & (r <= self.r_out)
        raise ValueError(f"unknown region kind {self.kind!r}")

    def describe(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != math.inf}


@dataclass(frozen=True)
class IntegralReport:
    """Cell quadratures of w-weighted quantities over a region."""

    w: float
    w_log: float
    curvature: float
    w_log_power: float
    volume: float
    q0: float
    capped: int
    max_beta: float
    region: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def log_weighted_integrals(
    u: ScalarField, q0: float = 1.0, region: Region | None = None, guard: GuardPolicy | None = None
) -> IntegralReport:
    """Integrals of w, w log(1+w), (1+log w)^q0 {w|D2u|^2 + w^3|D2u(Du,.)|^2 + w^5 D2u(Du,Du)^2}
    and w (1+log w)^(q0+1) over the active cells whose centres lie in ``region``.

    Cell gradients give w; curvature terms use the mean of the nodal Hessians at
    the cell corners, so every selected cell must have deep-interior corners.
    """
    if q0 < 0:
        raise ValueError("q0 must be nonnegative")
    guard = guard or GuardPolicy()
    region = region or Region()
    g = u.grid
    sel = g.cell_active & region.contains(g.cell_centers())
    deep = deep_interior(g)
    H = nodal_hessian(u)
    corner_ok = np.ones(g.cell_shape, dtype=bool)
    Hc = np.zeros((g.m, g.m) + g.cell_shape)
    for bits in itertools.product((0, 1), repeat=g.m):
        sl = tuple(slice(b, b + n - 1) for b, n in zip(bits, g.shape))
        corner_ok &= deep[sl]
        Hc += H[(slice(None), slice(None)) + sl]
    Hc /= 2**g.m
    if np.any(sel & ~corner_ok):
        raise ValueError("region reaches within one cell of the boundary collar")
    p = discrete_gradient(u).values
    w = kernels.energy_density(p, guard.w_max)
    capped = sel & (w >= guard.w_max)
    ok = sel & ~capped
    V = g.cell_volume
    wk = w[ok]
    lw = np.log(wk)
    hess2, hdu2, hduu = (t[ok] for t in curvature_terms(Hc, p))
    curv = (1.0 + lw) ** q0 * (wk * hess2 + wk**3 * hdu2 + wk**5 * hduu**2)
    return IntegralReport(
        w=float(wk.sum() * V),
        w_log=float(np.sum(wk * np.log1p(wk)) * V),
        curvature=float(curv.sum() * V),
        w_log_power=float(np.sum(wk * (1.0 + lw) ** (q0 + 1)) * V),
        volume=float(sel.sum() * V),
        q0=float(q0),
        capped=int(capped.sum()),
        max_beta=float(np.arccosh(wk.max())) if wk.size else 0.0,
        region=region.describe(),
    )


# ---------------------------------------------------------------------------
# Lorentzian distance


def lorentzian_distance(u: ScalarField, o) -> ScalarField:
    """sqrt(|x - o|^2 - (u(x) - u(o))^2) at every active node; ``o`` is a node's coordinates."""
    g = u.grid
    idx = g.node_index(o)
    x = g.coords()
    r2 = np.sum((x - g.node_point(idx)) ** 2, axis=-1)
    du = u.values - u.values[idx]
    rad = r2 - du * du
    bad = g.active & (rad < -1e-9 * r2)
    if bad.any():
        worst = np.unravel_index(np.argmin(np.where(bad, rad / np.maximum(r2, 1e-300), np.inf)), g.shape)
        raise SpacelikeViolation(f"|u(x) - u(o)| exceeds |x - o| at node {tuple(int(k) for k in worst)}")
    vals = np.where(g.active, np.sqrt(np.maximum(rad, 0.0)), 0.0)
    return ScalarField(g, vals)


def lorentzian_ball(u: ScalarField, centers, R: float) -> np.ndarray:
    """Union over centres of {l_o < R}; ``centers`` is a node mask or a list of node coordinates."""
    g = u.grid
    if isinstance(centers, np.ndarray) and centers.dtype == bool:
        nodes = [g.node_point(ix) for ix in np.argwhere(centers & g.active)]
    else:
        nodes = list(centers)
    mask = np.zeros(g.shape, dtype=bool)
    for o in nodes:
        mask |= g.active & (lorentzian_distance(u, o).values < R)
    return mask


# ---------------------------------------------------------------------------
# light segments


@dataclass(frozen=True)
class Segment:
    start: tuple[float, ...]
    end: tuple[float, ...]
    slack: float
    length: float


@dataclass
class LightSegmentReport:
    segments: list[Segment]
    covered: np.ndarray
    tol_light: float
    globally_null: bool
    null_fraction: float
    seeds: int

    @property
    def empty(self) -> bool:
        return not self.segments

    def points(self, per_h: int = 1, h: float | None = None) -> np.ndarray:
        """Points sampled along every segment (endpoints included)."""
        out = []
        for s in self.segments:
            a, b = np.asarray(s.start), np.asarray(s.end)
            n = 2 if h is None else max(2, int(math.ceil(s.length / h * per_h)) + 1)
            out.append(a + np.linspace(0.0, 1.0, n)[:, None] * (b - a))
        return np.concatenate(out) if out else np.zeros((0, len(self.covered.shape)))

    def to_dict(self) -> dict:
        return {
            "tol_light": self.tol_light,
            "globally_null": self.globally_null,
            "null_fraction": self.null_fraction,
            "seeds": self.seeds,
            "covered_nodes": int(self.covered.sum()),
            "segments": [asdict(s) for s in self.segments],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        m = self.covered.ndim
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{i + 1}" for i in range(m)] + [f"y{i + 1}" for i in range(m)] + ["slack"])
            for s in self.segments:
                wr.writerow([repr(c) for c in s.start] + [repr(c) for c in s.end] + [repr(s.slack)])
        return path


def _directions(m: int, reach: int) -> np.ndarray:
    """Primitive integer directions with entries in [-reach, reach], first nonzero positive."""
    out = []
    for d in itertools.product(range(-reach, reach + 1), repeat=m):
        d = np.array(d)
        nz = np.flatnonzero(d)
        if nz.size == 0 or d[nz[0]] < 0 or np.gcd.reduce(np.abs(d[nz])) != 1:
            continue
        out.append(d)
    return np.array(out)


class _Scanner:
    def __init__(self, u: ScalarField, tol: float, usable: np.ndarray):
        g = u.grid
        self.g = g
        self.u = u.values
        self.h = np.asarray(g.spacing)
        self.tol = tol
        self.shape = np.asarray(g.shape)
        self.usable = usable

    def inside(self, idx) -> bool:
        return bool(np.all(idx >= 0) and np.all(idx < self.shape) and self.usable[tuple(idx)])

    def slack(self, a, b) -> tuple[float, float]:
        length = float(np.linalg.norm((b - a) * self.h))
        return length - abs(self.u[tuple(b)] - self.u[tuple(a)]), length

    def null(self, a, b) -> bool:
        s, length = self.slack(a, b)
        return s <= self.tol * length

    def grow(self, x, d) -> tuple[int, int]:
        """Extend x - lo d .. x + hi d while the endpoints stay null and nodes stay active."""
        lo = hi = 0
        moved = True
        while moved:
            moved = False
            b = x + (hi + 1) * d
            if self.inside(b) and self.null(x - lo * d, b):
                hi += 1
                moved = True
            a = x - (lo + 1) * d
            if self.inside(a) and self.null(a, x + hi * d):
                lo += 1
                moved = True
        return lo, hi


def _line_key(idx, d):
    k = int(np.flatnonzero(d)[0])
    t = int(idx[k] // d[k])
    return (tuple(int(c) for c in d), tuple(int(c) for c in idx - t * d)), t


def detect_light_segments(
    u: ScalarField,
    tol_light: float | None = None,
    *,
    percentile: float = 99.0,
    max_seeds: int = 2000,
    reach: int = 1,
    cone: float = 0.7,
    samples: int = 1000,
    min_length: float | None = None,
    seed: int = 0,
    guard: GuardPolicy | None = None,
    exclude: Sequence[tuple[Sequence[float], float]] = (),
) -> LightSegmentReport:
    """Maximal discrete null segments: node pairs with |x-y| - |u(x)-u(y)| <= tol_light |x-y|.

    Seeds are corners of the cells whose w reaches the given percentile; from
    each seed, lattice directions within the ``cone`` of the local gradient are
    grown at both ends. Collinear overlapping segments are merged. A separate
    random sample of active nodes estimates the fraction of the domain that is
    crossed by null pairs; above one half the datum is flagged globally null.
    The default tolerance is 2h / diam. Nodes inside the ``exclude`` balls,
    given as (centre, radius) pairs, are never used as segment points; this
    keeps the mollified core of a point charge out of the scan.
    """
    g = u.grid
    tol = 2.0 * g.h / g.diameter if tol_light is None else float(tol_light)
    if not 0 < tol < 0.5:
        raise ValueError("tol_light must lie in (0, 0.5)")
    min_len = 4.0 * g.h if min_length is None else float(min_length)
    guard = guard or GuardPolicy()
    usable = g.active.copy()
    if exclude:
        pts = g.coords()
        for centre, radius in exclude:
            usable &= np.linalg.norm(pts - np.asarray(centre, float), axis=-1) > radius
    sc = _Scanner(u, tol, usable)
    dirs = _directions(g.m, reach)
    dhat = dirs * sc.h
    dhat = dhat / np.linalg.norm(dhat, axis=1, keepdims=True)
    p = discrete_gradient(u).values
    w = np.where(g.cell_active, kernels.energy_density(p, guard.w_max), 0.0)
    wa = w[g.cell_active]
    if wa.size == 0:
        return LightSegmentReport([], np.zeros(g.shape, bool), tol, False, 0.0, 0)
    thresh = max(np.percentile(wa, percentile), 1.0 + 1e-12)
    cand = np.argwhere(g.cell_active & (w >= thresh))
    order = np.lexsort(tuple(cand.T[::-1]) + (-w[tuple(cand.T)],))
    cand = cand[order[:max_seeds]]

    lines: dict = {}
    seen = set()
    for c in cand:
        grad = p[(slice(None),) + tuple(c)]
        gn = np.linalg.norm(grad)
        if gn == 0:
            continue
        ok = np.abs(dhat @ (grad / gn)) >= cone
        for bits in itertools.product((0, 1), repeat=g.m):
            x = c + np.array(bits)
            if not sc.inside(x):
                continue
            for d in dirs[ok]:
                key, t = _line_key(x, d)
                if (key, t) in seen:
                    continue
                lo, hi = sc.grow(x, d)
                for k in range(-lo, hi + 1):
                    seen.add((key, t + k))
                if lo + hi == 0:
                    continue
                length = float(np.linalg.norm((lo + hi) * d * sc.h))
                if length < min_len * (1 - 1e-12):
                    continue
                lines.setdefault(key, []).append((t - lo, t + hi))

    segments = []
    covered = np.zeros(g.shape, dtype=bool)
    for (d, base), ivs in sorted(lines.items()):
        d = np.array(d)
        base = np.array(base)
        merged: list[list[int]] = []
        for a, b in sorted(ivs):
            if merged and a <= merged[-1][1] and sc.null(base + merged[-1][0] * d, base + max(b, merged[-1][1]) * d):
                merged[-1][1] = max(b, merged[-1][1])
            else:
                merged.append([a, b])
        for a, b in merged:
            xa, xb = base + a * d, base + b * d
            s, length = sc.slack(xa, xb)
            segments.append(Segment(tuple(map(float, g.node_point(xa))), tuple(map(float, g.node_point(xb))), max(float(s), 0.0), length))
            for k in range(a, b + 1):
                covered[tuple(base + k * d)] = True

    # global sample: does a null pair of minimum length start at a random node?
    rng = np.random.default_rng(seed)
    act = np.argwhere(usable)
    if len(act) == 0:
        return LightSegmentReport(segments, covered, tol, False, 0.0, len(cand))
    pick = act[rng.choice(len(act), size=min(samples, len(act)), replace=False)]
    steps = np.maximum(1, np.ceil(min_len / np.linalg.norm(dirs * sc.h, axis=1))).astype(int)
    hits = 0
    for x in pick:
        for d, k in zip(dirs, steps):
            if any(sc.inside(y) and sc.null(x, y) for y in (x + k * d, x - k * d)):
                hits += 1
                break
    frac = hits / len(pick)
    return LightSegmentReport(segments, covered, tol, frac > 0.5, frac, len(cand))


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.spatial.distance import directed_hausdorff

    if len(a) == 0 or len(b) == 0:
        return math.inf
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


# ---------------------------------------------------------------------------
# growth estimate


def _distance_to_boundary(g: Grid, y: np.ndarray) -> float:
    dom = g.domain
    if dom is not None and dom.kind == "box":
        return float(min(np.min(y - np.asarray(dom.lower)), np.min(np.asarray(dom.upper) - y)))
    if dom is not None and dom.kind == "ball":
        return float(dom.radius - np.linalg.norm(y - np.asarray(dom.center)))
    pts = g.coords()[g.boundary]
    return float(np.min(np.linalg.norm(pts - y, axis=-1)))


def ball_cell_weights(g: Grid, y: Sequence[float], r: float, sub: int | None = None) -> np.ndarray:
    """Fraction of each cell inside B_r(y), rescaled so the fractions times the
    cell volume sum to |B_r| exactly. Partial cells are sub-sampled."""
    y = np.asarray(y, dtype=float)
    h = np.asarray(g.spacing)
    origin = np.asarray(g.origin)
    centers = g.cell_centers()
    # nearest and farthest point of each cell from y
    rel = np.abs(centers - y)
    near = np.linalg.norm(np.maximum(rel - h / 2, 0.0), axis=-1)
    far = np.linalg.norm(rel + h / 2, axis=-1)
    full = far <= r
    part = (near < r) & ~full
    frac = full.astype(float)
    if sub is None:
        sub = max(2, int(round(2 ** (12 / g.m))))
    offs = (np.stack(np.meshgrid(*[(np.arange(sub) + 0.5) / sub - 0.5] * g.m, indexing="ij"), -1).reshape(-1, g.m)) * h
    idx = np.argwhere(part)
    for i0 in range(0, len(idx), 4096):
        blk = idx[i0 : i0 + 4096]
        pts = origin + (blk + 0.5) * h
        inside = np.linalg.norm(pts[:, None, :] + offs[None] - y, axis=-1) < r
        frac[tuple(blk.T)] = inside.mean(axis=1)
    V = g.cell_volume
    target = sphere_area(g.m) * r**g.m / g.m
    psum = frac[part].sum() * V
    if psum > 0:
        frac[part] *= (target - full.sum() * V) / psum
    return frac


def local_energy(u: ScalarField, y: Sequence[float], r: float, guard: GuardPolicy | None = None) -> float:
    """J_y(r): integral of w over the ball B_r(y)."""
    guard = guard or GuardPolicy()
    g = u.grid
    wts = ball_cell_weights(g, y, r)
    if np.any((wts > 0) & ~g.cell_active):
        raise ValueError("ball leaves the active cells")
    w = kernels.energy_density(discrete_gradient(u).values, guard.w_max)
    return float(np.sum(wts * w) * g.cell_volume)


def growth_check(u: ScalarField, source, y: Sequence[float], s: float, t: float, guard: GuardPolicy | None = None) -> float:
    """s [J_y(t)/t + |rho|(B_t(y))] - J_y(s); nonnegative up to quadrature error."""
    g = u.grid
    yv = np.asarray(y, dtype=float)
    if yv.shape != (g.m,):
        raise ValueError(f"point must have {g.m} coordinates")
    if not 0 < s < t:
        raise ValueError("need 0 < s < t")
    dist = _distance_to_boundary(g, yv)
    if not t < dist:
        raise ValueError(f"t = {t} must be below the distance {dist:.6g} to the boundary")
    mass = ball_mass(source, yv, t) if source is not None else 0.0
    return s * (local_energy(u, yv, t, guard) / t + mass) - local_energy(u, yv, s, guard)


def random_growth_samples(g: Grid, count: int, rng: np.random.Generator | int = 0) -> list[tuple[np.ndarray, float, float]]:
    """Random (y, s, t) with 0 < s < t and B_t(y) inside the active cells."""
    rng = np.random.default_rng(rng)
    pts = g.coords()[g.interior]
    slack = float(np.linalg.norm(g.spacing))
    out = []
    for _ in range(1000 * count):
        if len(out) == count:
            break
        y = pts[rng.integers(len(pts))]
        room = _distance_to_boundary(g, y) - slack
        if room <= 4 * max(g.spacing):
            continue
        t = rng.uniform(2 * max(g.spacing), 0.95 * room)
        s = rng.uniform(0.1, 0.9) * t
        out.append((y, float(s), float(t)))
    if len(out) < count:
        raise ValueError("grid too coarse for growth samples")
    return out
