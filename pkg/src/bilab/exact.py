"""Closed-form oracles: the radial family and the light-segment family U_eps.

Radial family
    u_b(r) = int_r^T (b - H t^m/m) / sqrt(t^(2m-2) + (b - H t^m/m)^2) dt
    on the ball B_T, with point charge b * |S^{m-1}| at the origin.

Light-segment family
    x = (y, z, x_m), y in R^(m-l), z in R^(l-1), r = |y|, s = |z|,
    U = P(r) Theta(s) Q(x_m) with
    P(r) = (1 - eps^(2k) r^(2k)) zeta(r),  Theta(s) = theta1(eps s),
    Q(t) = zeta(t) A(t),  A(t) = int_0^t a.
    U has light segments exactly on {y = 0, |z| <= 1/eps, |x_m| <= eps}.

The cutoffs theta1 and a_eps are pinned only on part of their domain; both
are members of one family (plateau width c = 1 and c = eps) completed on
(3c/2, 2c] by a smooth monotone blend, see :class:`Plateau`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import expit

from bilab.grid import Grid, ScalarField
from bilab.sources import sphere_area

_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


class ConstructionError(ValueError):
    """|DU| exceeded 1: eps is above its smallness threshold."""


# --- smooth step ----------------------------------------------------------------------


def smooth_step(y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """sigma(y) = psi(y)/(psi(y)+psi(1-y)), psi(y) = exp(-1/y); value, first, second derivative.

    0 for y <= 0, 1 for y >= 1, C^infinity, maximal slope 2 at y = 1/2.
    """
    y = np.asarray(y, dtype=float)
    v = np.where(y >= 1.0, 1.0, 0.0)
    d1 = np.zeros_like(y)
    d2 = np.zeros_like(y)
    inside = (y > 0.0) & (y < 1.0)
    if np.any(inside):
        x = y[inside]
        g = 1.0 / x - 1.0 / (1.0 - x)
        s = expit(-g)
        ss = s * (1.0 - s)
        with np.errstate(over="ignore", invalid="ignore"):
            g1 = -1.0 / x**2 - 1.0 / (1.0 - x) ** 2
            g2 = 2.0 / x**3 - 2.0 / (1.0 - x) ** 3
            s1 = -ss * g1
            s2 = -(s1 * (1.0 - 2.0 * s) * g1 + ss * g2)
        live = ss > 0
        v[inside] = s
        d1[inside] = np.where(live, s1, 0.0)
        d2[inside] = np.where(live, s2, 0.0)
    return v, d1, d2


# --- plateau family ----------------------------------------------------------------------


class Plateau:
    """Even cutoff equal to 1 on [0, c], 1 - d exp(-1/(t - c)) on (c, 3c/2], 0 beyond 2c.

    d = exp(2/c)/2 so the value at 3c/2 is 1/2.  On (3c/2, 2c] the pinned
    formula is blended into a decaying smooth step: with t0 = 3c/2, t2 = 2c,
    t1 midway between t0 and min(2c, zero of the formula), the value is
    f (1 - S) + g S with S a smooth step from t0 to t1 and g = f(t1) times a
    smooth step down from t0 to t2.  All derivatives match at t0 and 2c, and
    the blend is strictly decreasing.
    """

    def __init__(self, c: float):
        if not c > 0:
            raise ValueError("plateau width must be positive")
        self.c = float(c)
        self.log_d = 2.0 / c - math.log(2.0)
        self.t0 = 1.5 * c
        self.t2 = 2.0 * c
        tz = c + 1.0 / self.log_d if self.log_d > 0 else self.t2
        self.t1 = self.t0 + 0.5 * (min(tz, self.t2) - self.t0)
        self.c1 = float(1.0 - math.exp(self.log_d - 1.0 / (self.t1 - c)))
        self._table = None

    @property
    def d(self) -> float:
        return math.exp(self.log_d) if self.log_d < 700 else math.inf

    def _formula(self, t):
        x = t - self.c
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            E = np.exp(self.log_d - 1.0 / x)
            f1 = -E / x**2
            f2 = -E * (1.0 - 2.0 * x) / x**4
        return 1.0 - E, f1, f2, E

    def evaluate(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(value, first derivative, second derivative, 1 - value) at t."""
        t = np.asarray(t, dtype=float)
        at = np.abs(t)
        sgn = np.where(t < 0, -1.0, 1.0)
        v = np.zeros_like(at)
        d1 = np.zeros_like(at)
        d2 = np.zeros_like(at)
        om = np.ones_like(at)
        flat = at <= self.c
        v[flat] = 1.0
        om[flat] = 0.0
        mid = (at > self.c) & (at <= self.t0)
        if np.any(mid):
            f, f1, f2, E = self._formula(at[mid])
            v[mid], d1[mid], d2[mid], om[mid] = f, f1, f2, E
        br = (at > self.t0) & (at < self.t2)
        if np.any(br):
            tb = at[br]
            L1 = self.t1 - self.t0
            L2 = self.t2 - self.t0
            S, S1, S2 = smooth_step((tb - self.t0) / L1)
            S1, S2 = S1 / L1, S2 / L1**2
            G, G1, G2 = smooth_step((tb - self.t0) / L2)
            G, G1, G2 = self.c1 * (1.0 - G), -self.c1 * G1 / L2, -self.c1 * G2 / L2**2
            tf = np.minimum(tb, self.t1)
            f, f1, f2, E = self._formula(tf)
            w = S < 1.0
            f = np.where(w, f, 0.0)
            f1 = np.where(w, f1, 0.0)
            f2 = np.where(w, f2, 0.0)
            vb = f + (G - f) * S
            v[br] = vb
            d1[br] = f1 + (G1 - f1) * S + (G - f) * S1
            d2[br] = f2 + (G2 - f2) * S + 2.0 * (G1 - f1) * S1 + (G - f) * S2
            om[br] = np.where(w, E + (f - G) * S, 1.0 - G)
        return v, sgn * d1, d2, om

    def __call__(self, t):
        return self.evaluate(t)[0]

    # antiderivative -----------------------------------------------------------------

    def _build_table(self):
        c, t0, t1, t2 = self.c, self.t0, self.t1, self.t2
        # resolve the exp(-1/(t-c)) layer uniformly in 1/(t-c)
        tau_hi = max(2.0 / c + 400.0, 1.0 / (0.02 * c))
        taus = np.arange(2.0 / c, tau_hi, 0.25)
        layer = np.sort(c + 1.0 / taus)
        pts = np.concatenate(
            [[c], np.linspace(c, layer[0], 50), layer, np.linspace(t0, t1, 400), np.linspace(t1, t2, 400)]
        )
        pts = np.unique(pts)
        a, b = pts[:-1], pts[1:]
        half = 0.5 * (b - a)
        nodes = 0.5 * (a + b)[:, None] + half[:, None] * _GL_X[None, :]
        vals = self.evaluate(nodes)[0]
        seg = (vals * _GL_W[None, :]).sum(axis=1) * half
        self._table = (pts, np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def total_integral(self) -> float:
        """int_0^inf of the cutoff."""
        if self._table is None:
            self._build_table()
        return self.c + float(self._table[1][-1])

    def integral(self, t) -> np.ndarray:
        """Odd antiderivative vanishing at 0."""
        if self._table is None:
            self._build_table()
        pts, cum = self._table
        t = np.asarray(t, dtype=float)
        shape = t.shape
        t = t.reshape(-1)
        at = np.abs(t)
        out = np.minimum(at, self.c)
        mid = (at > self.c) & (at < self.t2)
        if np.any(mid):
            tm = at[mid]
            k = np.clip(np.searchsorted(pts, tm, side="right") - 1, 0, len(pts) - 2)
            a = pts[k]
            half = 0.5 * (tm - a)
            nodes = 0.5 * (a + tm)[:, None] + half[:, None] * _GL_X[None, :]
            part = (self.evaluate(nodes)[0] * _GL_W[None, :]).sum(axis=1) * half
            out[mid] = self.c + cum[k] + part
        out = np.where(at >= self.t2, self.total_integral, out)
        return (np.sign(t) * out).reshape(shape)


@lru_cache(maxsize=32)
def plateau(c: float) -> Plateau:
    return Plateau(c)


def cutoff_theta1(t) -> np.ndarray:
    return plateau(1.0)(t)


def cutoff_a(eps: float, t) -> np.ndarray:
    return plateau(float(eps))(t)


def cutoff_A(eps: float, t) -> np.ndarray:
    return plateau(float(eps)).integral(t)


def zeta_parts(eps: float, t):
    """Plateau zeta_eps: 1 on |t| <= 1/(2 eps), 0 on |t| >= 1/eps, |zeta'| <= 4 eps.

    Returns (value, first derivative, second derivative, 1 - value).
    """
    t = np.asarray(t, dtype=float)
    y = 2.0 * eps * np.abs(t) - 1.0
    s, s1, s2 = smooth_step(y)
    sgn = np.where(t < 0, -1.0, 1.0)
    return 1.0 - s, -2.0 * eps * sgn * s1, -4.0 * eps * eps * s2, s


def cutoff_zeta(eps: float, t) -> np.ndarray:
    return zeta_parts(eps, t)[0]


def d_eps(eps: float) -> float:
    """The constant making a_eps(3 eps / 2) = 1/2."""
    return math.exp(2.0 / eps) / 2.0


# --- radial family -----------------------------------------------------------------------


@dataclass(frozen=True)
class RadialParams:
    m: int = 2
    T: float = 1.0
    b: float = 1.0
    H: float = 0.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise ValueError("m must be an integer >= 2")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def charge(self) -> float:
        """Weight of the point charge at the origin."""
        return self.b * sphere_area(self.m)


def radial_integrand(p: RadialParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    num = p.b - p.H * t**p.m / p.m
    den = np.sqrt(t ** (2 * p.m - 2) + num * num)
    return np.divide(num, den, out=np.zeros_like(t), where=den > 0)


def radial_value(p: RadialParams, r) -> np.ndarray | float:
    """u_b(r) by adaptive quadrature (absolute tolerance 1e-12)."""
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0) or np.any(arr > p.T * (1 + 1e-12)):
        raise ValueError("radius outside [0, T]")
    f = lambda t: float(radial_integrand(p, t))  # noqa: E731
    out = np.array([quad(f, min(x, p.T), p.T, epsabs=1e-13, epsrel=1e-13, limit=200)[0] for x in arr.ravel()])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def radial_values(p: RadialParams, r) -> np.ndarray:
    """Vectorized u_b at many radii: 20-point Gauss between consecutive sorted radii."""
    r = np.asarray(r, dtype=float)
    flat = np.clip(r.ravel(), 0.0, p.T)
    uniq, inv = np.unique(flat, return_inverse=True)
    pts = np.unique(np.concatenate([uniq, [p.T], np.linspace(0.0, p.T, 41)]))
    a, b = pts[:-1], pts[1:]
    half = 0.5 * (b - a)
    nodes = 0.5 * (a + b)[:, None] + half[:, None] * _GL_X[None, :]
    seg = (radial_integrand(p, nodes) * _GL_W[None, :]).sum(axis=1) * half
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    vals = tail[np.searchsorted(pts, uniq)]
    return vals[inv].reshape(r.shape)


def _radius(grid: Grid) -> np.ndarray:
    return np.linalg.norm(grid.coords(), axis=-1)


def radial_field(p: RadialParams, grid: Grid) -> ScalarField:
    """u_b sampled at active nodes; nodes with |x| > T are set to 0."""
    r = _radius(grid)
    vals = np.where(grid.active & (r <= p.T), radial_values(p, np.minimum(r, p.T)), 0.0)
    return ScalarField(grid, vals)


def truncated_radial(p: RadialParams, r_cut: float, grid: Grid) -> ScalarField:
    """u_b outside B_{r_cut} and the constant u_b(r_cut) inside (min{u, s} for b >= 0)."""
    if not 0.0 < r_cut < p.T:
        raise ValueError("r_cut must lie in (0, T)")
    s = float(radial_values(p, np.array([r_cut]))[0])
    r = _radius(grid)
    base = radial_field(p, grid).values
    vals = np.where(grid.active & (r < r_cut), s, base)
    return ScalarField(grid, vals)


# --- light-segment family -------------------------------------------------------------------


@dataclass(frozen=True)
class CounterexampleParams:
    m: int = 4
    ell: int = 1
    kappa: float = 1.0
    eps: float = 0.05

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 3:
            raise ValueError("m must be an integer >= 3")
        if int(self.ell) != self.ell or not 1 <= self.ell <= self.m - 2:
            raise ValueError("ell must be an integer in [1, m-2]")
        if not self.kappa >= 1:
            raise ValueError("kappa must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def d_eps(self) -> float:
        return d_eps(self.eps)

    @property
    def smooth(self) -> bool:
        """C-infinity for integer kappa; otherwise only C^2."""
        return float(self.kappa).is_integer()

    @property
    def threshold(self) -> float:
        """Integrability exponent (m - ell)/kappa."""
        return (self.m - self.ell) / self.kappa

    @property
    def claims_apply(self) -> bool:
        return self.kappa < self.m - self.ell

    @property
    def ny(self) -> int:
        return self.m - self.ell

    @property
    def nz(self) -> int:
        return self.ell - 1


@dataclass
class Profile:
    """Derivatives of U in the reduced variables (r, s, t); ``ur_r`` is u_r / r."""

    u: np.ndarray
    ur: np.ndarray
    us: np.ndarray
    um: np.ndarray
    urr: np.ndarray
    ur_r: np.ndarray
    uss: np.ndarray
    us_s: np.ndarray
    umm: np.ndarray
    urs: np.ndarray
    urm: np.ndarray
    usm: np.ndarray
    gap: np.ndarray  # 1 - |DU|^2, accurate near the light set


def profile(p: CounterexampleParams, r, s, t) -> Profile:
    r, s, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (r, s, t)))
    eps, k = p.eps, float(p.kappa)
    e = eps ** (2 * k)
    zr, zr1, zr2, omzr = zeta_parts(eps, r)
    rk = r ** (2 * k)
    with np.errstate(divide="ignore", invalid="ignore"):
        rk1 = r ** (2 * k - 1)
        rk2 = np.where(r > 0, r ** (2 * k - 2), 1.0 if k == 1 else 0.0)
        zr1_r = np.where(zr1 != 0, zr1 / np.where(r > 0, r, 1.0), 0.0)
    ome = 1.0 - e * rk
    P = ome * zr
    P1 = -2 * k * e * rk1 * zr + ome * zr1
    P1_r = -2 * k * e * rk2 * zr + ome * zr1_r
    P2 = -2 * k * (2 * k - 1) * e * rk2 * zr - 4 * k * e * rk1 * zr1 + ome * zr2

    if p.nz > 0:
        th, th1, th2, omth = plateau(1.0).evaluate(eps * s)
        T0, T1, T2 = th, eps * th1, eps * eps * th2
        with np.errstate(divide="ignore", invalid="ignore"):
            T1_s = np.where(T1 != 0, T1 / np.where(s > 0, s, 1.0), 0.0)
    else:
        T0, T1, T2, T1_s = np.ones_like(s), np.zeros_like(s), np.zeros_like(s), np.zeros_like(s)
        omth = np.zeros_like(s)

    zt, zt1, zt2, omzt = zeta_parts(eps, t)
    pl = plateau(float(eps))
    a, a1, _, oma = pl.evaluate(t)
    A = pl.integral(t)
    Q = zt * A
    Q1 = zt1 * A + zt * a
    Q2 = zt2 * A + 2 * zt1 * a + zt * a1

    u = P * T0 * Q
    ur = P1 * T0 * Q
    us = P * T1 * Q
    um = P * T0 * Q1
    prof = Profile(
        u=u,
        ur=ur,
        us=us,
        um=um,
        urr=P2 * T0 * Q,
        ur_r=P1_r * T0 * Q,
        uss=P * T2 * Q,
        us_s=P * T1_s * Q,
        umm=P * T0 * Q2,
        urs=P1 * T1 * Q,
        urm=P1 * T0 * Q1,
        usm=P * T1 * Q1,
        gap=np.zeros_like(u),
    )
    # 1 - um = (1 - X) + e r^2k X with X = zeta(r) Theta zeta(t) a + zeta(r) Theta zeta'(t) A
    one_minus_core = omzr + zr * (omth + T0 * (omzt + zt * oma))
    X = zr * T0 * Q1
    one_minus_um = one_minus_core - zr * T0 * zt1 * A + e * rk * X
    prof.gap = one_minus_um * (1.0 + um) - ur * ur - us * us
    return prof


def _split(p: CounterexampleParams, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.m:
        raise ValueError(f"points must have {p.m} coordinates")
    y = x[..., : p.ny]
    z = x[..., p.ny : p.m - 1]
    t = x[..., -1]
    r = np.linalg.norm(y, axis=-1)
    s = np.linalg.norm(z, axis=-1) if p.nz > 0 else np.zeros_like(r)
    return y, z, t, r, s


def _unit(v, n):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n[..., None] > 0, v / np.where(n > 0, n, 1.0)[..., None], 0.0)


def counterexample_value(p: CounterexampleParams, x) -> np.ndarray:
    _, _, t, r, s = _split(p, x)
    return profile(p, r, s, t).u


def counterexample_gradient(p: CounterexampleParams, x) -> np.ndarray:
    y, z, t, r, s = _split(p, x)
    pr = profile(p, r, s, t)
    out = np.zeros(np.shape(x))
    out[..., : p.ny] = pr.ur[..., None] * _unit(y, r)
    if p.nz:
        out[..., p.ny : p.m - 1] = pr.us[..., None] * _unit(z, s)
    out[..., -1] = pr.um
    return out


def counterexample_hessian(p: CounterexampleParams, x) -> np.ndarray:
    """Full m x m Hessian; at r = 0 or s = 0 the radial blocks take their isotropic limits."""
    y, z, t, r, s = _split(p, x)
    pr = profile(p, r, s, t)
    yh = _unit(y, r)
    zh = _unit(z, s)
    m, ny = p.m, p.ny
    H = np.zeros(np.shape(x) + (m,))
    yy = np.einsum("...i,...j->...ij", yh, yh)
    Iy = np.eye(ny)
    # off the axis: u_rr yy^T + (u_r/r)(I - yy^T); on it, yy = 0 leaves (u_r/r) I = u_rr I
    H[..., :ny, :ny] = pr.urr[..., None, None] * yy + pr.ur_r[..., None, None] * (Iy - yy)
    H[..., :ny, -1] = pr.urm[..., None] * yh
    H[..., -1, :ny] = pr.urm[..., None] * yh
    if p.nz:
        zs = slice(ny, m - 1)
        zz = np.einsum("...i,...j->...ij", zh, zh)
        Iz = np.eye(p.nz)
        H[..., zs, zs] = pr.uss[..., None, None] * zz + pr.us_s[..., None, None] * (Iz - zz)
        yz = np.einsum("...i,...j->...ij", yh, zh)
        H[..., :ny, zs] = pr.urs[..., None, None] * yz
        H[..., zs, :ny] = np.swapaxes(pr.urs[..., None, None] * yz, -1, -2)
        H[..., zs, -1] = pr.usm[..., None] * zh
        H[..., -1, zs] = pr.usm[..., None] * zh
    H[..., -1, -1] = pr.umm
    return H


@dataclass
class Geometry:
    """Pointwise W, rho, ||II|| and their ingredients from a profile."""

    W: np.ndarray
    rho: np.ndarray
    sff: np.ndarray
    lap: np.ndarray
    hess2: np.ndarray
    hDu2: np.ndarray
    hDuDu: np.ndarray
    light: np.ndarray


def geometry(p: CounterexampleParams, pr: Profile, gap_tol: float = 1e-12) -> Geometry:
    ny, nz = p.ny, p.nz
    if np.any(pr.gap < -gap_tol):
        worst = float(np.sqrt(1.0 - pr.gap.min()))
        raise ConstructionError(f"|DU| reaches {worst:.6g} > 1; eps={p.eps} is too large")
    gap = np.maximum(pr.gap, 0.0)
    light = gap <= 0.0
    with np.errstate(divide="ignore"):
        W = np.where(light, np.inf, 1.0 / np.sqrt(np.where(light, 1.0, gap)))
    lap = pr.urr + (ny - 1) * pr.ur_r + pr.umm
    hess2 = pr.urr**2 + (ny - 1) * pr.ur_r**2 + pr.umm**2 + 2 * pr.urm**2
    cy = pr.urr * pr.ur + pr.urs * pr.us + pr.urm * pr.um
    cz = pr.urs * pr.ur + pr.uss * pr.us + pr.usm * pr.um
    cm = pr.urm * pr.ur + pr.usm * pr.us + pr.umm * pr.um
    if nz > 0:
        lap = lap + pr.uss + (nz - 1) * pr.us_s
        hess2 = hess2 + pr.uss**2 + (nz - 1) * pr.us_s**2 + 2 * pr.urs**2 + 2 * pr.usm**2
    hDu2 = cy**2 + cz**2 + cm**2
    hDuDu = cy * pr.ur + cz * pr.us + cm * pr.um
    with np.errstate(invalid="ignore", over="ignore"):
        rho = np.where(light, np.nan, -(W * lap + W**3 * hDuDu))
        sff = np.where(light, np.inf, np.sqrt(W**2 * hess2 + 2 * W**4 * hDu2 + W**6 * hDuDu**2))
    return Geometry(W, rho, sff, lap, hess2, hDu2, hDuDu, light)


def counterexample_geometry(p: CounterexampleParams, x) -> Geometry:
    _, _, t, r, s = _split(p, x)
    return geometry(p, profile(p, r, s, t))


def counterexample_energy_density(p: CounterexampleParams, x) -> np.ndarray:
    """W = (1 - |DU|^2)^(-1/2); +inf on the light set."""
    return counterexample_geometry(p, x).W


def counterexample_source(p: CounterexampleParams, x) -> np.ndarray:
    """rho = -(W lap U + W^3 D^2U(DU, DU)); NaN on the light set."""
    return counterexample_geometry(p, x).rho


def counterexample_sff_norm(p: CounterexampleParams, x) -> np.ndarray:
    return counterexample_geometry(p, x).sff


def feasibility_scan(p: CounterexampleParams, n: int = 2**20, seed: int = 0) -> float:
    """Max |DU| over quasi-random points of the support; raises if it exceeds 1."""
    from scipy.stats import qmc

    eps = p.eps
    # reduced coordinates suffice: U depends on x only through (r, s, x_m)
    d = 3 if p.nz else 2
    pts = qmc.Sobol(d, seed=seed).random(n)
    r = pts[:, 0] / eps
    t = (2 * pts[:, -1] - 1) / eps
    s = pts[:, 1] * 2 / eps if p.nz else np.zeros(n)
    # also oversample the light-segment neighbourhood
    r = np.concatenate([r, pts[:, 0] * 4 * eps])
    t = np.concatenate([t, (2 * pts[:, -1] - 1) * 2.5 * eps])
    s = np.concatenate([s, s])
    pr = profile(p, r, s, t)
    gmin = float(pr.gap.min())
    if gmin < -1e-12:
        raise ConstructionError(f"|DU| reaches {math.sqrt(1 - gmin):.6g} > 1; eps={p.eps} is too large")
    return math.sqrt(max(0.0, 1.0 - gmin))


def light_set_distance(p: CounterexampleParams, x) -> np.ndarray:
    """Euclidean distance to {y = 0, |z| <= 1/eps, |x_m| <= eps}."""
    _, _, t, r, s = _split(p, x)
    ds = np.maximum(s - 1.0 / p.eps, 0.0)
    dt = np.maximum(np.abs(t) - p.eps, 0.0)
    return np.sqrt(r * r + ds * ds + dt * dt)


# --- integrability probe -------------------------------------------------------------------


def _gauss_panels(edges: np.ndarray, order: int = 8):
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    weights = half[:, None] * w[None, :]
    return nodes.ravel(), weights.ravel()


def t_panels(eps: float, fine: int = 1) -> np.ndarray:
    """Panel edges on [0, 1/eps] resolving the steep layers of a_eps and zeta_eps."""
    pl = plateau(float(eps))
    tau = np.arange(2.0 / eps, 2.0 / eps + 200.0, 0.5 / fine)
    layer = eps + 1.0 / tau
    parts = [
        np.linspace(0.0, eps, 8 * fine + 1),
        np.linspace(eps, layer[-1], 4 * fine + 1),
        layer,
        np.linspace(pl.t0, pl.t1, 40 * fine + 1),
        np.linspace(pl.t1, pl.t2, 40 * fine + 1),
        np.linspace(pl.t2, 0.5 / eps, 40 * fine + 1),
        np.linspace(0.5 / eps, 1.0 / eps, 40 * fine + 1),
    ]
    return np.unique(np.concatenate(parts))


def r_panels(eps: float, r_min: float, per_decade: int = 6) -> np.ndarray:
    """Geometric panels from r_min to 1, then uniform out to the support radius 1/eps."""
    n = max(2, int(math.ceil(per_decade * math.log10(1.0 / r_min))) + 1)
    inner = np.geomspace(r_min, 1.0, n)
    outer = np.linspace(1.0, 0.5 / eps, 60)
    edge = np.linspace(0.5 / eps, 1.0 / eps, 40)
    return np.unique(np.concatenate([inner, outer, edge]))


@dataclass
class ProbeResult:
    q: float
    r_min: list[float]
    estimates: dict[str, list[float]]

    def ratios(self, name: str) -> list[float]:
        v = self.estimates[name]
        return [b / a if a > 0 else math.inf for a, b in zip(v, v[1:])]

    def relative_changes(self, name: str) -> list[float]:
        v = self.estimates[name]
        return [abs(b - a) / abs(b) if b else math.inf for a, b in zip(v, v[1:])]

    def to_rows(self) -> list[tuple]:
        rows = []
        for name, vals in self.estimates.items():
            for k, v in enumerate(vals):
                rows.append((k, self.q, name, self.r_min[k], v))
        return rows


def integrability_probe(
    p: CounterexampleParams,
    q: float,
    levels: int = 4,
    r_min0: float = 1e-2,
    shrink: float = 10.0,
    quantities=("rho", "sff", "W"),
    per_decade: int = 6,
) -> ProbeResult:
    """Estimates of int W^q, |rho|^q, ||II||^q excluding {|y| < r_min}, for shrinking r_min.

    U depends on (r, s, x_m) only, so the integrals reduce to 2D (l = 1) or 3D
    tensor Gauss quadrature with the spherical weights |S^{n-1}| r^{n-1}.
    The domain is the cylinder {|y| <= 1/eps, |z| <= 2/eps, |x_m| <= 1/eps}.
    Exclusion radii are nested: each level adds the shell r_min_k <= r < r_min_{k-1}
    to the previous estimate. Convergent integrals stabilize; divergent ones grow
    by a roughly constant factor per level.
    """
    if not q > 0:
        raise ValueError("q must be positive")
    if levels < 3:
        raise ValueError("at least three refinement levels are needed")
    if not shrink > 1:
        raise ValueError("shrink must exceed 1")
    eps = p.eps
    tn, tw = _gauss_panels(t_panels(eps))
    tw = 2.0 * tw  # even in x_m
    if p.nz:
        sn, sw = _gauss_panels(np.unique(np.concatenate([np.linspace(0, 1 / eps, 9), np.linspace(1 / eps, 2 / eps, 33)])))
        sw = sw * sphere_area(p.nz) * sn ** (p.nz - 1) if p.nz > 1 else 2.0 * sw
    else:
        sn, sw = np.zeros(1), np.ones(1)
    chunk = max(1, 2**18 // (sn.size * tn.size))

    def integrate(edges):
        rn, rw = _gauss_panels(edges)
        rw = rw * sphere_area(p.ny) * rn ** (p.ny - 1)
        sums = dict.fromkeys(quantities, 0.0)
        for i0 in range(0, rn.size, chunk):
            R3, S3, T3 = np.meshgrid(rn[i0 : i0 + chunk], sn, tn, indexing="ij")
            wt = rw[i0 : i0 + chunk, None, None] * sw[None, :, None] * tw[None, None, :]
            g = geometry(p, profile(p, R3, S3, T3))
            vals = {"W": g.W, "rho": np.abs(g.rho), "sff": g.sff}
            for k in quantities:
                f = vals[k]
                with np.errstate(divide="ignore"):
                    sums[k] += float(np.sum(np.where(f > 0, wt * f**q, 0.0)))
        return sums

    rmins = [r_min0 / shrink**lev for lev in range(levels)]
    running = integrate(r_panels(eps, r_min0, per_decade))
    est = {k: [running[k]] for k in quantities}
    per_level = max(1, int(math.ceil(per_decade * math.log10(shrink))))
    for lo, hi in zip(rmins[1:], rmins):
        shell = integrate(np.geomspace(lo, hi, per_level + 1))
        for k in quantities:
            running[k] += shell[k]
            est[k].append(running[k])
    return ProbeResult(float(q), rmins, est)


# ---------------------------------------------------------------------------
# weak form


@dataclass(frozen=True)
class SeparableBump:
    """eta(x) = prod_i (1 - ((x_i - c_i)/a_i)^2)^k on the box |x_i - c_i| < a_i."""

    center: tuple[float, ...]
    radius: tuple[float, ...]
    power: int = 4

    def axis(self, i: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = self.radius[i]
        s = (np.asarray(x, dtype=float) - self.center[i]) / a
        inside = np.abs(s) < 1.0
        base = np.where(inside, 1.0 - s * s, 0.0)
        k = self.power
        return base**k, np.where(inside, -2.0 * k * s * base ** (k - 1) / a, 0.0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.prod([self.axis(i, x[..., i])[0] for i in range(x.shape[-1])], axis=0)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = x.shape[-1]
        vals = [self.axis(i, x[..., i]) for i in range(m)]
        out = np.empty(x.shape)
        for i in range(m):
            out[..., i] = np.prod([vals[j][1] if j == i else vals[j][0] for j in range(m)], axis=0)
        return out


def random_bumps(p: CounterexampleParams, count: int = 20, seed: int = 0) -> list[SeparableBump]:
    """Test functions whose supports straddle the light segment."""
    rng = np.random.default_rng(seed)
    eps = p.eps
    out = []
    for _ in range(count):
        c = np.concatenate([rng.uniform(-eps, eps, p.m - 1), rng.uniform(-1.5 * eps, 1.5 * eps, 1)])
        a = rng.uniform(1.2 * eps, 2.4 * eps, p.m)
        out.append(SeparableBump(tuple(map(float, c)), tuple(map(float, a))))
    return out


@dataclass(frozen=True)
class WeakFormResult:
    level: int
    residuals: np.ndarray
    scales: np.ndarray
    nodes: int


def _sphere_rule(n: int, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on S^{n-1} (n <= 3); weights sum to its area."""
    if n == 1:
        return np.array([[-1.0], [1.0]]), np.ones(2)
    nphi = 12 * 2**level
    phi = 2.0 * np.pi * np.arange(nphi) / nphi
    if n == 2:
        return np.stack([np.cos(phi), np.sin(phi)], -1), np.full(nphi, 2.0 * np.pi / nphi)
    if n == 3:
        ct, wt = _gauss_panels(np.linspace(-1.0, 1.0, 2 * 2**level + 1), order=6)
        st = np.sqrt(1.0 - ct**2)
        pts = np.stack(
            [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(ct, np.ones(nphi))], -1
        ).reshape(-1, 3)
        return pts, np.outer(wt, np.full(nphi, 2.0 * np.pi / nphi)).ravel()
    raise NotImplementedError("spherical rule only for dimensions 1 to 3")


def weak_t_edges(eps: float, lo: float, hi: float, level: int) -> np.ndarray:
    """Panel edges on [lo, hi] resolving the steep part of a_eps at every refinement level."""
    pl = plateau(float(eps))
    k = 2**level
    # 1 - a_eps = exp(log_d - 1/(t - eps)) is smooth in 1/(t - eps) on the range where it matters
    tau = np.linspace(pl.log_d, pl.log_d + 37.0, 9 * k + 1)
    half = np.concatenate(
        [
            [eps, pl.t0, pl.t1, pl.t2],
            eps + 1.0 / tau,
            np.linspace(pl.t0, pl.t1, 2 * k + 1),
            np.linspace(pl.t1, pl.t2, 4 * k + 1),
        ]
    )
    edges = np.concatenate([np.linspace(lo, hi, 4 * k + 1), half, -half])
    edges = edges[(edges >= lo) & (edges <= hi)]
    return np.unique(edges)


def weak_form_residuals(p: CounterexampleParams, bumps: Sequence[SeparableBump], level: int = 0) -> WeakFormResult:
    """int W DU . D eta - int rho eta for each test function, by tensor Gauss quadrature.

    U depends on (|y|, x_m) only, so each integral is the (|y|, x_m) integral
    of W u_r d/dr A + W u_m A_t - rho A, where A is the spherical integral of
    eta over |y| = r. Each ``level`` doubles the panel counts in r, x_m and on
    the sphere. Needs l = 1 and m <= 4.
    """
    if p.nz:
        raise NotImplementedError("weak form quadrature implemented for l = 1")
    if level < 0:
        raise ValueError("level must be nonnegative")
    ny = p.ny
    c = np.array([b.center for b in bumps])
    a = np.array([b.radius for b in bumps])
    rmax = float(np.max(np.linalg.norm(np.abs(c[:, :ny]) + a[:, :ny], axis=1)))
    k = 2**level
    rn, rw = _gauss_panels(rmax * np.concatenate([[0.0], np.geomspace(1e-3, 1.0, 3 * k + 1)]))
    tn, tw = _gauss_panels(weak_t_edges(p.eps, float((c - a)[:, -1].min()), float((c + a)[:, -1].max()), level))
    om, ow = _sphere_rule(ny, level)
    # spherical integrals of eta_y and its r-derivative, per bump and radius
    A = np.zeros((len(bumps), rn.size))
    Ar = np.zeros_like(A)
    for j, b in enumerate(bumps):
        y = rn[:, None, None] * om[None, :, :]
        ax = [b.axis(i, y[..., i]) for i in range(ny)]
        val = np.prod([v for v, _ in ax], axis=0)
        der = sum(om[None, :, i] * ax[i][1] * np.prod([ax[q][0] for q in range(ny) if q != i], axis=0) for i in range(ny))
        A[j] = val @ ow
        Ar[j] = der @ ow
    Bt = np.array([b.axis(ny, tn)[0] for b in bumps])
    dBt = np.array([b.axis(ny, tn)[1] for b in bumps])
    R, T = np.meshgrid(rn, tn, indexing="ij")
    pr = profile(p, R, np.zeros_like(R), T)
    g = geometry(p, pr)
    W = 1.0 / np.sqrt(pr.gap)
    jac = (rw * rn ** (ny - 1))[:, None] * tw[None, :]
    Fr, Ft, rho = jac * W * pr.ur, jac * W * pr.um, jac * g.rho
    res = np.einsum("rt,br,bt->b", Fr, Ar, Bt) + np.einsum("rt,br,bt->b", Ft, A, dBt) - np.einsum("rt,br,bt->b", rho, A, Bt)
    scl = (
        np.einsum("rt,br,bt->b", np.abs(Fr), np.abs(Ar), np.abs(Bt))
        + np.einsum("rt,br,bt->b", np.abs(Ft), np.abs(A), np.abs(dBt))
        + np.einsum("rt,br,bt->b", np.abs(rho), np.abs(A), np.abs(Bt))
    )
    return WeakFormResult(level, res, scl, int(rn.size * tn.size * om.shape[0]))
