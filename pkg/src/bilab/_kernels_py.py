"""Pure-numpy kernels; the reference implementation for the compiled ones."""

from __future__ import annotations

import numpy as np

NAME = "numpy"

W_CAP_GAP = 1e-13


def _avg(a: np.ndarray, axis: int) -> np.ndarray:
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (a[tuple(lo)] + a[tuple(hi)])


def _avg_t(a: np.ndarray, axis: int) -> np.ndarray:
    shape = list(a.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] += 0.5 * a
    out[tuple(hi)] += 0.5 * a
    return out


def gradient(u: np.ndarray, spacing) -> np.ndarray:
    m = u.ndim
    out = np.empty((m,) + tuple(n - 1 for n in u.shape))
    for d in range(m):
        a = np.diff(u, axis=d) / spacing[d]
        for e in range(m):
            if e != d:
                a = _avg(a, e)
        out[d] = a
    return out


def divergence(p: np.ndarray, spacing) -> np.ndarray:
    """``-K^T p`` on the full node lattice (no boundary masking)."""
    m = p.shape[0]
    shape = tuple(n + 1 for n in p.shape[1:])
    out = np.zeros(shape)
    for d in range(m):
        a = p[d]
        for e in range(m):
            if e != d:
                a = _avg_t(a, e)
        # D^T: -a on the lower node, +a on the upper node; div = -K^T p
        lo = [slice(None)] * m
        hi = [slice(None)] * m
        lo[d] = slice(None, -1)
        hi[d] = slice(1, None)
        out[tuple(lo)] += a / spacing[d]
        out[tuple(hi)] -= a / spacing[d]
    return out


def prox_slope(a: np.ndarray, tau, maxit: int = 60) -> np.ndarray:
    """Root t >= 0 of t/sqrt(1+t^2) + tau*t = a.

    With r = t/sqrt(1+t^2) this is the radial prox equation
    r + tau*r/sqrt(1-r^2) = a, and sqrt(1+t^2) is the energy density of the
    result, free of cancellation near |p| = 1.  The left side is concave and
    increasing in t, so Newton from a lower bound increases monotonically to
    the root; a step that fails to increase t marks roundoff convergence.
    """
    a = np.asarray(a, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), a.shape)
    # both bounds t(1+tau) and 1+tau*t of the left side give lower bounds on the root
    t = np.maximum(a / (1.0 + tau), np.where(tau > 0, (a - 1.0) / np.where(tau > 0, tau, 1.0), 0.0))
    t = np.maximum(t, 0.0)
    active = a > 0
    for _ in range(maxit):
        s = np.sqrt(1.0 + t * t)
        k = t / s + tau * t - a
        dk = 1.0 / (s * s * s) + tau
        tn = np.where(active, t - k / dk, t)
        grow = tn > t + 4e-16 * np.maximum(tn, 1.0)
        t = np.where(tn > t, tn, t)
        active = active & grow
        if not active.any():
            break
    return np.maximum(t, 0.0)


def prox_radial(q: np.ndarray, tau) -> np.ndarray:
    """Cellwise prox of tau*f, f(p) = 1 - sqrt(1 - |p|^2); q has shape (m, ...)."""
    a = np.sqrt(np.sum(q * q, axis=0))
    t = prox_slope(a, tau)
    r = t / np.sqrt(1.0 + t * t)
    scale = np.divide(r, a, out=np.zeros_like(a), where=a > 0)
    return q * scale


def dual_prox(v: np.ndarray, sigma: float) -> np.ndarray:
    """prox of sigma*f^* by the Moreau identity."""
    return v - sigma * prox_radial(v / sigma, 1.0 / sigma)


def energy_density(p: np.ndarray, w_max: float) -> np.ndarray:
    s = np.sum(p * p, axis=0)
    gap = 1.0 - s
    w = np.full(s.shape, w_max)
    ok = gap > W_CAP_GAP
    w[ok] = np.minimum(1.0 / np.sqrt(gap[ok]), w_max)
    return w


def lagrangian(p: np.ndarray) -> np.ndarray:
    """1 - sqrt(1 - |p|^2), +inf where |p| > 1."""
    s = np.sum(p * p, axis=0)
    out = np.full(s.shape, np.inf)
    ok = s <= 1.0
    # 1 - sqrt(1-s) = s / (1 + sqrt(1-s)) avoids cancellation for small s
    out[ok] = s[ok] / (1.0 + np.sqrt(1.0 - s[ok]))
    return out
