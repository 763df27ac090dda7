# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: corner-averaged gradient/divergence and the cellwise prox.

Same contracts as ``bilab._kernels_py``; arrays are processed in flat C order
so one code path serves every dimension.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

NAME = "cython"

cdef double W_CAP_GAP = 1e-13


cdef void _corner_tables(tuple shape, double[::1] hs, long[::1] offs, double[:, ::1] coef):
    """offs[k]: flat node offset of corner k; coef[k, d]: weight of corner k in component d."""
    cdef int m = len(shape)
    cdef int k, d
    cdef long stride
    cdef long[::1] strides = np.empty(m, dtype=np.int64)
    stride = 1
    for d in range(m - 1, -1, -1):
        strides[d] = stride
        stride *= shape[d]
    cdef double denom = <double>(1 << (m - 1))
    for k in range(1 << m):
        offs[k] = 0
        for d in range(m):
            if (k >> (m - 1 - d)) & 1:
                offs[k] += strides[d]
        for d in range(m):
            if (k >> (m - 1 - d)) & 1:
                coef[k, d] = 1.0 / (denom * hs[d])
            else:
                coef[k, d] = -1.0 / (denom * hs[d])


def _gradient_nd(u, spacing):
    cdef cnp.ndarray[double, ndim=1, mode="c"] uf = np.ascontiguousarray(u, dtype=np.float64).ravel()
    shape = tuple(u.shape)
    cdef int m = len(shape)
    cshape = tuple(n - 1 for n in shape)
    cdef long ncell = 1
    for n in cshape:
        ncell *= n
    cdef double[::1] hs = np.asarray(spacing, dtype=np.float64)
    cdef long[::1] offs = np.empty(1 << m, dtype=np.int64)
    cdef double[:, ::1] coef = np.empty((1 << m, m), dtype=np.float64)
    _corner_tables(shape, hs, offs, coef)
    out = np.zeros((m, ncell), dtype=np.float64)
    cdef double[:, ::1] po = out
    cdef double[::1] uv = uf
    cdef long[::1] idx = np.zeros(m, dtype=np.int64)
    cdef long[::1] nshape = np.asarray(shape, dtype=np.int64)
    cdef long[::1] ncs = np.asarray(cshape, dtype=np.int64)
    cdef long c, base, s
    cdef int k, d, a
    cdef double val
    cdef int nk = 1 << m
    for c in range(ncell):
        base = 0
        s = 1
        for a in range(m - 1, -1, -1):
            base += idx[a] * s
            s *= nshape[a]
        for k in range(nk):
            val = uv[base + offs[k]]
            for d in range(m):
                po[d, c] += coef[k, d] * val
        a = m - 1
        while a >= 0:
            idx[a] += 1
            if idx[a] < ncs[a]:
                break
            idx[a] = 0
            a -= 1
    return out.reshape((m,) + cshape)


def _divergence_nd(p, spacing):
    cdef int m = p.shape[0]
    cshape = tuple(p.shape[1:])
    shape = tuple(n + 1 for n in cshape)
    cdef long ncell = 1
    for n in cshape:
        ncell *= n
    cdef cnp.ndarray[double, ndim=2, mode="c"] pf = np.ascontiguousarray(p, dtype=np.float64).reshape(m, ncell)
    cdef double[:, ::1] pv = pf
    cdef double[::1] hs = np.asarray(spacing, dtype=np.float64)
    cdef long[::1] offs = np.empty(1 << m, dtype=np.int64)
    cdef double[:, ::1] coef = np.empty((1 << m, m), dtype=np.float64)
    _corner_tables(shape, hs, offs, coef)
    cdef long nnode = 1
    for n in shape:
        nnode *= n
    out = np.zeros(nnode, dtype=np.float64)
    cdef double[::1] ov = out
    cdef long[::1] idx = np.zeros(m, dtype=np.int64)
    cdef long[::1] nshape = np.asarray(shape, dtype=np.int64)
    cdef long[::1] ncs = np.asarray(cshape, dtype=np.int64)
    cdef long c, base, s
    cdef int k, d, a
    cdef double acc
    cdef int nk = 1 << m
    for c in range(ncell):
        base = 0
        s = 1
        for a in range(m - 1, -1, -1):
            base += idx[a] * s
            s *= nshape[a]
        for k in range(nk):
            acc = 0.0
            for d in range(m):
                acc += coef[k, d] * pv[d, c]
            ov[base + offs[k]] -= acc
        a = m - 1
        while a >= 0:
            idx[a] += 1
            if idx[a] < ncs[a]:
                break
            idx[a] = 0
            a -= 1
    return out.reshape(shape)


cdef _grad2(double[:, ::1] u, double h0, double h1):
    cdef Py_ssize_t n0 = u.shape[0] - 1, n1 = u.shape[1] - 1, i, j
    out = np.empty((2, n0, n1), dtype=np.float64)
    cdef double[:, :, ::1] p = out
    cdef double c0 = 0.5 / h0, c1 = 0.5 / h1, a, b, c, d
    with nogil:
        for i in range(n0):
            for j in range(n1):
                a = u[i, j]
                b = u[i, j + 1]
                c = u[i + 1, j]
                d = u[i + 1, j + 1]
                p[0, i, j] = (c + d - a - b) * c0
                p[1, i, j] = (b + d - a - c) * c1
    return out


cdef _div2(double[:, :, ::1] p, double h0, double h1):
    cdef Py_ssize_t n0 = p.shape[1], n1 = p.shape[2], i, j
    out = np.zeros((n0 + 1, n1 + 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double c0 = 0.5 / h0, c1 = 0.5 / h1, x, y
    with nogil:
        for i in range(n0):
            for j in range(n1):
                x = p[0, i, j] * c0
                y = p[1, i, j] * c1
                o[i, j] += x + y
                o[i, j + 1] += x - y
                o[i + 1, j] += y - x
                o[i + 1, j + 1] -= x + y
    return out


cdef _grad3(double[:, :, ::1] u, double h0, double h1, double h2):
    cdef Py_ssize_t n0 = u.shape[0] - 1, n1 = u.shape[1] - 1, n2 = u.shape[2] - 1, i, j, k
    out = np.empty((3, n0, n1, n2), dtype=np.float64)
    cdef double[:, :, :, ::1] p = out
    cdef double c0 = 0.25 / h0, c1 = 0.25 / h1, c2 = 0.25 / h2
    cdef double u000, u001, u010, u011, u100, u101, u110, u111
    with nogil:
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    u000 = u[i, j, k]
                    u001 = u[i, j, k + 1]
                    u010 = u[i, j + 1, k]
                    u011 = u[i, j + 1, k + 1]
                    u100 = u[i + 1, j, k]
                    u101 = u[i + 1, j, k + 1]
                    u110 = u[i + 1, j + 1, k]
                    u111 = u[i + 1, j + 1, k + 1]
                    p[0, i, j, k] = (u100 + u101 + u110 + u111 - u000 - u001 - u010 - u011) * c0
                    p[1, i, j, k] = (u010 + u011 + u110 + u111 - u000 - u001 - u100 - u101) * c1
                    p[2, i, j, k] = (u001 + u011 + u101 + u111 - u000 - u010 - u100 - u110) * c2
    return out


cdef _div3(double[:, :, :, ::1] p, double h0, double h1, double h2):
    cdef Py_ssize_t n0 = p.shape[1], n1 = p.shape[2], n2 = p.shape[3], i, j, k
    out = np.zeros((n0 + 1, n1 + 1, n2 + 1), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double c0 = 0.25 / h0, c1 = 0.25 / h1, c2 = 0.25 / h2, x, y, z
    with nogil:
        for i in range(n0):
            for j in range(n1):
                for k in range(n2):
                    x = p[0, i, j, k] * c0
                    y = p[1, i, j, k] * c1
                    z = p[2, i, j, k] * c2
                    o[i, j, k] += x + y + z
                    o[i, j, k + 1] += x + y - z
                    o[i, j + 1, k] += x - y + z
                    o[i, j + 1, k + 1] += x - y - z
                    o[i + 1, j, k] += -x + y + z
                    o[i + 1, j, k + 1] += -x + y - z
                    o[i + 1, j + 1, k] += -x - y + z
                    o[i + 1, j + 1, k + 1] -= x + y + z
    return out


def gradient(u, spacing):
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.ndim == 2:
        return _grad2(u, spacing[0], spacing[1])
    if u.ndim == 3:
        return _grad3(u, spacing[0], spacing[1], spacing[2])
    return _gradient_nd(u, spacing)


def divergence(p, spacing):
    p = np.ascontiguousarray(p, dtype=np.float64)
    if p.shape[0] == 2:
        return _div2(p, spacing[0], spacing[1])
    if p.shape[0] == 3:
        return _div3(p, spacing[0], spacing[1], spacing[2])
    return _divergence_nd(p, spacing)



cdef double _prox_slope(double a, double tau) nogil:
    """Root t >= 0 of t/sqrt(1+t^2) + tau*t = a by monotone Newton.

    The left side is concave and increasing and bounded by both (1+tau)*t and
    1 + tau*t, so the larger of the two matching lower bounds is a safe start.
    Iterates increase in exact arithmetic; a non-increase marks roundoff.
    """
    cdef double t, tn, s, k, dk
    cdef int it
    if a <= 0.0:
        return 0.0
    t = a / (1.0 + tau)
    if tau > 0.0 and (a - 1.0) / tau > t:
        t = (a - 1.0) / tau
    for it in range(60):
        s = sqrt(1.0 + t * t)
        k = t / s + tau * t - a
        dk = 1.0 / (s * s * s) + tau
        tn = t - k / dk
        if tn <= t or tn - t <= 4e-16 * (tn if tn > 1.0 else 1.0):
            return tn if tn > t else t
        t = tn
    return t


def prox_slope(a, tau):
    af = np.ascontiguousarray(a, dtype=np.float64).ravel()
    tf = np.ascontiguousarray(np.broadcast_to(tau, np.shape(a)), dtype=np.float64).ravel()
    out = np.empty(af.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef const double[::1] av = af
    cdef const double[::1] tv = tf
    cdef long i
    with nogil:
        for i in range(av.shape[0]):
            ov[i] = _prox_slope(av[i], tv[i])
    return out.reshape(np.shape(a))


def prox_radial(q, tau):
    cdef int m = q.shape[0]
    rest = tuple(q.shape[1:])
    cdef long n = 1
    for k in rest:
        n *= k
    qf = np.ascontiguousarray(q, dtype=np.float64).reshape(m, n)
    out = np.empty((m, n), dtype=np.float64)
    cdef const double[:, ::1] qv = qf
    cdef double[:, ::1] ov = out
    cdef const double[::1] tv
    cdef bint scalar = np.ndim(tau) == 0
    cdef double t0 = float(tau) if scalar else 0.0
    if not scalar:
        tv = np.ascontiguousarray(np.broadcast_to(tau, rest), dtype=np.float64).ravel()
    cdef long i
    cdef int d
    cdef double a, r, tt
    with nogil:
        for i in range(n):
            a = 0.0
            for d in range(m):
                a += qv[d, i] * qv[d, i]
            a = sqrt(a)
            if a == 0.0:
                for d in range(m):
                    ov[d, i] = 0.0
                continue
            tt = t0 if scalar else tv[i]
            r = _prox_slope(a, tt)
            r = r / sqrt(1.0 + r * r) / a
            for d in range(m):
                ov[d, i] = qv[d, i] * r
    return out.reshape(q.shape)


def dual_prox(v, double sigma):
    """prox of sigma*f^*: v - sigma*prox_{f/sigma}(v/sigma), fused."""
    cdef int m = v.shape[0]
    rest = tuple(v.shape[1:])
    cdef long n = 1
    for k in rest:
        n *= k
    cdef cnp.ndarray[double, ndim=2, mode="c"] vf = np.ascontiguousarray(v, dtype=np.float64).reshape(m, n)
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] vv = vf
    cdef double[:, ::1] ov = out
    cdef long i
    cdef int d
    cdef double a, r, inv_s = 1.0 / sigma
    with nogil:
        for i in range(n):
            a = 0.0
            for d in range(m):
                a += vv[d, i] * vv[d, i]
            a = sqrt(a) * inv_s
            if a == 0.0:
                for d in range(m):
                    ov[d, i] = vv[d, i]
                continue
            r = _prox_slope(a, inv_s)
            r = r / sqrt(1.0 + r * r) / a
            for d in range(m):
                ov[d, i] = vv[d, i] - vv[d, i] * r
    return out.reshape(v.shape)


def energy_density(p, double w_max):
    cdef int m = p.shape[0]
    rest = tuple(p.shape[1:])
    cdef long n = 1
    for k in rest:
        n *= k
    cdef cnp.ndarray[double, ndim=2, mode="c"] pf = np.ascontiguousarray(p, dtype=np.float64).reshape(m, n)
    out = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] pv = pf
    cdef double[::1] ov = out
    cdef long i
    cdef int d
    cdef double s, w
    with nogil:
        for i in range(n):
            s = 0.0
            for d in range(m):
                s += pv[d, i] * pv[d, i]
            if 1.0 - s > W_CAP_GAP:
                w = 1.0 / sqrt(1.0 - s)
                ov[i] = w if w < w_max else w_max
            else:
                ov[i] = w_max
    return out.reshape(rest)


def lagrangian(p):
    cdef int m = p.shape[0]
    rest = tuple(p.shape[1:])
    cdef long n = 1
    for k in rest:
        n *= k
    cdef cnp.ndarray[double, ndim=2, mode="c"] pf = np.ascontiguousarray(p, dtype=np.float64).reshape(m, n)
    out = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] pv = pf
    cdef double[::1] ov = out
    cdef long i
    cdef int d
    cdef double s
    cdef double inf = float("inf")
    with nogil:
        for i in range(n):
            s = 0.0
            for d in range(m):
                s += pv[d, i] * pv[d, i]
            if s <= 1.0:
                ov[i] = s / (1.0 + sqrt(1.0 - s))
            else:
                ov[i] = inf
    return out.reshape(rest)
