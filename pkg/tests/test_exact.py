import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilab.exact import (
    ConstructionError,
    CounterexampleParams,
    RadialParams,
    counterexample_geometry,
    counterexample_gradient,
    counterexample_hessian,
    counterexample_value,
    cutoff_a,
    cutoff_zeta,
    d_eps,
    feasibility_scan,
    integrability_probe,
    light_set_distance,
    radial_integrand,
    radial_value,
    radial_values,
    random_bumps,
    smooth_step,
    weak_form_residuals,
)

P = CounterexampleParams(4, 1, 1.0, 0.05)


def test_smooth_step_values():
    v, d1, _ = smooth_step(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
    assert np.allclose(v, [0, 0, 0.5, 1, 1])
    assert d1[2] == pytest.approx(2.0)


@given(st.floats(0.01, 0.99))
def test_smooth_step_derivative(y):
    h = 1e-6
    _, d1, d2 = smooth_step(np.array([y]))
    fd1 = (smooth_step(np.array([y + h]))[0] - smooth_step(np.array([y - h]))[0]) / (2 * h)
    fd2 = (smooth_step(np.array([y + h]))[1] - smooth_step(np.array([y - h]))[1]) / (2 * h)
    assert d1[0] == pytest.approx(fd1[0], rel=1e-5, abs=1e-8)
    assert d2[0] == pytest.approx(fd2[0], rel=1e-4, abs=1e-6)


def test_plateau_a():
    eps = 0.05
    assert cutoff_a(eps, np.array([0.0, eps, -eps]))[0] == 1.0
    assert cutoff_a(eps, np.array([1.5 * eps]))[0] == pytest.approx(0.5)
    assert cutoff_a(eps, np.array([2 * eps, 3 * eps])).max() == 0.0
    t = np.linspace(-3 * eps, 3 * eps, 2001)
    a = cutoff_a(eps, t)
    assert np.all((a >= 0) & (a <= 1)) and np.allclose(a, a[::-1])
    assert d_eps(eps) == pytest.approx(math.exp(40) / 2)


def test_zeta():
    eps = 0.05
    z = cutoff_zeta(eps, np.array([0.0, 10.0, 15.0, 20.0, 25.0]))
    assert z[0] == 1 and z[1] == 1 and 0 < z[2] < 1 and z[3] == 0 and z[4] == 0


def test_radial_closed_form_m2():
    # m = 2, H = 0: u(r) = asinh(T/b) - asinh(r/b) up to sign conventions of the integrand
    p = RadialParams(m=2, T=1.0, b=1.0)
    r = np.array([0.0, 0.1, 0.5, 0.9])
    exact = np.arcsinh(1.0) - np.arcsinh(r)
    assert np.allclose(radial_value(p, r), exact, atol=1e-12)
    assert np.allclose(radial_values(p, r), exact, atol=1e-12)
    assert p.charge == pytest.approx(2 * math.pi)


@given(st.integers(2, 5), st.floats(0.1, 3.0), st.floats(-2.0, 2.0))
def test_radial_slope_below_one(m, b, H):
    p = RadialParams(m=m, b=b, H=H)
    t = np.linspace(1e-3, 1.0, 50)
    v = np.abs(radial_integrand(p, t))
    # 1/sqrt(1 + t^(2m-2)) rounds to 1 for tiny t
    assert np.all(v <= 1) and v[-1] < 1


def test_radial_vectorized_matches_adaptive():
    p = RadialParams(m=3, T=1.0, b=0.7, H=0.5)
    r = np.linspace(0, 1, 13)
    assert np.allclose(radial_values(p, r), radial_value(p, r), atol=1e-11)


def test_counterexample_params_validation():
    for kw in ({"m": 2}, {"ell": 3}, {"kappa": 0.5}, {"eps": 0.0}):
        with pytest.raises(ValueError):
            CounterexampleParams(**kw)
    assert P.threshold == 3.0 and P.nz == 0 and P.ny == 3


def test_counterexample_on_light_segment():
    x = np.zeros((5, 4))
    x[:, -1] = np.linspace(-P.eps, P.eps, 5)
    assert np.allclose(counterexample_value(P, x), x[:, -1], atol=1e-14)
    geo = counterexample_geometry(P, x)
    assert np.all(geo.light) and np.all(np.isinf(geo.W))
    assert np.all(light_set_distance(P, x) == 0)


def test_counterexample_spacelike():
    assert feasibility_scan(P, n=2**14) <= 1.0
    with pytest.raises(ConstructionError):
        feasibility_scan(CounterexampleParams(4, 1, 1.0, 0.9), n=2**12)


def test_counterexample_derivatives_fd(rng):
    pts = np.column_stack([rng.uniform(-0.3, 0.3, (40, 3)), rng.uniform(-0.2, 0.2, 40)])
    h = 1e-6
    g = counterexample_gradient(P, pts)
    H = counterexample_hessian(P, pts)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (counterexample_value(P, pts + e) - counterexample_value(P, pts - e)) / (2 * h)
        assert np.allclose(g[:, i], fd, rtol=1e-5, atol=1e-6)
        fdh = (counterexample_gradient(P, pts + e) - counterexample_gradient(P, pts - e)) / (2 * h)
        assert np.allclose(H[:, :, i], fdh, rtol=1e-4, atol=1e-3)


def test_probe_small():
    res = integrability_probe(P, 0.5, levels=3, quantities=("W",), per_decade=2)
    assert len(res.estimates["W"]) == 3
    assert max(res.relative_changes("W")) < 1e-3
    with pytest.raises(ValueError):
        integrability_probe(P, 0.5, levels=3, shrink=1.0)


def test_weak_form_level0_small():
    bumps = random_bumps(P, 4, seed=1)
    res = weak_form_residuals(P, bumps, 0)
    assert np.all(np.abs(res.residuals) < 1e-3)
