import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilab.grid import (
    BoundaryDatum,
    ConfigurationError,
    DomainSpec,
    ScalarField,
    VectorField,
    admissible_boundary,
    build_grid,
    discrete_divergence,
    discrete_gradient,
    gradient_operator,
    intrinsic_distance,
)


def test_box_classification():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 5)
    assert g.shape == (5, 5)
    assert g.n_nodes == 25 and g.n_interior == 9 and g.n_boundary == 16
    assert g.n_cells == 16
    assert g.h == pytest.approx(0.25)


def test_ball_nodes_inside(ball2):
    r = np.linalg.norm(ball2.coords(), axis=-1)
    assert np.all(r[ball2.active] <= 1 + 1e-12)
    assert not np.any(ball2.interior & ball2.boundary)
    assert ball2.diameter == 2.0


def test_mask_domain_l_shape():
    pred = lambda x: ~((x[:, 0] > 0) & (x[:, 1] > 0))  # noqa: E731
    g = build_grid(DomainSpec.mask([-1, -1], [1, 1], pred), 9)
    assert not g.active[-1, -1]
    assert g.n_interior > 0


@pytest.mark.parametrize(
    "dom,res",
    [
        (DomainSpec.box([0, 0], [1, 1]), 2),
        (DomainSpec.box([0, 0], [0, 1]), 9),
        (DomainSpec.box([0, 0], [1, 1]), [9, 9, 9]),
        (DomainSpec.ball([0, 0], 0.0), 9),
    ],
)
def test_degenerate_domains_rejected(dom, res):
    with pytest.raises(ConfigurationError):
        build_grid(dom, res)


def test_node_index_roundtrip(box2):
    idx = box2.node_index([0.25, -0.5])
    assert np.allclose(box2.node_point(idx), [0.25, -0.5])
    with pytest.raises(ValueError):
        box2.node_index([0.3, 0.0])


def test_gradient_of_affine_is_exact(box3):
    c = np.array([0.3, -0.2, 0.5])
    u = ScalarField(box3, box3.coords() @ c)
    p = discrete_gradient(u).values
    for d in range(3):
        assert np.allclose(p[d], c[d], atol=1e-13)


def test_sparse_gradient_matches_kernel(ball2, rng):
    u = ScalarField(ball2, np.where(ball2.active, rng.standard_normal(ball2.shape), 0.0))
    K = gradient_operator(ball2)
    dense = (K @ u.values.ravel()).reshape((2,) + ball2.cell_shape)
    assert np.allclose(dense, discrete_gradient(u).values, atol=1e-12)


@pytest.mark.parametrize("kind", ["box", "ball", "mask"])
def test_adjointness_random_pairs(kind, rng):
    if kind == "box":
        g = build_grid(DomainSpec.box([0, 0, 0], [1, 2, 1]), [7, 9, 6])
    elif kind == "ball":
        g = build_grid(DomainSpec.ball([0, 0], 1.0), 25)
    else:
        g = build_grid(DomainSpec.mask([-1, -1], [1, 1], lambda x: np.abs(x).sum(1) <= 1.0), 23)
    for _ in range(50):
        u = ScalarField(g, np.where(g.interior, rng.standard_normal(g.shape), 0.0))
        p = VectorField(g, rng.standard_normal((g.m,) + g.cell_shape) * g.cell_active)
        lhs = np.sum(discrete_gradient(u).values * p.values)
        rhs = -np.sum(u.values * discrete_divergence(p).values)
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_admissible_boundary_affine():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 9)
    assert admissible_boundary(g, BoundaryDatum.affine(g, [0.5, 0.0])) > 0
    assert admissible_boundary(g, BoundaryDatum.affine(g, [1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)
    assert admissible_boundary(g, BoundaryDatum.affine(g, [1.5, 0.0])) < 0


def test_intrinsic_distance_convex_and_reentrant():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 11)
    assert intrinsic_distance(g, [0, 0], [1, 1]) == pytest.approx(math.sqrt(2))
    pred = lambda x: ~((x[:, 0] > 0) & (x[:, 1] > -0.5) & (x[:, 1] < 0.5))  # noqa: E731
    gm = build_grid(DomainSpec.mask([-1, -1], [1, 1], pred), 21)
    d = intrinsic_distance(gm, [0.5, -0.6], [0.5, 0.6])
    # detour around the notch tip at (0, +-0.5)
    assert d >= 2 * math.hypot(0.5, 0.1) - 1e-9
    assert d > 1.2


@given(st.lists(st.floats(-0.6, 0.6), min_size=2, max_size=2), st.floats(-2, 2))
def test_affine_boundary_datum_values(c, d):
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 5)
    phi = BoundaryDatum.affine(g, c, d)
    expect = g.coords() @ np.asarray(c) + d
    assert np.allclose(phi.values[g.boundary], expect[g.boundary])
    assert np.all(phi.values[g.interior] == 0)
    assert phi.slope == pytest.approx(np.linalg.norm(c))
