import math

import numpy as np
import pytest

from bilab.energy import variational_inequality_gap
from bilab.grid import BoundaryDatum, DomainSpec, ScalarField, build_grid
from bilab.solver import SolverConfig, continuation_solve, operator_norm, solve
from bilab.sources import MeasureSource, MollifiedSource, density_field, mollify


@pytest.mark.parametrize("m", [2, 3])
@pytest.mark.parametrize("method", ["admm", "pdhg"])
def test_plane_exactness(m, method):
    g = build_grid(DomainSpec.box([-1] * m, [1] * m), 33 if m == 2 else 17)
    c = np.zeros(m)
    c[0] = 0.5
    phi = BoundaryDatum.affine(g, c)
    rep = solve(g, phi, None, SolverConfig(method=method, tol=1e-11, max_iter=50000))
    assert rep.converged
    assert np.abs(rep.solution.values - g.coords() @ c).max() <= 1e-8


def test_zero_data_gives_zero(ball2):
    rep = solve(ball2, BoundaryDatum.zero(ball2), None)
    assert rep.converged and np.abs(rep.solution.values).max() <= 1e-12


def test_boundary_pinned_and_feasible(ball2):
    src = mollify(MeasureSource.point_charges([((0.1, 0.0), 3.0)]), 4 * ball2.h, ball2)
    phi = BoundaryDatum.affine(ball2, [0.3, 0.1])
    rep = solve(ball2, phi, src)
    assert rep.converged
    assert np.array_equal(rep.solution.values[ball2.boundary], phi.values[ball2.boundary])
    assert rep.max_slope <= 1.0 + 1e-12
    assert rep.energy_monotone()


def test_sign_symmetry(box2):
    dens = density_field(box2, "exp(-10*r**2) * (1 + x1)")
    src = MollifiedSource.from_density(dens)
    cfg = SolverConfig(tol=1e-11)
    a = solve(box2, BoundaryDatum.zero(box2), src, cfg)
    b = solve(box2, BoundaryDatum.zero(box2), src.negated(), cfg)
    assert np.abs(a.solution.values + b.solution.values).max() <= 1e-8


def test_uniqueness_from_random_starts(box2):
    src = mollify(MeasureSource.point_charges([((0.0, 0.0), 2.0)]), 3 * box2.h, box2)
    sols = [solve(box2, BoundaryDatum.zero(box2), src, SolverConfig(tol=1e-11, seed=s)).solution for s in (1, 2)]
    assert np.abs(sols[0].values - sols[1].values).max() <= 1e-8


def test_linf_bound_and_vi_gap(ball2, rng):
    src = mollify(MeasureSource.point_charges([((0.0, 0.0), 4.0)]), 4 * ball2.h, ball2)
    rep = solve(ball2, BoundaryDatum.zero(ball2), src, SolverConfig(tol=1e-10))
    assert rep.max_abs_u <= 0.0 + ball2.diameter + 1e-9
    u = rep.solution
    for _ in range(20):
        t = rng.uniform(0, 1)
        psi = ScalarField(ball2, (1 - t) * u.values)
        assert variational_inequality_gap(u, src, psi) >= -1e-8


def test_radial_symmetry_on_ball():
    g = build_grid(DomainSpec.ball([0, 0], 1.0), 33)
    src = mollify(MeasureSource.point_charges([((0.0, 0.0), 2.0)]), 4 * g.h, g)
    u = solve(g, BoundaryDatum.zero(g), src, SolverConfig(tol=1e-11)).solution.values
    # the grid's symmetry group: axis flips and the transpose
    for v in (u[::-1, :], u[:, ::-1], u.T):
        assert np.abs(u - v).max() <= 1e-8


def test_continuation_stage_differences_decrease():
    g = build_grid(DomainSpec.ball([0, 0], 1.0), 65)
    src = MeasureSource.point_charges([((0.0, 0.0), 2 * math.pi)])
    rep = continuation_solve(g, BoundaryDatum.zero(g), src, [16 * g.h, 8 * g.h, 4 * g.h, 2 * g.h])
    assert rep.converged and len(rep.history) == 4
    du = [s.du_inf for s in rep.history[1:]]
    assert all(b < a for a, b in zip(du, du[1:]))


def test_continuation_rejects_bad_widths(box2):
    src = MeasureSource.point_charges([((0.0, 0.0), 1.0)])
    with pytest.raises(ValueError):
        continuation_solve(box2, BoundaryDatum.zero(box2), src, [2 * box2.h, 4 * box2.h])


def test_nonconvergence_is_reported(box2):
    src = mollify(MeasureSource.point_charges([((0.0, 0.0), 5.0)]), 2 * box2.h, box2)
    rep = solve(box2, BoundaryDatum.zero(box2), src, SolverConfig(max_iter=3))
    assert not rep.converged and rep.iterations == 3


def test_nonfinite_source_rejected(box2):
    vals = np.zeros(box2.shape)
    vals[3, 3] = np.nan
    with pytest.raises(ValueError):
        MollifiedSource.from_density(ScalarField(box2, vals, extended=True))


def test_marginal_boundary_warns():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 9)
    rep = solve(g, BoundaryDatum.affine(g, [1.0, 0.0]), None, SolverConfig(max_iter=200))
    assert any("admissibility" in w for w in rep.warnings)


def test_deterministic_is_bitwise_reproducible(box2):
    src = mollify(MeasureSource.point_charges([((0.2, 0.0), 2.0)]), 3 * box2.h, box2)
    cfg = SolverConfig(deterministic=True, seed=7)
    a = solve(box2, BoundaryDatum.zero(box2), src, cfg).solution.values
    b = solve(box2, BoundaryDatum.zero(box2), src, cfg).solution.values
    assert np.array_equal(a, b)


def test_operator_norm_bound(box2):
    # |K| <= sqrt(sum 4/h_i^2) for the corner-averaged gradient
    assert operator_norm(box2) <= math.sqrt(8) / box2.h + 1e-9


@pytest.mark.parametrize("kw", [{"tol": 0}, {"method": "newton"}, {"relaxation": 2.0}, {"max_iter": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_report_json_roundtrip(box2):
    import json

    rep = solve(box2, BoundaryDatum.zero(box2), None)
    doc = json.loads(rep.to_json("u.bin"))
    assert doc["converged"] and doc["solution_file"] == "u.bin"
