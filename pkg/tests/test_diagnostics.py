import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilab import diagnostics as diag
from bilab.grid import DomainSpec, ScalarField, build_grid
from bilab.sources import MeasureSource, sphere_area


def test_sff_of_paraboloid():
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 41)
    u = ScalarField(g, np.sum(g.coords() ** 2, axis=-1) / 4)
    rep = diag.second_fundamental_form(u)
    c = g.node_index([0.0, 0.0])
    # Du = 0 and D2u = I/2 at the origin: ||II|| = |D2u| = sqrt(2)/2
    assert rep.field.values[c] == pytest.approx(math.sqrt(2) / 2, rel=1e-10)
    assert np.isnan(rep.field.values[0, 0])


def test_sff_of_plane_vanishes(box3):
    u = ScalarField(box3, box3.coords() @ np.array([0.2, 0.3, -0.1]))
    vals = diag.second_fundamental_form_norm(u).values
    assert np.nanmax(vals) <= 1e-12


def test_integrals_constant_and_plane():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 17)
    rep = diag.log_weighted_integrals(g.zeros(), region=diag.Region.box([0.25, 0.25], [0.75, 0.75]))
    assert rep.w == pytest.approx(rep.volume)
    assert rep.w_log == pytest.approx(math.log(2) * rep.volume)
    assert rep.curvature == 0
    u = ScalarField(g, 0.6 * g.coords()[..., 0])
    rep = diag.log_weighted_integrals(u, region=diag.Region.annulus([0.5, 0.5], 0.0, 0.25))
    assert rep.w == pytest.approx(1.25 * rep.volume)
    json.loads(rep.to_json())


def test_integrals_reject_collar():
    g = build_grid(DomainSpec.box([0, 0], [1, 1]), 17)
    with pytest.raises(ValueError):
        diag.log_weighted_integrals(g.zeros(), region=diag.Region.box([0, 0], [1, 1]))


def test_lorentzian_distance_and_ball():
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 21)
    u = ScalarField(g, 0.6 * g.coords()[..., 0])
    ld = diag.lorentzian_distance(u, (0.0, 0.0))
    i = g.node_index([0.5, 0.0])
    assert ld.values[i] == pytest.approx(0.4)
    j = g.node_index([0.0, 0.5])
    assert ld.values[j] == pytest.approx(0.5)
    ball = diag.lorentzian_ball(u, [(0.0, 0.0)], 0.45)
    assert ball[i] and not ball[j]
    null = ScalarField(g, g.coords()[..., 0])
    assert diag.lorentzian_distance(null, (0.0, 0.0)).values[g.node_index([1.0, 0.0])] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(diag.SpacelikeViolation):
        diag.lorentzian_distance(ScalarField(g, 1.5 * g.coords()[..., 0]), (0.0, 0.0))


def test_light_segments_null_plane_and_spacelike():
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 21)
    rep = diag.detect_light_segments(ScalarField(g, g.coords()[..., 1]))
    assert rep.globally_null
    assert diag.detect_light_segments(ScalarField(g, 0.5 * g.coords()[..., 0])).empty


def test_light_segment_in_cone():
    # u = 1 - |x| on the disc: every radius is a light segment
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 33)
    r = np.linalg.norm(g.coords(), axis=-1)
    u = ScalarField(g, np.maximum(0.5 - r, 0.0))
    rep = diag.detect_light_segments(u)
    assert not rep.empty
    exact = 0
    for s in rep.segments:
        a, b = np.asarray(s.start), np.asarray(s.end)
        slack = np.linalg.norm(a - b) - abs(u.values[g.node_index(a)] - u.values[g.node_index(b)])
        assert slack == pytest.approx(s.slack, abs=1e-12)
        assert slack <= rep.tol_light * s.length + 1e-12
        exact += slack <= 1e-12
    # the axis and diagonal radii are exactly null
    assert exact >= 4
    text = rep.to_json()
    assert json.loads(text)["segments"]


def test_light_segment_exclusion():
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 33)
    r = np.linalg.norm(g.coords(), axis=-1)
    u = ScalarField(g, np.maximum(0.5 - r, 0.0))
    # every null chord of the cone touches the apex or runs within 0.3 of it
    rep = diag.detect_light_segments(u, exclude=[((0.0, 0.0), 0.3)])
    for s in rep.segments:
        assert min(np.linalg.norm(s.start), np.linalg.norm(s.end)) > 0.3
    assert len(rep.segments) < len(diag.detect_light_segments(u).segments)
    assert diag.detect_light_segments(u, exclude=[((0.0, 0.0), 3.0)]).empty


def test_light_segment_csv(tmp_path):
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 17)
    rep = diag.detect_light_segments(ScalarField(g, np.maximum(0.5 - np.abs(g.coords()[..., 0]), 0.0)))
    path = rep.to_csv(tmp_path / "seg.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,y1,y2,slack" and len(lines) == len(rep.segments) + 1


def test_hausdorff():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 0.5]])
    assert diag.hausdorff_distance(a, b) == pytest.approx(math.hypot(1, 0.5))


@given(st.floats(0.05, 0.45), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_ball_weights_sum_to_ball_volume(r, y1, y2):
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 33)
    wts = diag.ball_cell_weights(g, [y1, y2], r)
    assert wts.sum() * g.cell_volume == pytest.approx(math.pi * r * r, rel=1e-12)


@pytest.mark.parametrize("m", [2, 3])
def test_growth_zero_field_closed_form(m):
    g = build_grid(DomainSpec.box([-1] * m, [1] * m), 17 if m == 2 else 9)
    s, t = 0.2, 0.5
    margin = diag.growth_check(g.zeros(), None, [0.0] * m, s, t)
    vol = sphere_area(m) / m
    assert margin == pytest.approx(s * vol * t ** (m - 1) - vol * s**m, rel=1e-12)


def test_growth_counts_charge_mass():
    g = build_grid(DomainSpec.box([-1, -1], [1, 1]), 17)
    src = MeasureSource.point_charges([((0.0, 0.0), -3.0)])
    base = diag.growth_check(g.zeros(), None, [0.0, 0.0], 0.2, 0.5)
    assert diag.growth_check(g.zeros(), src, [0.0, 0.0], 0.2, 0.5) == pytest.approx(base + 0.2 * 3.0)


def test_growth_argument_checks(box2):
    with pytest.raises(ValueError):
        diag.growth_check(box2.zeros(), None, [0.0, 0.0], 0.5, 0.2)
    with pytest.raises(ValueError):
        diag.growth_check(box2.zeros(), None, [0.0, 0.0], 0.5, 1.5)


def test_random_growth_samples_fit(ball2):
    for y, s, t in diag.random_growth_samples(ball2, 20, 3):
        assert 0 < s < t
        diag.growth_check(ball2.zeros(), None, y, s, t)
