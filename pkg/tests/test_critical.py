from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tatonnement.critical import (
    UNRESOLVED,
    basin_of_attraction,
    classify,
    compare_scenarios,
    find_critical_points,
)
from tatonnement.field import AppendixParams, FieldError, make_appendix_field, make_linear_field
from tatonnement.hodge import GridSpec

from conftest import SQRT3_2

BOX = [[-2.0, 2.0], [-2.0, 2.0]]


def test_symmetric_double_well(well_k0):
    pts = find_critical_points(well_k0, BOX)
    np.testing.assert_allclose([p.location for p in pts], [[-1, 0], [0, 0], [1, 0]], atol=1e-12)
    assert [p.index for p in pts] == [0, 1, 0]
    assert [p.stability for p in pts] == ["stable", "saddle", "stable"]


def test_tilted_double_well(well_k05):
    pts = find_critical_points(well_k05, BOX)
    np.testing.assert_allclose(
        [p.location for p in pts], [[-SQRT3_2, SQRT3_2 / 2], [0, 0], [SQRT3_2, -SQRT3_2 / 2]], atol=1e-10
    )
    assert all(p.residual <= 1e-10 for p in pts)


def test_linear_stable_field(contracting):
    pts = find_critical_points(contracting, [[-1, 1], [-1, 1]], multistart_resolution=4)
    assert len(pts) == 1
    assert pts[0].index == 0 and np.allclose(pts[0].location, 0.0)


def test_no_roots_gives_diagnostic():
    # A = (1 + x^2, y) has no zero
    from tatonnement.field import make_polynomial_field

    f = make_polynomial_field(2, [[-2, 2], [-2, 2]], drift=[[[1.0, 0, 0], [1.0, 2, 0]], [[1.0, 0, 1]]])
    rep = find_critical_points(f, multistart_resolution=4)
    assert len(rep) == 0 and "no Newton start converged" in rep.diagnostic
    assert rep.starts == 16


def test_classify_saddle_and_well(well_k05):
    cp = classify(well_k05, [0, 0])
    np.testing.assert_allclose(np.sort(cp.jacobian_eigenvalues.real), [-np.sqrt(0.75), np.sqrt(0.75)], atol=1e-12)
    assert (cp.index, cp.stability) == (1, "saddle")
    well = classify(well_k05, [SQRT3_2, -SQRT3_2 / 2])
    eig = well.jacobian_eigenvalues
    assert np.sum(eig).real == pytest.approx(-2.25)
    assert np.prod(eig).real == pytest.approx(1.5)
    assert (well.index, well.stability) == (0, "stable")


def test_classify_source():
    cp = classify(make_linear_field(np.eye(3)), np.zeros(3))
    assert (cp.index, cp.stability) == (3, "unstable")


def test_classify_marginal():
    cp = classify(make_linear_field(np.diag([-1.0, 0.0])), [0.0, 0.0])
    assert cp.stability == "marginal"


def test_classify_rejects_non_root(well_k05):
    with pytest.raises(FieldError, match="not a critical point"):
        classify(well_k05, [0.5, 0.5])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.0, 1.0))
def test_points_match_closed_form(a, b, k):
    params = AppendixParams(a, b, k)
    if a * a - k * k / b < 0.05:
        return
    f = make_appendix_field(params)
    lo, hi = params.wells()
    half = 2.0 * max(1.0, a)
    pts = find_critical_points(f, [[-half, half], [-half, half]])
    locs = np.array([p.location for p in pts])
    assert len(pts) == 3
    np.testing.assert_allclose(locs, [lo, [0, 0], hi], atol=1e-8)
    assert [p.index for p in pts] == [0, 1, 0]


def test_basins_symmetric_well(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    grid = GridSpec(BOX, (20, 20))
    basins = basin_of_attraction(well_k0, pts, grid)
    x = grid.nodes()[..., 0]
    assert np.all(basins.labels[x > 0] == 2)
    assert np.all(basins.labels[x < 0] == 0)


def test_basins_single_well(bowl):
    pts = find_critical_points(bowl, BOX).points
    basins = basin_of_attraction(bowl, pts, GridSpec(BOX, (12, 12)))
    assert np.all(basins.labels == 0)


def test_basins_tilted_halves(well_k05):
    pts = find_critical_points(well_k05, BOX).points
    basins = basin_of_attraction(well_k05, pts, GridSpec(BOX, (40, 40)))
    assert abs(basins.fraction(0) - basins.fraction(2)) <= 0.02
    assert basins.fraction(0) + basins.fraction(2) + basins.fraction(UNRESOLVED) == pytest.approx(1.0)


def test_compare_widening_wells(well_k0):
    comp = compare_scenarios(well_k0, [1.0, 1.0, 0.0], [1.1, 1.0, 0.0], box=[[-2.5, 2.5], [-2.5, 2.5]])
    np.testing.assert_allclose([m.alternative.location for m in comp.matches], [[-1.1, 0], [0, 0], [1.1, 0]], atol=1e-10)
    assert not any(m.index_changed for m in comp.matches)
    assert comp.unmatched_base == [] and comp.unmatched_alternative == []


def test_compare_identity(well_k05):
    comp = compare_scenarios(well_k05, well_k05.parameters, well_k05.parameters, box=BOX)
    assert all(m.displacement == 0.0 for m in comp.matches)


def test_compare_tilt(well_k0):
    comp = compare_scenarios(well_k0, [1, 1, 0], [1, 1, 0.5], box=BOX)
    xs = sorted(m.alternative.location[0] for m in comp.matches)
    np.testing.assert_allclose(xs, [-SQRT3_2, 0, SQRT3_2], atol=1e-10)
    rec = comp.to_record()
    assert len(rec["matches"]) == 3


def test_compare_loses_wells(well_k0):
    # a^2 - k^2/b < 0: only the origin survives
    comp = compare_scenarios(
        make_appendix_field(AppendixParams(1, 1, 0), require_two_well=False), [1, 1, 0], [1, 1, 1.2], box=BOX
    )
    assert len(comp.matches) == 1 and len(comp.unmatched_base) == 2
    assert comp.matches[0].index_changed
