from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tatonnement.critical import classify, find_critical_points
from tatonnement.dynamics import (
    NoiseSpec,
    Trajectory,
    arrhenius_slope,
    detect_transitions,
    distance_to_polyline,
    energy_identity_check,
    integrate_deterministic,
    integrate_ensemble,
    mean_first_passage,
    run_ensemble,
    saddle_passage_fraction,
    simulate_sde,
)
from tatonnement.field import FieldError, make_linear_field, make_polynomial_field
from tatonnement.hodge import analytic_decomposition

BOX = [[-2.0, 2.0], [-2.0, 2.0]]


def zero_field(n=2, half=50.0):
    return make_polynomial_field(n, [[-half, half]] * n, drift=[[] for _ in range(n)])


def test_relaxes_into_right_well(well_k0):
    traj = integrate_deterministic(well_k0, [0.1, 0.0], 50.0, 1e-3)
    assert np.linalg.norm(traj.final - [1.0, 0.0]) <= 1e-6
    v = well_k0.eval_potential(traj.states)
    assert np.all(np.diff(v) <= 1e-15)


def test_fixed_point_stays(well_k05):
    traj = integrate_deterministic(well_k05, [0.0, 0.0], 5.0, 1e-2)
    assert np.all(traj.states == 0.0)


def test_linear_decay(contracting):
    traj = integrate_deterministic(contracting, [1.0, 0.0], 1.0, 1e-3)
    np.testing.assert_allclose(traj.final, [np.exp(-1.0), 0.0], atol=1e-8)
    assert traj.times[-1] == pytest.approx(1.0)


def test_leaving_box_truncates():
    f = make_linear_field(np.eye(2), box=[[-2, 2], [-2, 2]])
    traj = integrate_deterministic(f, [1.0, 0.0], 5.0, 1e-3)
    assert traj.status == "left-box" and traj.truncated
    assert traj.times[-1] == pytest.approx(np.log(2.0), abs=2e-3)
    assert np.all(f.in_box(traj.states))


def test_ensemble_rows_match_single_runs(well_k05):
    p0s = np.array([[0.1, 0.2], [-0.5, 1.0], [1.5, -1.5]])
    batch = integrate_ensemble(well_k05, p0s, 2.0, 1e-2)
    for p0, traj in zip(p0s, batch):
        np.testing.assert_array_equal(traj.states, integrate_deterministic(well_k05, p0, 2.0, 1e-2).states)


def test_bad_run_arguments(well_k05):
    with pytest.raises(FieldError):
        integrate_deterministic(well_k05, [0.0, 0.0], 1.0, -1e-3)
    with pytest.raises(FieldError):
        integrate_deterministic(well_k05, [0.0, 0.0, 0.0], 1.0, 1e-3)
    with pytest.raises(FieldError):
        integrate_deterministic(well_k05, [9.0, 0.0], 1.0, 1e-3)


@pytest.mark.parametrize(
    "cov",
    [[[1.0, 0.0], [1e-3, 1.0]], [[1.0, 0.0], [0.0, -0.1]], [[np.inf, 0], [0, 1]], [[1.0, 2.0, 3.0]]],
)
def test_noise_validation(cov):
    with pytest.raises(FieldError):
        NoiseSpec(np.array(cov))


@settings(max_examples=25)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(-1.0, 1.0))
def test_noise_factor_reproduces_covariance(s1, s2, rho):
    c = rho * np.sqrt(s1 * s2)
    noise = NoiseSpec(np.array([[s1, c], [c, s2]]))
    L = noise.factor
    np.testing.assert_allclose(L @ L.T, noise.covariance, atol=1e-12)


def test_zero_noise_is_euler(well_k05):
    traj = simulate_sde(well_k05, NoiseSpec(np.zeros((2, 2)), 1), [0.3, 0.2], 1.0, 1e-2)
    x = np.array([0.3, 0.2])
    for _ in range(100):
        x = x + 1e-2 * well_k05.evaluate(x)
    np.testing.assert_allclose(traj.final, x, rtol=0, atol=1e-14)
    assert traj.scheme == "euler-maruyama-ito"


def test_same_seed_same_path(well_k05):
    noise = NoiseSpec.isotropic(0.2, 2, seed=42)
    a = simulate_sde(well_k05, noise, [0.0, 0.0], 20.0, 1e-2)
    b = simulate_sde(well_k05, noise, [0.0, 0.0], 20.0, 1e-2)
    assert np.array_equal(a.states, b.states)
    c = simulate_sde(well_k05, NoiseSpec.isotropic(0.2, 2, seed=43), [0.0, 0.0], 20.0, 1e-2)
    assert not np.array_equal(a.states, c.states)


def test_sde_path_is_ensemble_member(well_k05):
    noise = NoiseSpec.isotropic(0.1, 2, seed=5)
    ens = run_ensemble(well_k05, noise, [0.2, 0.0], 4, 3.0, 1e-2)
    for m in range(4):
        path = simulate_sde(well_k05, noise, [0.2, 0.0], 3.0, 1e-2, member=m)
        np.testing.assert_array_equal(path.final, ens.final_states[m])


def test_worker_count_does_not_change_results(well_k05):
    noise = NoiseSpec.isotropic(0.3, 2, seed=9)
    one = run_ensemble(well_k05, noise, [0.0, 0.0], 12, 5.0, 1e-2, target=[0.866, -0.433], workers=1)
    three = run_ensemble(well_k05, noise, [0.0, 0.0], 12, 5.0, 1e-2, target=[0.866, -0.433], workers=3)
    np.testing.assert_array_equal(one.final_states, three.final_states)
    np.testing.assert_array_equal(one.hit_times, three.hit_times)
    assert one.status == three.status


def test_brownian_variance_small_ensemble():
    f = zero_field()
    res = run_ensemble(f, NoiseSpec.isotropic(0.01, 2, seed=1), [0.0, 0.0], 2000, 10.0, 1e-2, record_times=[5.0, 10.0])
    var = res.recorded.var(axis=1)
    np.testing.assert_allclose(var[0], 0.05, rtol=0.1)
    np.testing.assert_allclose(var[1], 0.10, rtol=0.1)


def test_record_times_must_be_on_grid():
    with pytest.raises(FieldError):
        run_ensemble(zero_field(), NoiseSpec.isotropic(0.01, 2), [0, 0], 2, 1.0, 1e-2, record_times=[0.005])


def test_distance_to_polyline():
    pts = np.array([[-1.0, 1.0], [1.0, 1.0]])
    assert distance_to_polyline(pts, np.zeros(2)) == pytest.approx(1.0)
    assert distance_to_polyline(pts[:1], np.zeros(2)) == pytest.approx(np.sqrt(2.0))


def _line_trajectory():
    t = np.arange(0.0, 2.0 + 1e-12, 1e-2)
    states = np.stack([t - 1.0, np.zeros_like(t)], axis=1)
    return Trajectory(t, states, 1e-2, "synthetic")


def test_synthetic_crossing(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    events = detect_transitions(_line_trajectory(), pts, 0.1, 0.3)
    assert len(events) == 1
    ev = events[0]
    assert (ev.from_point, ev.to_point) == (0, 2)
    assert ev.min_distance_to_saddle[1] == pytest.approx(0.0, abs=1e-12)
    assert ev.departure_time == pytest.approx(0.1, abs=0.011)
    assert ev.arrival_time == pytest.approx(1.9, abs=0.011)
    assert saddle_passage_fraction(events, 0.3) == 1.0


def test_hysteresis_suppresses_chatter(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    # leaves the capture ball but never the release ball, then crosses
    x = np.concatenate([np.full(10, -1.0), np.full(10, -0.8), np.full(10, -1.0), np.linspace(-1, 1, 50)])
    traj = Trajectory(np.arange(x.size) * 1.0, np.stack([x, 0 * x], axis=1), 1.0, "synthetic")
    assert len(detect_transitions(traj, pts, 0.1, 0.3)) == 1


def test_no_transition_in_one_well(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    traj = simulate_sde(well_k0, NoiseSpec.isotropic(0.01, 2, seed=2), [-1.0, 0.0], 50.0, 1e-2)
    assert detect_transitions(traj, pts) == []
    assert np.isnan(saddle_passage_fraction([], 0.3))


def test_detection_needs_two_wells(bowl):
    pts = find_critical_points(bowl, BOX).points
    with pytest.raises(FieldError):
        detect_transitions(_line_trajectory(), pts)


def test_mfpt_small_ensemble(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    est = mean_first_passage(well_k0, pts[0], pts[2], [0.5, 0.3], 100, 1e-2, 2000.0, seed=4)
    assert est[0].mean < est[1].mean
    assert all(e.n_censored == 0 and e.n_runs == 100 for e in est)
    assert np.isfinite(arrhenius_slope(est))


def test_mfpt_all_censored_is_reported(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    est = mean_first_passage(well_k0, pts[0], pts[2], [0.01], 100, 1e-2, 1.0)
    assert np.isnan(est[0].mean) and est[0].n_censored == 100


def test_mfpt_rejects_small_ensembles(well_k0):
    pts = find_critical_points(well_k0, BOX).points
    with pytest.raises(FieldError):
        mean_first_passage(well_k0, pts[0], pts[2], [0.1], 10, 1e-2, 10.0)


def test_energy_identity_second_order(well_k05):
    dec = analytic_decomposition(well_k05)
    coarse = energy_identity_check(integrate_deterministic(well_k05, [0.1, 0.1], 20.0, 1e-3), dec)
    fine = energy_identity_check(integrate_deterministic(well_k05, [0.1, 0.1], 20.0, 5e-4), dec)
    assert coarse.residual <= 1e-4
    assert coarse.residual / fine.residual >= 2.0
    assert coarse.margin >= -1e-4


def test_energy_identity_at_rest(well_k05):
    traj = integrate_deterministic(well_k05, [0.0, 0.0], 1.0, 1e-2)
    bal = energy_identity_check(traj, analytic_decomposition(well_k05))
    assert (bal.kinetic, bal.potential_drop, bal.solenoidal_work) == (0.0, 0.0, 0.0)


def test_energy_identity_gradient_field(well_k0):
    traj = integrate_deterministic(well_k0, [0.2, 0.5], 5.0, 1e-3)
    with_abar = energy_identity_check(traj, (well_k0.eval_potential, well_k0.eval_solenoidal))
    without = energy_identity_check(traj, (well_k0.eval_potential, None))
    assert with_abar.residual == without.residual


def test_energy_identity_needs_parts(well_k0):
    traj = integrate_deterministic(well_k0, [0.2, 0.5], 0.1, 1e-2)
    with pytest.raises(FieldError):
        energy_identity_check(traj, None)


def test_trajectory_csv(tmp_path, contracting):
    traj = integrate_deterministic(contracting, [1.0, 0.5], 0.02, 1e-2)
    out = tmp_path / "t.csv"
    traj.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,p1,p2" and len(lines) == 4
