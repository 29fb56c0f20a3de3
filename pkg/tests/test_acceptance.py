"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Each test records a ``criterion N: PASS|FAIL ...`` line shown in the
terminal summary, and prints it immediately as well.
"""

from __future__ import annotations

import filecmp
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from tatonnement import cli
from tatonnement.critical import find_critical_points
from tatonnement.dynamics import (
    NoiseSpec,
    arrhenius_slope,
    detect_transitions,
    energy_identity_check,
    integrate_ensemble,
    integrate_deterministic,
    mean_first_passage,
    run_ensemble,
    saddle_passage_fraction,
    simulate_sde,
)
from tatonnement.field import AppendixParams, make_appendix_field, make_polynomial_field
from tatonnement.hodge import GridSpec, compare_with_analytic, decompose_on_grid
from tatonnement.paths import (
    PiecewisePath,
    appendix_paths,
    highest_point,
    minimize_action,
    onsager_machlup_action,
    reversal_check,
)

from conftest import ACCEPTANCE_LINES

BOX = [[-2.0, 2.0], [-2.0, 2.0]]


class Criterion:
    """Collects named checks and elapsed time; reports one line."""

    def __init__(self, number: int, budget: float | None):
        self.number = number
        self.budget = budget
        self.checks: list[tuple[str, bool]] = []
        self.start = time.perf_counter()

    def check(self, label: str, ok) -> None:
        self.checks.append((label, bool(ok)))

    def finish(self) -> None:
        elapsed = time.perf_counter() - self.start
        if self.budget is not None:
            self.check(f"runtime {elapsed:.2f}s < {self.budget:g}s", elapsed < self.budget)
        failed = [label for label, ok in self.checks if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = "; ".join(label for label, _ in self.checks) if not failed else "failed: " + "; ".join(failed)
        line = f"criterion {self.number}: {status} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failed, line


def test_criterion_01_equilibria():
    c = Criterion(1, 1.0)
    params = AppendixParams(1.0, 1.0, 0.5)
    f = make_appendix_field(params)
    pts = find_critical_points(f, BOX)
    lo, hi = params.wells()
    locs = np.array([p.location for p in pts])
    c.check("three points", len(pts) == 3)
    if len(pts) == 3:
        c.check("wells at (+-0.8660254, -+0.4330127)", np.allclose(locs[[0, 2]], [[-0.8660254, 0.4330127], [0.8660254, -0.4330127]], atol=1e-7))
        c.check("closed form to 1e-8", np.max(np.abs(locs - [lo, [0, 0], hi])) <= 1e-8)
    c.check("residuals <= 1e-10", all(p.residual <= 1e-10 for p in pts))
    c.check("indices {0,0,1}", sorted(p.index for p in pts) == [0, 0, 1])
    c.finish()


def test_criterion_02_path_integrals():
    c = Criterion(2, 1.0)
    rep = appendix_paths(AppendixParams(1.0, 1.0, 0.5))
    c.check("A = -0.75", abs(rep.integral_a_quadrature + 0.75) <= 1e-10)
    c.check("B = +0.75", abs(rep.integral_b_quadrature - 0.75) <= 1e-10)
    c.check(
        "closed form vs quadrature 1e-10",
        max(abs(rep.integral_a_quadrature - rep.integral_a_closed), abs(rep.integral_b_quadrature - rep.integral_b_closed)) <= 1e-10,
    )
    c.check("favored B", rep.favored == "B")
    grid = np.linspace(0.5, 2.5, 5)
    signs_ok, count = True, 0
    for a, b, k in itertools.product(grid, grid, grid * 0.4):
        params = AppendixParams(a, b, k)
        if not params.two_well:
            continue
        count += 1
        r = appendix_paths(params)
        signs_ok &= r.integral_a_quadrature < 0 < r.integral_b_quadrature
    c.check(f"signs on {count} lattice points", signs_ok and count > 60)
    c.finish()


def test_criterion_03_energy_identity():
    c = Criterion(3, 30.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.5))
    parts = (f.eval_potential, f.eval_solenoidal)
    p0s = np.random.default_rng(303).uniform(-1.5, 1.5, (50, 2))
    coarse = [energy_identity_check(t, parts) for t in integrate_ensemble(f, p0s, 20.0, 1e-3)]
    fine = [energy_identity_check(t, parts) for t in integrate_ensemble(f, p0s, 20.0, 5e-4)]
    worst = max(b.residual for b in coarse)
    ratio = min(b.residual / max(g.residual, 1e-300) for b, g in zip(coarse, fine))
    margin = min(b.margin for b in coarse)
    c.check(f"max residual {worst:.2e} <= 1e-4", worst <= 1e-4)
    c.check(f"min reduction {ratio:.2f} >= 2", ratio >= 2.0)
    c.check(f"min margin {margin:.3g} >= -1e-4", margin >= -1e-4)
    c.finish()


def test_criterion_04_hodge():
    c = Criterion(4, 60.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.5))
    errs = {}
    for n in (129, 257):
        res = decompose_on_grid(f, GridSpec(BOX, (n, n)))
        cmp = compare_with_analytic(res, f)
        errs[n] = (cmp.potential_error, cmp.solenoidal_error, res.divergence_residual)
    v, a, div = errs[129]
    c.check(f"V error {v:.2e} <= 5e-3", v <= 5e-3)
    c.check(f"Abar error {a:.2e} <= 5e-3", a <= 5e-3)
    c.check(f"divergence {div:.1e} <= 1e-6", div <= 1e-6)
    c.check(f"V error shrinks {v / errs[257][0]:.2f}x >= 2", v / errs[257][0] >= 2.0)
    c.check("Abar error does not grow", errs[257][1] <= max(a, 1e-9))
    c.finish()


def test_criterion_05_brownian():
    c = Criterion(5, 60.0)
    zero = make_polynomial_field(2, [[-50.0, 50.0]] * 2, drift=[[], []])
    res = run_ensemble(zero, NoiseSpec.isotropic(0.01, 2, seed=505), [0.0, 0.0], 10_000, 10.0, 1e-2, record_times=[10.0])
    var = res.recorded[0].var(axis=0)
    c.check(f"variances {var.round(4).tolist()} within 5% of 0.1", np.all(np.abs(var - 0.1) <= 0.005))
    c.finish()


# shared with the optional large-noise check below
_MFPT: dict = {}


def test_criterion_06_arrhenius():
    c = Criterion(6, 15 * 60.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.0))
    pts = find_critical_points(f, BOX).points
    eps = [0.125, 0.10, 0.08]
    est = mean_first_passage(f, pts[0], pts[2], eps, 500, 1e-2, 1e5, seed=2024)
    _MFPT["est"] = est
    logs = np.log([e.mean for e in est])
    lower = np.log([e.mean - e.stderr for e in est])
    upper = np.log([e.mean + e.stderr for e in est])
    c.check("no censored runs", all(e.n_censored == 0 for e in est))
    c.check("ln MFPT increasing in 1/eps", np.all(np.diff(logs) > 0))
    c.check("standard-error bands disjoint", np.all(upper[:-1] < lower[1:]))
    slope = arrhenius_slope(est)
    c.check(f"slope {slope:.3f} within 20% of 0.5", abs(slope - 0.5) <= 0.1)
    c.finish()


def _downhill_oracle(f) -> float:
    """Unit-noise action of the time-reversed relaxation from the saddle into the right well."""
    traj = integrate_deterministic(f, [1e-6, 0.0], 40.0, 1e-3)
    nodes = traj.states[::100][::-1]
    return onsager_machlup_action(PiecewisePath.uniform(nodes, 40.0), f, 1.0).total


def test_criterion_07_instanton():
    c = Criterion(7, 120.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.0))
    oracle = _downhill_oracle(f)
    res = minimize_action(f, 1.0, [-1.0, 0.0], [1.0, 0.0], n_nodes=128, T=40.0, saddle=[0.0, 0.0])
    s = res.action.total
    top = np.linalg.norm(highest_point(res.path, f))
    c.check("converged", res.converged)
    c.check(f"action {s:.5f} within 10% of oracle {oracle:.5f}", abs(s - oracle) <= 0.1 * oracle)
    c.check(f"action within 10% of 0.5", abs(s - 0.5) <= 0.05)
    c.check(f"max-V point {top:.2e} from saddle <= 0.05", top <= 0.05)
    c.finish()


def test_criterion_08_reversal_identity():
    c = Criterion(8, 10.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.5))
    rng = np.random.default_rng(808)
    s = np.linspace(0.0, 1.0, 20_001)[:, None]
    worst = 0.0
    for _ in range(100):
        p0, p1 = rng.uniform(-1.5, 1.5, (2, 2))
        bump = sum(rng.normal(0.0, 0.3, 2) * np.sin((j + 1) * np.pi * s) for j in range(3))
        path = PiecewisePath.uniform((1 - s) * p0 + s * p1 + bump, rng.uniform(2.0, 10.0))
        worst = max(worst, reversal_check(path, f, rng.uniform(0.1, 1.0)).relative_error)
    c.check(f"worst relative error {worst:.1e} <= 1e-6", worst <= 1e-6)
    c.finish()


def test_criterion_09_saddle_passage():
    c = Criterion(9, 300.0)
    f = make_appendix_field(AppendixParams(1.0, 1.0, 0.0))
    pts = find_critical_points(f, BOX).points
    traj = simulate_sde(f, NoiseSpec.isotropic(0.12, 2, seed=909), [-1.0, 0.0], 5e4, 1e-2)
    events = detect_transitions(traj, pts, 0.1, 0.3)
    frac = saddle_passage_fraction(events, 0.3)
    c.check("run not truncated", traj.status == "ok")
    c.check(f"{len(events)} events >= 5", len(events) >= 5)
    c.check(f"fraction within 0.3 of saddle {frac:.3f} >= 0.9", frac >= 0.9)
    c.finish()


SMOKE = """
name = "repro"
seed = 3
[field]
kind = "appendix"
a = 1.0
b = 1.0
k = 0.5
[search]
box = [[-2.0, 2.0], [-2.0, 2.0]]
[grid]
box = [[-2.0, 2.0], [-2.0, 2.0]]
resolution = 33
[noise]
eps = 0.2
[integration]
dt = 1e-2
T = 200.0
p0 = [-0.8, 0.4]
[mfpt]
eps = [0.3, 0.25]
n = 100
t_cap = 500.0
start = [-0.87, 0.43]
target = [0.87, -0.43]
[path]
T = 5.0
straight = { from = [-1.0, 0.0], to = [1.0, 0.0], n = 41 }
[minimizer]
start = [-0.8660254037844386, 0.4330127018922193]
end = [0.8660254037844386, -0.4330127018922193]
n_nodes = 48
T = 20.0
[compare]
k = 0.6
"""


def test_criterion_10_reproducibility(tmp_path):
    c = Criterion(10, None)
    scenario = tmp_path / "repro.toml"
    scenario.write_text(SMOKE)
    for sub in cli.SUBCOMMANDS:
        codes = [
            cli.main([sub, str(scenario), "-o", str(tmp_path / run / sub), "-w", str(w)])
            for run, w in (("a", 1), ("b", 1), ("c", 2))
        ]
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir() if p.name != "manifest.json")
        same = all(
            filecmp.cmp(tmp_path / "a" / sub / n, tmp_path / other / sub / n, shallow=False)
            for n in names
            for other in ("b", "c")
        )
        c.check(f"{sub}: {len(names)} files identical", codes == [0, 0, 0] and names and same)
    c.finish()
