"""Batch front end: ``tatonnement <subcommand> SCENARIO.toml``.

Each run writes ``result.json``, CSV plot data and ``manifest.json`` into
the output directory.  Result files are byte-identical for identical
scenarios; wall-clock timestamps live only in the manifest.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .critical import CriticalPoint, compare_scenarios, find_critical_points
from .dynamics import (
    NoiseSpec,
    arrhenius_slope,
    detect_transitions,
    energy_identity_check,
    integrate_deterministic,
    mean_first_passage,
    saddle_passage_fraction,
    simulate_sde,
)
from .field import AppendixParams, FieldError, FieldSpec
from .hodge import DecompositionError, GridSpec, compare_with_analytic, decompose_on_grid, write_decomposition_csv
from .paths import PiecewisePath, appendix_paths, highest_point, minimize_action, reversal_check
from .scenario import SUBCOMMANDS, ScenarioError, build_field, load_scenario, load_toml, resolve, scenario_hash

OUTPUT_ENV = "TATONNEMENT_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SNAP_RADIUS = 0.05

log = logging.getLogger("tatonnement")


def _clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


class Run:
    """Collects outputs for one subcommand execution."""

    def __init__(self, out_dir: Path, cfg: dict, fld: FieldSpec, workers: int):
        self.out_dir = out_dir
        self.cfg = cfg
        self.field = fld
        self.workers = workers
        self.files: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out_dir / name

    def points(self) -> list[CriticalPoint]:
        s = self.cfg["search"]
        box = s.get("box", self.field.box.tolist())
        report = find_critical_points(self.field, box, s["multistart"], s["tol"])
        return list(report)

    def snap(self, points: list[CriticalPoint], location: list[float], where: str) -> CriticalPoint:
        """The critical point within SNAP_RADIUS of a configured location."""
        if points:
            d = [float(np.linalg.norm(cp.location - np.asarray(location))) for cp in points]
            i = int(np.argmin(d))
            if d[i] <= SNAP_RADIUS:
                return points[i]
        raise ScenarioError([(where, f"no critical point within {SNAP_RADIUS} of {location}")])


# ---------------------------------------------------------------------------
# Experiments: each returns the "results" payload of result.json
# ---------------------------------------------------------------------------


def _critical_points(run: Run) -> dict:
    s = run.cfg["search"]
    box = s.get("box", run.field.box.tolist())
    report = find_critical_points(run.field, box, s["multistart"], s["tol"])
    n = run.field.dimension
    _write_rows(
        run.path("critical_points.csv"),
        [f"p{i + 1}" for i in range(n)] + ["index", "stability", "residual"],
        [list(cp.location) + [cp.index, cp.stability, cp.residual] for cp in report],
    )
    run.summary = {"n_points": len(report), "indices": [cp.index for cp in report]}
    return {
        "parameters": run.field.parameters,
        "points": [cp.to_record() for cp in report],
        "search": {
            "starts": report.starts,
            "converged": report.converged,
            "abandoned_singular": report.abandoned_singular,
            "abandoned_other": report.abandoned_other,
            "diagnostic": report.diagnostic,
        },
    }


def _decompose(run: Run) -> dict:
    g = run.cfg["grid"]
    grid = GridSpec(np.asarray(g.get("box", run.field.box.tolist())), tuple(g["resolution"]))
    res = decompose_on_grid(run.field, grid, bc=g["bc"], tol=g["tol"])
    write_decomposition_csv(res, run.path("decomposition.csv"))
    out = {
        "boundary_condition": res.boundary_condition,
        "gauge": res.gauge_note,
        "reconstruction_residual": res.reconstruction_residual,
        "divergence_residual": res.divergence_residual,
        "poisson_residual": res.poisson_residual,
    }
    if run.field.potential is not None and run.field.solenoidal is not None:
        out["analytic_comparison"] = compare_with_analytic(res, run.field).to_record()
    run.summary = {k: out[k] for k in ("divergence_residual", "poisson_residual")}
    return out


def _subsample(n_rows: int, max_rows: int) -> np.ndarray:
    stride = max(1, math.ceil(n_rows / max_rows))
    idx = np.arange(0, n_rows, stride)
    return idx if idx[-1] == n_rows - 1 else np.append(idx, n_rows - 1)


def _write_trajectory(run: Run, name: str, traj, max_rows: int) -> int:
    idx = _subsample(traj.times.size, max_rows)
    n = traj.states.shape[1]
    _write_rows(
        run.path(name),
        ["t"] + [f"p{i + 1}" for i in range(n)],
        ([traj.times[i]] + list(traj.states[i]) for i in idx),
    )
    return int(idx.size)


def _noise(cfg: dict) -> NoiseSpec:
    nz = cfg["noise"]
    return NoiseSpec(np.asarray(nz["covariance"]), int(nz["seed"]))


def _simulate(run: Run) -> dict:
    it = run.cfg["integration"]
    if "noise" in run.cfg:
        traj = simulate_sde(run.field, _noise(run.cfg), it["p0"], it["T"], it["dt"])
    else:
        traj = integrate_deterministic(run.field, it["p0"], it["T"], it["dt"])
    rows = _write_trajectory(run, "trajectory.csv", traj, it["csv_max_rows"])
    out = {
        "scheme": traj.scheme,
        "status": traj.status,
        "steps": int(traj.times.size - 1),
        "final_time": float(traj.times[-1]),
        "final_state": traj.final,
        "csv_rows": rows,
    }
    if "noise" not in run.cfg and run.field.potential is not None and run.field.solenoidal is not None:
        bal = energy_identity_check(traj, (run.field.eval_potential, run.field.eval_solenoidal))
        out["energy_balance"] = {
            "kinetic": bal.kinetic,
            "potential_drop": bal.potential_drop,
            "solenoidal_work": bal.solenoidal_work,
            "residual": bal.residual,
            "positivity_margin": bal.margin,
        }
    run.summary = {"status": traj.status, "final_state": traj.final}
    return out


def _transitions(run: Run) -> dict:
    it, det = run.cfg["integration"], run.cfg["detection"]
    points = run.points()
    traj = simulate_sde(run.field, _noise(run.cfg), it["p0"], it["T"], it["dt"])
    events = detect_transitions(traj, points, det["capture"], det["release"])
    frac = saddle_passage_fraction(events, det["saddle_radius"])
    _write_rows(
        run.path("transitions.csv"),
        ["from_point", "to_point", "departure_time", "arrival_time", "min_saddle_distance"],
        (
            [e.from_point, e.to_point, e.departure_time, e.arrival_time,
             min(e.min_distance_to_saddle.values(), default=float("nan"))]
            for e in events
        ),
    )
    rows = _write_trajectory(run, "trajectory.csv", traj, it["csv_max_rows"])
    run.summary = {"n_events": len(events), "saddle_passage_fraction": frac}
    return {
        "points": [cp.to_record() for cp in points],
        "status": traj.status,
        "steps": int(traj.times.size - 1),
        "events": [e.to_record() for e in events],
        "saddle_passage_fraction": frac,
        "csv_rows": rows,
    }


def _mfpt(run: Run) -> dict:
    m = run.cfg["mfpt"]
    points = run.points()
    start = run.snap(points, m["start"], "mfpt.start")
    target = run.snap(points, m["target"], "mfpt.target")
    est = mean_first_passage(
        run.field, start, target, m["eps"], m["n"], m["dt"], m["t_cap"],
        seed=run.cfg["seed"], capture_radius=m["capture"], workers=run.workers,
    )
    finite = [e for e in est if math.isfinite(e.mean)]
    slope = arrhenius_slope(finite) if len(finite) >= 2 else float("nan")
    _write_rows(
        run.path("mfpt.csv"),
        ["eps", "inv_eps", "mean", "stderr", "log_mean", "n_runs", "n_censored", "n_lost"],
        (
            [e.eps, 1.0 / e.eps, e.mean, e.stderr, math.log(e.mean) if e.mean > 0 else float("nan"),
             e.n_runs, e.n_censored, e.n_lost]
            for e in est
        ),
    )
    run.summary = {"arrhenius_slope": slope, "means": [e.mean for e in est]}
    return {
        "start": start.to_record(),
        "target": target.to_record(),
        "estimates": [e.to_record() for e in est],
        "arrhenius_slope": slope,
    }


def _path_from_config(p: dict) -> PiecewisePath:
    if "nodes" in p:
        nodes = np.asarray(p["nodes"], dtype=float)
    else:
        st = p["straight"]
        s = np.linspace(0.0, 1.0, st["n"])[:, None]
        nodes = (1 - s) * np.asarray(st["from"]) + s * np.asarray(st["to"])
    return PiecewisePath.uniform(nodes, p["T"]).subdivided(p["subdivide"])


def _path_action(run: Run) -> dict:
    p = run.cfg["path"]
    path = _path_from_config(p)
    check = reversal_check(path, run.field, p["eps"])
    path.write_csv(run.path("path.csv"))
    run.summary = {"forward_action": check.forward, "reverse_action": check.reverse}
    return {"nodes": int(path.nodes.shape[0]), **check.to_record()}


def _minimize_action(run: Run) -> dict:
    mz = run.cfg["minimizer"]
    res = minimize_action(
        run.field, mz["eps"], mz["start"], mz["end"], mz["n_nodes"], mz["T"],
        mz["max_iters"], mz["tol"], saddle=mz.get("saddle"),
    )
    res.path.write_csv(run.path("instanton.csv"))
    _write_rows(run.path("action_history.csv"), ["iteration", "action"], enumerate(res.history))
    out = {
        "action": res.action.total,
        "iterations": res.iterations,
        "converged": res.converged,
    }
    if run.field.potential is not None:
        out["highest_point"] = highest_point(res.path, run.field)
    run.summary = {"action": res.action.total, "converged": res.converged}
    return out


def _appendix_demo(run: Run) -> dict:
    f = run.cfg["field"]
    params = AppendixParams(f["a"], f["b"], f["k"], tuple(f["reference_point"]))
    report = appendix_paths(params)
    points = run.points()
    rows = []
    for label, path in (("A", report.path_a), ("B", report.path_b)):
        rows += [[label, i] + list(node) for i, node in enumerate(path.nodes)]
    _write_rows(run.path("appendix_paths.csv"), ["path", "node", "p1", "p2"], rows)
    run.summary = {"favored": report.favored, "n_points": len(points)}
    return {"points": [cp.to_record() for cp in points], "paths": report.to_record()}


def _compare(run: Run) -> dict:
    cp = run.cfg["compare"]
    base = run.field.parameters
    if "parameters" in cp:
        alt = np.asarray(cp["parameters"], dtype=float)
    else:
        names = ["a", "b", "k"]
        alt = np.array([cp.get(nm, base[i]) for i, nm in enumerate(names)], dtype=float)
    s = run.cfg["search"]
    comp = compare_scenarios(run.field, base, alt, s.get("box"), s["tol"], s["multistart"])
    n = run.field.dimension
    _write_rows(
        run.path("compare.csv"),
        [f"base_p{i + 1}" for i in range(n)] + [f"alt_p{i + 1}" for i in range(n)]
        + ["base_index", "alt_index", "displacement"],
        (
            list(m.base.location) + list(m.alternative.location)
            + [m.base.index, m.alternative.index, m.displacement]
            for m in comp.matches
        ),
    )
    run.summary = {
        "matched": len(comp.matches),
        "unmatched_base": len(comp.unmatched_base),
        "unmatched_alternative": len(comp.unmatched_alternative),
    }
    return comp.to_record()


EXPERIMENTS: dict[str, Callable[[Run], dict]] = {
    "critical-points": _critical_points,
    "decompose": _decompose,
    "simulate": _simulate,
    "transitions": _transitions,
    "mfpt": _mfpt,
    "path-action": _path_action,
    "minimize-action": _minimize_action,
    "appendix-demo": _appendix_demo,
    "compare-scenarios": _compare,
}


def _check_inputs(cfg: dict, fld: FieldSpec, subcommand: str) -> None:
    """Config checks that need the built field (points inside its box)."""
    bad = []

    def inside(loc, where):
        if loc is not None and not bool(np.all(fld.in_box(np.asarray(loc, dtype=float)))):
            bad.append((where, f"{loc} lies outside the field box {fld.box.tolist()}"))

    if subcommand in ("simulate", "transitions"):
        inside(cfg["integration"]["p0"], "integration.p0")
    if subcommand == "minimize-action":
        inside(cfg["minimizer"]["start"], "minimizer.start")
        inside(cfg["minimizer"]["end"], "minimizer.end")
    if subcommand == "compare-scenarios" and "parameters" in cfg["compare"]:
        if len(cfg["compare"]["parameters"]) != fld.parameters.size:
            bad.append(("compare.parameters", f"needs {fld.parameters.size} entries"))
    if subcommand == "compare-scenarios" and "parameters" not in cfg["compare"] and cfg["field"]["kind"] != "appendix":
        bad.append(("compare", "named overrides (a, b, k) need an appendix field; give 'parameters'"))
    if bad:
        raise ScenarioError(bad)


def output_dir(cli_value: str | None, cfg: dict, subcommand: str) -> Path:
    if cli_value:
        return Path(cli_value)
    base = os.environ.get(OUTPUT_ENV)
    root = Path(base) if base else Path("results")
    return root / cfg["name"] / subcommand


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(subcommand: str, scenario_file: str | Path, out: str | Path | None = None, workers: int = 1) -> int:
    """Execute one experiment; returns the process exit code."""
    if subcommand not in EXPERIMENTS:
        print(f"error: unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_scenario(scenario_file, [subcommand])
        fld = build_field(cfg)
        _check_inputs(cfg, fld, subcommand)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_IO

    out_dir = output_dir(None if out is None else str(out), cfg, subcommand)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO

    started = datetime.now(timezone.utc).isoformat()
    runner = Run(out_dir, cfg, fld, workers)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            results = EXPERIMENTS[subcommand](runner)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: writing results: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FieldError, DecompositionError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: numerical failure in {subcommand}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    digest = scenario_hash(cfg)
    payload = {
        "version": __version__,
        "subcommand": subcommand,
        "scenario": cfg,
        "scenario_hash": digest,
        "results": results,
    }
    try:
        (out_dir / "result.json").write_text(_dumps(payload))
        files = ["result.json"] + runner.files
        manifest = {
            "version": __version__,
            "subcommand": subcommand,
            "scenario_file": str(scenario_file),
            "scenario_hash": digest,
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "workers": workers,
            "files": [{"name": f, "sha256": _sha256(out_dir / f), "bytes": (out_dir / f).stat().st_size} for f in files],
            "summary": runner.summary,
        }
        (out_dir / "manifest.json").write_text(_dumps(manifest))
    except OSError as exc:
        print(f"error: writing results: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{subcommand}: wrote {len(files)} file(s) to {out_dir}")
    return EXIT_OK


def validate(scenario_file: str | Path, experiments: list[str] | None = None) -> list[tuple[str, str]]:
    """Every violation in the scenario, as ``(config path, message)``.  Raises OSError if unreadable."""
    from .scenario import tomllib

    try:
        raw = load_toml(scenario_file)
    except tomllib.TOMLDecodeError as exc:
        return [("scenario", f"TOML parse error: {exc}")]
    cfg, violations = resolve(raw, experiments)
    if violations:
        return violations
    try:
        fld = build_field(cfg)
    except FieldError as exc:
        return [("field", str(exc))]
    found = []
    for sub in cfg.get("experiments", []) if experiments is None else experiments:
        try:
            _check_inputs(cfg, fld, sub)
        except ScenarioError as exc:
            found += exc.violations
    return found


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tatonnement", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("scenario", help="scenario TOML file")
        p.add_argument("-o", "--output-dir", help=f"output directory (else ${OUTPUT_ENV}/<name>/<subcommand>)")
        p.add_argument("-w", "--workers", type=int, default=1, help="ensemble worker processes")
    p = sub.add_parser("validate", help="check a scenario without running it")
    p.add_argument("scenario")
    p.add_argument("-e", "--experiment", action="append", choices=SUBCOMMANDS,
                   help="also check blocks needed by this experiment (repeatable)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "validate":
        try:
            violations = validate(args.scenario, args.experiment)
        except OSError as exc:
            print(f"error: cannot read scenario: {exc}", file=sys.stderr)
            return EXIT_IO
        report = {"scenario": args.scenario, "violations": [{"path": p, "message": m} for p, m in violations]}
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK if not violations else EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, args.scenario, args.output_dir, args.workers)


if __name__ == "__main__":
    sys.exit(main())
