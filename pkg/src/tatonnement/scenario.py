"""Scenario files: TOML loading, default filling and exhaustive validation.

A scenario names a field (the double-well family or polynomial tables) and
carries one block per experiment.  :func:`resolve` returns the fully
defaulted configuration together with every violation found, each tagged
with its config path, so nothing is reported first-only.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .field import AppendixParams, FieldError, FieldSpec, make_appendix_field, make_polynomial_field

SUBCOMMANDS = (
    "critical-points",
    "decompose",
    "simulate",
    "transitions",
    "mfpt",
    "path-action",
    "minimize-action",
    "appendix-demo",
    "compare-scenarios",
)

DEFAULTS = {
    "seed": 0,
    "search": {"multistart": 16, "tol": 1e-10},
    "grid": {"resolution": [129, 129], "bc": "auto", "tol": 1e-10},
    "integration": {"dt": 1e-3, "T": 50.0, "csv_max_rows": 20000},
    "detection": {"capture": 0.1, "release": 0.3, "saddle_radius": 0.3},
    "mfpt": {"dt": 1e-2, "t_cap": 1e5, "n": 500, "capture": 0.1},
    "minimizer": {"n_nodes": 128, "T": 40.0, "eps": 1.0, "max_iters": 200000, "tol": 1e-12},
    "path": {"eps": 1.0, "subdivide": 1},
}

# blocks each subcommand needs beyond [field]
REQUIRED = {
    "critical-points": [],
    "decompose": [],
    "simulate": ["integration"],
    "transitions": ["integration", "noise"],
    "mfpt": ["mfpt"],
    "path-action": ["path"],
    "minimize-action": ["minimizer"],
    "appendix-demo": [],
    "compare-scenarios": ["compare"],
}


class ScenarioError(ValueError):
    """Configuration problems; ``violations`` lists ``(config path, message)`` pairs."""

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = violations
        lines = "\n".join(f"  {p}: {m}" for p, m in violations)
        super().__init__(f"{len(violations)} scenario violation(s):\n{lines}")


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def scenario_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


class _Checker:
    def __init__(self) -> None:
        self.violations: list[tuple[str, str]] = []

    def err(self, path: str, msg: str) -> None:
        self.violations.append((path, msg))

    def number(self, block: dict, key: str, path: str, *, positive=False, nonneg=False,
               integer=False, required=True, minimum=None) -> None:
        if key not in block:
            if required:
                self.err(f"{path}.{key}", "missing")
            return
        v = block[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.err(f"{path}.{key}", f"must be a finite number, got {v!r}")
            return
        if integer and int(v) != v:
            self.err(f"{path}.{key}", f"must be an integer, got {v!r}")
            return
        block[key] = int(v) if integer else float(v)
        if positive and not v > 0:
            self.err(f"{path}.{key}", f"must be > 0, got {v!r}")
        if nonneg and v < 0:
            self.err(f"{path}.{key}", f"must be >= 0, got {v!r}")
        if minimum is not None and v < minimum:
            self.err(f"{path}.{key}", f"must be >= {minimum}, got {v!r}")

    def vector(self, block: dict, key: str, path: str, n: int | None, required=True) -> None:
        if key not in block:
            if required:
                self.err(f"{path}.{key}", "missing")
            return
        v = block[key]
        if not isinstance(v, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v
        ):
            self.err(f"{path}.{key}", f"must be a list of finite numbers, got {v!r}")
            return
        if n is not None and len(v) != n:
            self.err(f"{path}.{key}", f"must have {n} entries, got {len(v)}")
            return
        block[key] = [float(x) for x in v]

    def box(self, block: dict, key: str, path: str, n: int | None, required=True) -> None:
        if key not in block:
            if required:
                self.err(f"{path}.{key}", "missing")
            return
        v = block[key]
        ok = isinstance(v, list) and all(
            isinstance(r, list) and len(r) == 2
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in r)
            for r in v
        )
        if not ok:
            self.err(f"{path}.{key}", "must be a list of [min, max] pairs")
            return
        if n is not None and len(v) != n:
            self.err(f"{path}.{key}", f"needs {n} axes, got {len(v)}")
            return
        for i, (lo, hi) in enumerate(v):
            if not lo < hi:
                self.err(f"{path}.{key}[{i}]", f"min < max violated ({lo} >= {hi})")
        block[key] = [[float(lo), float(hi)] for lo, hi in v]


def _dimension(cfg: dict) -> int | None:
    f = cfg.get("field", {})
    if f.get("kind") == "appendix":
        return 2
    d = f.get("dimension")
    return d if isinstance(d, int) and not isinstance(d, bool) and d >= 1 else None


def _fill(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    out.setdefault("seed", DEFAULTS["seed"])
    for block, values in DEFAULTS.items():
        if block == "seed":
            continue
        # defaults only fill blocks the scenario declares, except the always-used ones
        if block in out or block in ("search", "detection"):
            target = out.setdefault(block, {})
            if isinstance(target, dict):
                for k, v in values.items():
                    target.setdefault(k, copy.deepcopy(v))
    if "grid" not in out:
        out["grid"] = copy.deepcopy(DEFAULTS["grid"])
    return out


def _check_field(c: _Checker, f: Any) -> None:
    if not isinstance(f, dict):
        c.err("field", "missing [field] block")
        return
    kind = f.get("kind")
    if kind == "appendix":
        for key in ("a", "b"):
            c.number(f, key, "field", positive=True)
        c.number(f, "k", "field")
        f.setdefault("reference_point", [0.0, 0.0])
        c.vector(f, "reference_point", "field", 2)
        c.box(f, "box", "field", 2, required=False)
        if not any(p.startswith("field.") for p, _ in c.violations):
            a, b, k = f["a"], f["b"], f["k"]
            if a * a - k * k / b <= 0:
                c.err("field", f"a^2 - k^2/b = {a * a - k * k / b:.6g} <= 0: not in the two-well regime")
    elif kind == "polynomial":
        c.number(f, "dimension", "field", integer=True, minimum=1)
        n = f.get("dimension") if isinstance(f.get("dimension"), int) else None
        c.box(f, "box", "field", n)
        if "drift" not in f and "potential" not in f:
            c.err("field", "polynomial field needs 'drift' or 'potential' tables")
        for key in ("drift", "solenoidal"):
            if key in f:
                tables = f[key]
                if not isinstance(tables, list) or (n is not None and len(tables) != n):
                    c.err(f"field.{key}", f"needs one term table per component ({n})")
                    continue
                for i, t in enumerate(tables):
                    _check_terms(c, t, f"field.{key}[{i}]", n)
        if "potential" in f:
            _check_terms(c, f["potential"], "field.potential", n)
    else:
        c.err("field.kind", f"must be 'appendix' or 'polynomial', got {kind!r}")


def _check_terms(c: _Checker, terms: Any, path: str, n: int | None) -> None:
    if not isinstance(terms, list):
        c.err(path, "must be a list of [coef, e_1..e_n] terms")
        return
    for j, t in enumerate(terms):
        if not (isinstance(t, list) and (n is None or len(t) == n + 1)):
            c.err(f"{path}[{j}]", f"must be [coef, e_1..e_{n}]")
            continue
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in t):
            c.err(f"{path}[{j}]", "entries must be numbers")
            continue
        if any(int(e) != e or e < 0 for e in t[1:]):
            c.err(f"{path}[{j}]", "exponents must be non-negative integers")


def _check_blocks(c: _Checker, cfg: dict, n: int | None) -> None:
    c.number(cfg, "seed", "scenario", integer=True, nonneg=True)
    s = cfg.get("search", {})
    c.box(s, "box", "search", n, required=False)
    c.number(s, "multistart", "search", integer=True, minimum=1)
    c.number(s, "tol", "search", positive=True)
    g = cfg.get("grid", {})
    c.box(g, "box", "grid", n, required=False)
    if "resolution" in g:
        r = g["resolution"]
        if isinstance(r, int) and not isinstance(r, bool):
            g["resolution"] = [r] * (n or 1)
        elif not (isinstance(r, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in r)):
            c.err("grid.resolution", "must be an integer or a list of integers")
        if isinstance(g["resolution"], list) and any(x < 8 for x in g["resolution"] if isinstance(x, int)):
            c.err("grid.resolution", "must be >= 8 per axis")
        elif n is not None and isinstance(g["resolution"], list) and len(g["resolution"]) != n:
            c.err("grid.resolution", f"needs {n} entries")
    if g.get("bc", "auto") not in ("auto", "flux", "potential"):
        c.err("grid.bc", f"must be auto, flux or potential, got {g.get('bc')!r}")
    c.number(g, "tol", "grid", positive=True)

    if "integration" in cfg:
        it = cfg["integration"]
        c.number(it, "dt", "integration", positive=True)
        c.number(it, "T", "integration", positive=True)
        c.vector(it, "p0", "integration", n)
        c.number(it, "csv_max_rows", "integration", integer=True, minimum=2)
        if all(isinstance(it.get(k), float) for k in ("dt", "T")) and it["T"] < it["dt"]:
            c.err("integration.T", "must be >= integration.dt")

    if "noise" in cfg:
        nz = cfg["noise"]
        if "eps" in nz and "covariance" in nz:
            c.err("noise", "give either eps or covariance, not both")
        elif "eps" in nz:
            c.number(nz, "eps", "noise", nonneg=True)
            if isinstance(nz.get("eps"), float) and n is not None:
                nz["covariance"] = (nz.pop("eps") * np.eye(n)).tolist()
        if "covariance" not in nz:
            c.err("noise.covariance", "missing (or give noise.eps)")
        else:
            _check_covariance(c, nz, n)
        nz.setdefault("seed", cfg.get("seed", 0))
        c.number(nz, "seed", "noise", integer=True, nonneg=True)

    d = cfg.get("detection", {})
    c.number(d, "capture", "detection", positive=True)
    c.number(d, "release", "detection", positive=True)
    c.number(d, "saddle_radius", "detection", positive=True)
    if isinstance(d.get("capture"), float) and isinstance(d.get("release"), float) and not d["release"] > d["capture"]:
        c.err("detection.release", "must exceed detection.capture")

    if "mfpt" in cfg:
        m = cfg["mfpt"]
        if not (isinstance(m.get("eps"), list) and m["eps"]):
            c.err("mfpt.eps", "must be a non-empty list of noise levels")
        else:
            c.vector(m, "eps", "mfpt", None)
            if any(e <= 0 for e in m.get("eps", []) if isinstance(e, float)):
                c.err("mfpt.eps", "noise levels must be > 0")
        c.number(m, "n", "mfpt", integer=True, minimum=100)
        c.number(m, "dt", "mfpt", positive=True)
        c.number(m, "t_cap", "mfpt", positive=True)
        c.number(m, "capture", "mfpt", positive=True)
        c.vector(m, "start", "mfpt", n)
        c.vector(m, "target", "mfpt", n)

    if "path" in cfg:
        p = cfg["path"]
        c.number(p, "eps", "path", positive=True)
        c.number(p, "T", "path", positive=True)
        c.number(p, "subdivide", "path", integer=True, minimum=1)
        if "nodes" in p:
            nodes = p["nodes"]
            if not (isinstance(nodes, list) and len(nodes) >= 2):
                c.err("path.nodes", "needs at least two nodes")
            else:
                for i, v in enumerate(nodes):
                    if not (isinstance(v, list) and (n is None or len(v) == n)
                            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
                        c.err(f"path.nodes[{i}]", f"must be a list of {n} numbers")
        elif "straight" in p:
            st = p["straight"]
            if not isinstance(st, dict):
                c.err("path.straight", "must be a table with from, to, n")
            else:
                c.vector(st, "from", "path.straight", n)
                c.vector(st, "to", "path.straight", n)
                c.number(st, "n", "path.straight", integer=True, minimum=2)
        else:
            c.err("path", "needs 'nodes' or a 'straight' table")

    if "minimizer" in cfg:
        mz = cfg["minimizer"]
        c.vector(mz, "start", "minimizer", n)
        c.vector(mz, "end", "minimizer", n)
        c.vector(mz, "saddle", "minimizer", n, required=False)
        c.number(mz, "n_nodes", "minimizer", integer=True, minimum=32)
        c.number(mz, "T", "minimizer", positive=True)
        c.number(mz, "eps", "minimizer", positive=True)
        c.number(mz, "max_iters", "minimizer", integer=True, minimum=1)
        c.number(mz, "tol", "minimizer")
        if isinstance(mz.get("start"), list) and mz.get("start") == mz.get("end"):
            c.err("minimizer.end", "must differ from minimizer.start")

    if "compare" in cfg:
        cp = cfg["compare"]
        if not isinstance(cp, dict) or not cp:
            c.err("compare", "needs 'parameters' or per-name overrides (a, b, k)")
        elif "parameters" in cp:
            c.vector(cp, "parameters", "compare", None)
        else:
            for key in cp:
                if key not in ("a", "b", "k"):
                    c.err(f"compare.{key}", "unknown parameter (expected a, b or k)")
                else:
                    c.number(cp, key, "compare")


def _check_covariance(c: _Checker, nz: dict, n: int | None) -> None:
    cov = nz["covariance"]
    try:
        arr = np.asarray(cov, dtype=float)
    except (TypeError, ValueError):
        c.err("noise.covariance", "must be a square matrix of numbers")
        return
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or (n is not None and arr.shape[0] != n):
        c.err("noise.covariance", f"must be a {n}x{n} matrix")
        return
    if not np.all(np.isfinite(arr)):
        c.err("noise.covariance", "entries must be finite")
        return
    asym = float(np.max(np.abs(arr - arr.T)))
    if asym > 1e-12:
        c.err("noise.covariance", f"symmetry invariant violated: max |S - S^T| = {asym:.3g} > 1e-12")
        return
    if float(np.min(np.linalg.eigvalsh(arr))) < -1e-12:
        c.err("noise.covariance", "must be positive semi-definite")
    nz["covariance"] = arr.tolist()


def resolve(raw: dict, subcommands: list[str] | tuple[str, ...] | None = None) -> tuple[dict, list[tuple[str, str]]]:
    """Default-fill and validate ``raw``; returns ``(resolved, violations)``.

    ``subcommands`` adds presence checks for the blocks those experiments
    need; when None, the scenario's own ``experiments`` list is used.
    """
    c = _Checker()
    if not isinstance(raw, dict):
        return {}, [("scenario", "must be a TOML table")]
    cfg = _fill(raw)
    if not isinstance(cfg.get("name", ""), str):
        c.err("name", "must be a string")
    cfg.setdefault("name", "scenario")
    _check_field(c, cfg.get("field"))
    n = _dimension(cfg)
    _check_blocks(c, cfg, n)

    requested = list(subcommands) if subcommands is not None else list(cfg.get("experiments", []))
    for sub in requested:
        if sub not in SUBCOMMANDS:
            c.err("experiments", f"unknown experiment {sub!r}")
            continue
        for block in REQUIRED[sub]:
            if block not in cfg:
                c.err(block, f"missing [{block}] block required by '{sub}'")
        if sub == "appendix-demo" and cfg.get("field", {}).get("kind") != "appendix":
            c.err("field.kind", "'appendix-demo' needs an appendix field")
    return cfg, c.violations


def load_scenario(path: str | Path, subcommands=None) -> dict:
    """Read, resolve and validate; raises :class:`ScenarioError` on any violation."""
    try:
        raw = load_toml(path)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([("scenario", f"TOML parse error: {exc}")]) from exc
    cfg, violations = resolve(raw, subcommands)
    if violations:
        raise ScenarioError(violations)
    try:
        build_field(cfg)
    except FieldError as exc:
        raise ScenarioError([("field", str(exc))]) from exc
    return cfg


def build_field(cfg: dict) -> FieldSpec:
    f = cfg["field"]
    if f["kind"] == "appendix":
        params = AppendixParams(f["a"], f["b"], f["k"], tuple(f["reference_point"]))
        return make_appendix_field(params, box=f.get("box"))
    return make_polynomial_field(
        f["dimension"],
        f["box"],
        drift=f.get("drift"),
        potential=f.get("potential"),
        solenoidal=f.get("solenoidal"),
        name=cfg.get("name", "polynomial"),
    )


def default_box(cfg: dict, block: str, field_: FieldSpec) -> list[list[float]]:
    box = cfg.get(block, {}).get("box")
    return box if box is not None else field_.box.tolist()


@dataclass
class Resolved:
    """Convenience view of a resolved scenario."""

    config: dict
    field: FieldSpec = field(repr=False)

    @classmethod
    def from_file(cls, path: str | Path, subcommands=None) -> "Resolved":
        cfg = load_scenario(path, subcommands)
        return cls(cfg, build_field(cfg))
