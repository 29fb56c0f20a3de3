"""Critical points of the excess-demand field: search, classification, basins.

Index convention: the index of a critical point is the number of Jacobian
eigenvalues with positive real part (unstable directions of ``dp/dt = A``).
For a gradient field ``grad A = -Hess V``, so this equals the number of
negative Hessian eigenvalues of the potential.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .field import FieldError, FieldSpec, FloatArray, jacobian
from .hodge import GridSpec

log = logging.getLogger(__name__)

TIE_TOL = 1e-9
DEDUP_DIST = 1e-6
CLASSIFY_RESIDUAL = 1e-6
DEFAULT_MULTISTART = 16
DEFAULT_TOL = 1e-10
NEWTON_MAX_ITERS = 60
UNRESOLVED = -1


@dataclass(frozen=True)
class CriticalPoint:
    location: FloatArray
    jacobian_eigenvalues: np.ndarray
    index: int
    stability: str  # stable | saddle | unstable | marginal
    residual: float

    def to_record(self) -> dict:
        return {
            "location": [float(x) for x in self.location],
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.jacobian_eigenvalues],
            "index": int(self.index),
            "stability": self.stability,
            "residual": float(self.residual),
        }


@dataclass
class SearchReport:
    """Critical points plus search diagnostics (never raises on no convergence)."""

    points: list[CriticalPoint]
    starts: int
    converged: int
    abandoned_singular: int
    abandoned_other: int
    diagnostic: str = ""

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]


def _stability(eigs: np.ndarray, n: int) -> tuple[int, str]:
    re = eigs.real
    index = int(np.sum(re > TIE_TOL))
    if np.any(np.abs(re) <= TIE_TOL):
        return index, "marginal"
    if index == 0:
        return index, "stable"
    if index == n:
        return index, "unstable"
    return index, "saddle"


def classify(field_: FieldSpec, location: Sequence[float], max_residual: float = CLASSIFY_RESIDUAL) -> CriticalPoint:
    """Eigen-classify a critical point.  Raises if ``|A(location)|`` is too large."""
    loc = np.asarray(location, dtype=float)
    if loc.shape != (field_.dimension,):
        raise FieldError(f"location must have dimension {field_.dimension}")
    residual = float(np.linalg.norm(field_.evaluate(loc)))
    if not residual <= max_residual:
        raise FieldError(
            f"{field_.name}: {loc.tolist()} is not a critical point (|A| = {residual:.3e})"
        )
    eigs = np.linalg.eigvals(jacobian(field_, loc))
    eigs = eigs[np.lexsort((eigs.imag, eigs.real))]
    index, stability = _stability(eigs, field_.dimension)
    return CriticalPoint(loc, eigs, index, stability, residual)


def _newton(field_: FieldSpec, x0: FloatArray, box: FloatArray, tol: float) -> tuple[FloatArray | None, str]:
    x = x0.copy()
    for _ in range(NEWTON_MAX_ITERS):
        fx = field_.evaluate(x)
        if not np.all(np.isfinite(fx)):
            return None, "nonfinite"
        if np.linalg.norm(fx) <= tol:
            return x, "ok"
        jac = jacobian(field_, x)
        try:
            if np.linalg.cond(jac) > 1e14:
                return None, "singular"
            step = np.linalg.solve(jac, -fx)
        except np.linalg.LinAlgError:
            return None, "singular"
        # halve steps that do not reduce |A|, a few times at most
        f0 = np.linalg.norm(fx)
        t = 1.0
        for _ in range(8):
            trial = x + t * step
            ft = field_.evaluate(trial)
            if np.all(np.isfinite(ft)) and np.linalg.norm(ft) < f0:
                break
            t *= 0.5
        x = x + t * step
        if np.any(x < box[:, 0] - 1e-12) or np.any(x > box[:, 1] + 1e-12):
            return None, "left-box"
    fx = field_.evaluate(x)
    if np.linalg.norm(fx) <= tol:
        return x, "ok"
    return None, "maxiter"


def _sort_key(cp: CriticalPoint) -> tuple:
    return tuple(np.round(cp.location, 9))


def find_critical_points(
    field_: FieldSpec,
    box: Sequence[Sequence[float]] | None = None,
    multistart_resolution: int = DEFAULT_MULTISTART,
    tol: float = DEFAULT_TOL,
) -> SearchReport:
    """Multistart Newton search over a lattice of starts on ``box``.

    Converged roots with ``|A| <= tol`` are deduplicated at distance 1e-6,
    classified, and returned sorted by location.
    """
    if tol <= 0:
        raise FieldError("tol must be positive")
    box = np.asarray(field_.box if box is None else box, dtype=float)
    if box.shape != (field_.dimension, 2):
        raise FieldError(f"search box must have shape ({field_.dimension}, 2)")
    m = int(multistart_resolution)
    if m < 1:
        raise FieldError("multistart_resolution must be >= 1")
    # cell-centred lattice: avoids starting exactly on symmetry axes of the box
    axes = [lo + (np.arange(m) + 0.5) * (hi - lo) / m for lo, hi in box]
    roots: list[FloatArray] = []
    counts = {"ok": 0, "singular": 0}
    other = 0
    starts = 0
    for start in itertools.product(*axes):
        starts += 1
        x, status = _newton(field_, np.asarray(start, dtype=float), box, tol)
        if status == "singular":
            counts["singular"] += 1
            continue
        if x is None:
            other += 1
            continue
        counts["ok"] += 1
        if all(np.linalg.norm(x - r) >= DEDUP_DIST for r in roots):
            roots.append(x)
    points = [classify(field_, r) for r in roots]
    points.sort(key=_sort_key)
    diagnostic = ""
    if not points:
        diagnostic = f"no Newton start converged ({starts} starts)"
        log.warning("%s: %s", field_.name, diagnostic)
    return SearchReport(points, starts, counts["ok"], counts["singular"], other, diagnostic)


@dataclass(frozen=True)
class BasinMap:
    grid: GridSpec
    labels: np.ndarray  # index into ``points`` or UNRESOLVED (-1)
    points: tuple[CriticalPoint, ...] = field(repr=False)

    def fraction(self, label: int) -> float:
        return float(np.mean(self.labels == label))


def _rk4_step(field_: FieldSpec, x: FloatArray, dt: float) -> FloatArray:
    k1 = field_.evaluate(x)
    k2 = field_.evaluate(x + 0.5 * dt * k1)
    k3 = field_.evaluate(x + 0.5 * dt * k2)
    k4 = field_.evaluate(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def basin_of_attraction(
    field_: FieldSpec,
    points: Sequence[CriticalPoint],
    grid: GridSpec,
    capture_radius: float = 0.1,
    t_max: float = 100.0,
    dt: float = 1e-2,
) -> BasinMap:
    """Label each grid node by the stable point its deterministic flow reaches.

    All nodes are integrated together (RK4).  Nodes still free at ``t_max``,
    or whose flow leaves the field's box, get ``UNRESOLVED``.
    """
    points = tuple(points)
    if not points:
        raise FieldError("basin_of_attraction needs at least one critical point")
    stable = [i for i, cp in enumerate(points) if cp.stability == "stable"]
    targets = np.array([points[i].location for i in stable]).reshape(len(stable), -1)
    x = grid.nodes().reshape(-1, grid.ndim).copy()
    labels = np.full(x.shape[0], UNRESOLVED, dtype=int)
    active = np.arange(x.shape[0])
    steps = int(np.ceil(t_max / dt))
    for _ in range(steps + 1):
        if active.size == 0 or targets.size == 0:
            break
        xa = x[active]
        d = np.linalg.norm(xa[:, None, :] - targets[None, :, :], axis=-1)
        nearest = np.argmin(d, axis=1)
        hit = d[np.arange(active.size), nearest] <= capture_radius
        labels[active[hit]] = np.asarray(stable)[nearest[hit]]
        outside = ~field_.in_box(xa)
        keep = ~(hit | outside)
        active = active[keep]
        x[active] = _rk4_step(field_, x[active], dt)
        bad = ~np.all(np.isfinite(x[active]), axis=1)
        active = active[~bad]
    return BasinMap(grid, labels.reshape(grid.resolution), points)


@dataclass(frozen=True)
class PointMatch:
    base: CriticalPoint
    alternative: CriticalPoint
    displacement: float
    index_changed: bool


@dataclass(frozen=True)
class ScenarioComparison:
    base_parameters: FloatArray
    alternative_parameters: FloatArray
    base: list[CriticalPoint]
    alternative: list[CriticalPoint]
    matches: list[PointMatch]
    unmatched_base: list[CriticalPoint]
    unmatched_alternative: list[CriticalPoint]

    def to_record(self) -> dict:
        return {
            "base_parameters": [float(v) for v in self.base_parameters],
            "alternative_parameters": [float(v) for v in self.alternative_parameters],
            "matches": [
                {
                    "base": m.base.to_record(),
                    "alternative": m.alternative.to_record(),
                    "displacement": float(m.displacement),
                    "index_changed": bool(m.index_changed),
                }
                for m in self.matches
            ],
            "unmatched_base": [cp.to_record() for cp in self.unmatched_base],
            "unmatched_alternative": [cp.to_record() for cp in self.unmatched_alternative],
        }


def compare_scenarios(
    field_: FieldSpec,
    params: Sequence[float],
    params_alt: Sequence[float],
    box: Sequence[Sequence[float]] | None = None,
    tol: float = DEFAULT_TOL,
    multistart_resolution: int = DEFAULT_MULTISTART,
) -> ScenarioComparison:
    """Critical points under two parameter vectors, paired by minimum total displacement."""
    f0 = field_.with_parameters(params)
    f1 = field_.with_parameters(params_alt)
    base = list(find_critical_points(f0, box, multistart_resolution, tol))
    alt = list(find_critical_points(f1, box, multistart_resolution, tol))
    matches: list[PointMatch] = []
    used_b: set[int] = set()
    used_a: set[int] = set()
    if base and alt:
        cost = np.linalg.norm(
            np.array([c.location for c in base])[:, None, :]
            - np.array([c.location for c in alt])[None, :, :],
            axis=-1,
        )
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            matches.append(PointMatch(base[i], alt[j], float(cost[i, j]), base[i].index != alt[j].index))
            used_b.add(int(i))
            used_a.add(int(j))
    matches.sort(key=lambda m: _sort_key(m.base))
    return ScenarioComparison(
        base_parameters=f0.parameters,
        alternative_parameters=f1.parameters,
        base=base,
        alternative=alt,
        matches=matches,
        unmatched_base=[c for i, c in enumerate(base) if i not in used_b],
        unmatched_alternative=[c for i, c in enumerate(alt) if i not in used_a],
    )
