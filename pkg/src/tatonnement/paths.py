"""Path functionals: solenoidal line integrals, positivity margins and the
Onsager-Machlup action, plus fixed-time action minimization.

For isotropic noise ``Sigma = eps I`` the discrete action of a path sampled
on a uniform time grid is

    S = 1/(2 eps) * sum_i |(p_{i+1} - p_i)/dt - A(m_i)|^2 dt,

with ``m_i`` the segment midpoint.  Reversing the path changes the action by
``(2/eps) * sum_i A(m_i) . dp_i``, a midpoint-rule approximation of
``(2/eps) * [V(start) - V(end) + int dp . Abar]``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .critical import CriticalPoint
from .field import AppendixParams, FieldError, FieldSpec, FloatArray, jacobian, make_appendix_field

log = logging.getLogger(__name__)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)
# exact mirror symmetry so forward and reversed paths reuse the same points
GL_NODES = 0.5 * (_GL_NODES - _GL_NODES[::-1])
GL_WEIGHTS = 0.5 * (_GL_WEIGHTS + _GL_WEIGHTS[::-1])


@dataclass(frozen=True)
class PiecewisePath:
    """Polyline through ``nodes``; ``times`` is None for time-free (geometric) paths."""

    nodes: FloatArray
    times: FloatArray | None = None

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] < 2:
            raise FieldError("a path needs at least two nodes")
        if not np.all(np.isfinite(nodes)):
            raise FieldError("path nodes must be finite")
        object.__setattr__(self, "nodes", nodes)
        if self.times is not None:
            times = np.asarray(self.times, dtype=float)
            if times.shape != (nodes.shape[0],):
                raise FieldError("path needs one time per node")
            if np.any(np.diff(times) <= 0):
                raise FieldError("path times must be strictly increasing")
            object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, nodes: FloatArray, T: float) -> "PiecewisePath":
        nodes = np.asarray(nodes, dtype=float)
        return cls(nodes, np.linspace(0.0, T, nodes.shape[0]))

    @property
    def start(self) -> FloatArray:
        return self.nodes[0]

    @property
    def end(self) -> FloatArray:
        return self.nodes[-1]

    def reversed(self) -> "PiecewisePath":
        return PiecewisePath(self.nodes[::-1].copy(), None if self.times is None else self.times.copy())

    def subdivided(self, factor: int) -> "PiecewisePath":
        """Same polyline with every segment split into ``factor`` equal pieces."""
        if factor < 1:
            raise FieldError("subdivision factor must be >= 1")
        s = np.arange(factor) / factor
        a, b = self.nodes[:-1], self.nodes[1:]
        nodes = (a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]).reshape(-1, self.nodes.shape[1])
        nodes = np.vstack([nodes, self.nodes[-1:]])
        times = None
        if self.times is not None:
            t0, t1 = self.times[:-1], self.times[1:]
            times = np.append((t0[:, None] + s[None, :] * (t1 - t0)[:, None]).ravel(), self.times[-1])
        return PiecewisePath(nodes, times)

    def write_csv(self, path: str | Path) -> None:
        n = self.nodes.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow((["t"] if self.times is not None else []) + [f"p{i + 1}" for i in range(n)])
            for i, node in enumerate(self.nodes):
                row = [repr(float(self.times[i]))] if self.times is not None else []
                w.writerow(row + [repr(float(x)) for x in node])


def line_integral(path: PiecewisePath, vector_field: Callable[[FloatArray], FloatArray]) -> float:
    """``int dp . F`` along the polyline, 5-point Gauss-Legendre per segment."""
    a, b = path.nodes[:-1], path.nodes[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pts = mid[:, None, :] + GL_NODES[None, :, None] * half[:, None, :]
    vals = np.asarray(vector_field(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FieldError("vector field evaluation failed along the path")
    per_segment = np.einsum("sqd,sd->sq", vals, half) @ GL_WEIGHTS
    return float(np.sum(per_segment))


def line_integral_solenoidal(path: PiecewisePath, solenoidal: FieldSpec | Callable[[FloatArray], FloatArray]) -> float:
    """``int dp . Abar`` along ``path``; accepts a field (uses its analytic Abar) or a callable."""
    if isinstance(solenoidal, FieldSpec):
        solenoidal = solenoidal.eval_solenoidal
    return line_integral(path, solenoidal)


def positivity_margin(
    path: PiecewisePath,
    potential: Callable[[FloatArray], FloatArray] | FieldSpec,
    solenoidal: Callable[[FloatArray], FloatArray] | None = None,
) -> float:
    """``V(start) - V(end) + int dp . Abar``; the path is classically admissible iff >= 0."""
    if isinstance(potential, FieldSpec):
        field_ = potential
        if field_.potential is None or field_.solenoidal is None:
            raise FieldError(f"{field_.name}: positivity margin needs both analytic parts")
        potential, solenoidal = field_.eval_potential, field_.eval_solenoidal
    if potential is None or solenoidal is None:
        raise FieldError("positivity margin needs both analytic parts")
    drop = float(potential(path.start) - potential(path.end))
    return drop + line_integral(path, solenoidal)


@dataclass(frozen=True)
class ActionValue:
    total: float
    segment_terms: FloatArray  # per-segment contribution to ``total``
    residual: FloatArray  # K = dp/dt - A at segment midpoints
    eps: float

    def to_record(self) -> dict:
        return {"total": float(self.total), "eps": float(self.eps), "segments": int(self.segment_terms.size)}


def _time_step(path: PiecewisePath) -> float:
    if path.times is None:
        raise FieldError("the action needs a timed path")
    dts = np.diff(path.times)
    dt = (path.times[-1] - path.times[0]) / (path.times.size - 1)
    if np.max(np.abs(dts - dt)) > 1e-9 * max(1.0, abs(dt)):
        raise FieldError("the action needs a uniform time grid")
    return float(dt)


def _action_terms(field_: FieldSpec, nodes: FloatArray, dt: float, eps: float):
    dp = np.diff(nodes, axis=0)
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    resid = dp / dt - field_.evaluate(mid)
    terms = (0.5 / eps) * np.sum(resid * resid, axis=1) * dt
    return terms, resid, mid


def onsager_machlup_action(path: PiecewisePath, field_: FieldSpec, eps: float) -> ActionValue:
    """Midpoint-rule Onsager-Machlup action under isotropic noise ``eps I``."""
    if not eps > 0:
        raise FieldError("eps must be positive")
    dt = _time_step(path)
    terms, resid, _ = _action_terms(field_, path.nodes, dt, eps)
    if not np.all(np.isfinite(terms)):
        raise FieldError(f"{field_.name}: non-finite action terms")
    return ActionValue(float(np.sum(terms)), terms, resid, float(eps))


def action_gradient(field_: FieldSpec, nodes: FloatArray, dt: float, eps: float) -> tuple[float, FloatArray]:
    """Discrete action and its gradient with respect to every node."""
    terms, resid, mid = _action_terms(field_, nodes, dt, eps)
    jac = jacobian(field_, mid)
    # d term_i / d p_i = (1/eps) [-K_i - dt/2 J_i^T K_i], d term_i / d p_{i+1} = (1/eps) [K_i - dt/2 J_i^T K_i]
    jtk = np.einsum("sji,sj->si", jac, resid)
    grad = np.zeros_like(nodes)
    grad[:-1] += (-resid - 0.5 * dt * jtk) / eps
    grad[1:] += (resid - 0.5 * dt * jtk) / eps
    return float(np.sum(terms)), grad


@dataclass
class MinimizationResult:
    path: PiecewisePath
    action: ActionValue
    iterations: int
    converged: bool
    history: list[float]


def _initial_path(start: FloatArray, end: FloatArray, n_nodes: int, saddle: FloatArray | None) -> FloatArray:
    s = np.linspace(0.0, 1.0, n_nodes)[:, None]
    nodes = (1 - s) * start + s * end
    chord = end - start
    direction = None
    if saddle is not None:
        off = saddle - 0.5 * (start + end)
        off = off - chord * (off @ chord) / (chord @ chord)
        if np.linalg.norm(off) > 1e-12:
            direction = off / np.linalg.norm(off)
    if direction is None:
        # any unit vector orthogonal to the chord
        basis = np.eye(start.size)
        proj = basis - np.outer(chord, chord) / (chord @ chord)
        k = int(np.argmax(np.linalg.norm(proj, axis=1)))
        direction = proj[k] / np.linalg.norm(proj[k])
    return nodes + 1e-3 * np.sin(np.pi * s) * direction


def minimize_action(
    field_: FieldSpec,
    eps: float,
    start: CriticalPoint | Sequence[float],
    end: CriticalPoint | Sequence[float],
    n_nodes: int = 128,
    T: float = 40.0,
    max_iters: int = 200_000,
    tol: float = 1e-12,
    saddle: CriticalPoint | Sequence[float] | None = None,
    initial: FloatArray | None = None,
) -> MinimizationResult:
    """Fixed-time minimum-action path between two points (endpoints pinned).

    Gradient descent on the interior nodes; each step starts from a
    Barzilai-Borwein length and backtracks until the Armijo condition holds.
    Converged when the action drops by less than ``tol`` in an iteration.
    The initial path is the straight line nudged by 1e-3 towards ``saddle``
    (or sideways if the line already crosses it).
    """
    p0 = np.asarray(getattr(start, "location", start), dtype=float)
    p1 = np.asarray(getattr(end, "location", end), dtype=float)
    if np.allclose(p0, p1):
        raise FieldError("start and end must differ")
    if n_nodes < 32:
        raise FieldError("n_nodes must be >= 32")
    if not T > 0 or not eps > 0:
        raise FieldError("T and eps must be positive")
    sad = None if saddle is None else np.asarray(getattr(saddle, "location", saddle), dtype=float)
    nodes = _initial_path(p0, p1, n_nodes, sad) if initial is None else np.array(initial, dtype=float)
    dt = T / (n_nodes - 1)

    value, grad = action_gradient(field_, nodes, dt, eps)
    grad[0] = grad[-1] = 0.0
    step = 1e-3
    history = [value]
    converged = False
    it = 0
    prev_nodes = prev_grad = None
    for it in range(1, max_iters + 1):
        if prev_grad is not None:
            s_vec = nodes - prev_nodes
            y_vec = grad - prev_grad
            sy = float(np.sum(s_vec * y_vec))
            if sy > 0:
                step = float(np.sum(s_vec * s_vec)) / sy
        gg = float(np.sum(grad * grad))
        if gg == 0.0:
            converged = True
            break
        while True:
            trial = nodes - step * grad
            trial_value = float(np.sum(_action_terms(field_, trial, dt, eps)[0]))
            if np.isfinite(trial_value) and trial_value <= value - 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-16:
                break
        if step < 1e-16:
            converged = True
            break
        prev_nodes, prev_grad = nodes, grad
        nodes = trial
        new_value, grad = action_gradient(field_, nodes, dt, eps)
        grad[0] = grad[-1] = 0.0
        decrease = value - new_value
        value = new_value
        history.append(value)
        if decrease < tol:
            converged = True
            break
    if not converged:
        log.warning("%s: action minimization hit max_iters=%d", field_.name, max_iters)
    path = PiecewisePath.uniform(nodes, T)
    return MinimizationResult(path, onsager_machlup_action(path, field_, eps), it, converged, history)


# ---------------------------------------------------------------------------
# The two L-shaped paths between the wells of the double-well family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AppendixPathReport:
    params: AppendixParams
    well_b: FloatArray  # lower price of good 1
    well_a: FloatArray
    path_a: PiecewisePath  # good 2 moves first
    path_b: PiecewisePath  # good 1 moves first
    integral_a_closed: float
    integral_b_closed: float
    integral_a_quadrature: float
    integral_b_quadrature: float
    margin_a: float
    margin_b: float
    favored: str | None

    def to_record(self) -> dict:
        return {
            "params": {"a": self.params.a, "b": self.params.b, "k": self.params.k,
                       "reference_point": list(self.params.reference_point)},
            "well_b": [float(v) for v in self.well_b],
            "well_a": [float(v) for v in self.well_a],
            "path_A": [[float(v) for v in node] for node in self.path_a.nodes],
            "path_B": [[float(v) for v in node] for node in self.path_b.nodes],
            "integrals": {
                "A": {"closed_form": self.integral_a_closed, "quadrature": self.integral_a_quadrature},
                "B": {"closed_form": self.integral_b_closed, "quadrature": self.integral_b_quadrature},
            },
            "margins": {"A": self.margin_a, "B": self.margin_b},
            "favored": self.favored,
        }


def appendix_paths(params: AppendixParams, tie_tol: float = 1e-12) -> AppendixPathReport:
    """Solenoidal integrals and positivity margins of the two L-shaped paths.

    Path A changes good 2 first, then good 1; path B changes good 1 first.
    The favored path is the one with the larger margin (None on a tie).
    """
    if not params.two_well:
        raise FieldError("degenerate wells: a^2 - k^2/b <= 0")
    field_ = make_appendix_field(params)
    ref = np.asarray(params.reference_point, dtype=float)
    (x_b, y_b), (x_a, y_a) = params.wells()
    k = params.k
    path_a = PiecewisePath(ref + np.array([[x_b, y_b], [x_b, y_a], [x_a, y_a]]))
    path_b = PiecewisePath(ref + np.array([[x_b, y_b], [x_a, y_b], [x_a, y_a]]))
    closed_a = -k * x_b * (y_a - y_b) + k * y_a * (x_a - x_b)
    closed_b = k * y_b * (x_a - x_b) - k * x_a * (y_a - y_b)
    quad_a = line_integral_solenoidal(path_a, field_)
    quad_b = line_integral_solenoidal(path_b, field_)
    margin_a = positivity_margin(path_a, field_)
    margin_b = positivity_margin(path_b, field_)
    if abs(margin_a - margin_b) <= tie_tol:
        favored = None
    else:
        favored = "A" if margin_a > margin_b else "B"
    return AppendixPathReport(
        params=params,
        well_b=ref + np.array([x_b, y_b]),
        well_a=ref + np.array([x_a, y_a]),
        path_a=path_a,
        path_b=path_b,
        integral_a_closed=float(closed_a),
        integral_b_closed=float(closed_b),
        integral_a_quadrature=quad_a,
        integral_b_quadrature=quad_b,
        margin_a=margin_a,
        margin_b=margin_b,
        favored=favored,
    )


def highest_point(path: PiecewisePath, field_: FieldSpec) -> FloatArray:
    """Node of ``path`` with the largest potential value."""
    if field_.potential is None:
        raise FieldError(f"{field_.name}: no potential declared")
    return path.nodes[int(np.argmax(field_.eval_potential(path.nodes)))].copy()


@dataclass(frozen=True)
class ReversalCheck:
    """Forward and reversed actions against ``(2/eps)`` times the positivity margin."""

    forward: float
    reverse: float
    margin: float
    eps: float

    @property
    def predicted(self) -> float:
        return 2.0 * self.margin / self.eps

    @property
    def residual(self) -> float:
        return (self.reverse - self.forward) - self.predicted

    @property
    def relative_error(self) -> float:
        return abs(self.residual) / max(abs(self.predicted), abs(self.reverse - self.forward), 1e-300)

    def to_record(self) -> dict:
        return {
            "forward_action": self.forward,
            "reverse_action": self.reverse,
            "positivity_margin": self.margin,
            "predicted_difference": self.predicted,
            "residual": self.residual,
            "relative_error": self.relative_error,
            "eps": self.eps,
        }


def reversal_check(path: PiecewisePath, field_: FieldSpec, eps: float) -> ReversalCheck:
    """Actions of ``path`` and its reverse, plus the margin that should separate them.

    The identity is exact for the continuum action; the midpoint rule leaves
    an O(dt^2) discrepancy, so fine node spacing is needed for tight checks.
    """
    fwd = onsager_machlup_action(path, field_, eps).total
    rev = onsager_machlup_action(path.reversed(), field_, eps).total
    return ReversalCheck(fwd, rev, positivity_margin(path, field_), float(eps))
