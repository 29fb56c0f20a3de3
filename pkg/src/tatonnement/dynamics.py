"""Deterministic and noisy price dynamics.

``dp/dt = A(p)`` is integrated with classical RK4.  The noisy dynamics
``dp = A(p) dt + dW``, ``<dW_i dW_j> = Sigma_ij dt``, use Euler-Maruyama in
the Ito convention.

Randomness: every ensemble member owns a generator seeded from
``SeedSequence(seed, spawn_key=key + (member,))``.  Each member's arithmetic
is elementwise, so results do not depend on how members are batched or
split over workers.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .critical import CriticalPoint
from .field import FieldError, FieldSpec, FloatArray
from .hodge import AnalyticDecomposition

log = logging.getLogger(__name__)

NOISE_CHUNK = 4096
SYM_TOL = 1e-12
PSD_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSpec:
    """White-noise covariance ``Sigma`` (``<xi_i(t) xi_j(t')> = Sigma_ij delta(t - t')``) and seed."""

    covariance: FloatArray
    seed: int = 0

    def __post_init__(self) -> None:
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise FieldError(f"covariance must be square, got shape {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise FieldError("covariance has non-finite entries")
        if np.max(np.abs(cov - cov.T)) > SYM_TOL:
            raise FieldError("covariance is not symmetric (tolerance 1e-12)")
        if np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) < -PSD_TOL:
            raise FieldError("covariance is not positive semi-definite")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def isotropic(cls, eps: float, n: int, seed: int = 0) -> "NoiseSpec":
        return cls(eps * np.eye(n), seed)

    @property
    def factor(self) -> FloatArray:
        """``L`` with ``L L^T = Sigma`` (symmetric square root; works for singular Sigma)."""
        w, q = np.linalg.eigh(0.5 * (self.covariance + self.covariance.T))
        return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def member_rng(seed: int, key: Sequence[int] = ()) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass
class Trajectory:
    times: FloatArray
    states: FloatArray  # (len(times), n)
    dt: float
    scheme: str
    seed: int | None = None
    status: str = "ok"  # ok | left-box | non-finite

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.size:
            raise FieldError("trajectory needs one state per time")

    @property
    def final(self) -> FloatArray:
        return self.states[-1]

    @property
    def truncated(self) -> bool:
        return self.status != "ok"

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.times[start:stop], self.states[start:stop], self.dt, self.scheme, self.seed, self.status)

    def write_csv(self, path: str | Path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"p{i + 1}" for i in range(n)])
            for t, s in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in s])


def _check_run(field_: FieldSpec, p0: FloatArray, T: float, dt: float) -> int:
    if not dt > 0:
        raise FieldError("dt must be positive")
    if not T >= dt:
        raise FieldError("T must be at least dt")
    p0 = np.asarray(p0, dtype=float)
    if p0.shape[-1] != field_.dimension:
        raise FieldError(f"initial state must have dimension {field_.dimension}")
    if not np.all(field_.in_box(p0)):
        raise FieldError("initial state outside the domain box")
    return int(round(T / dt))


def _rk4(field_: FieldSpec, x: FloatArray, dt: float) -> FloatArray:
    k1 = field_.evaluate(x)
    k2 = field_.evaluate(x + 0.5 * dt * k1)
    k3 = field_.evaluate(x + 0.5 * dt * k2)
    k4 = field_.evaluate(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_ensemble(field_: FieldSpec, p0s: FloatArray, T: float, dt: float) -> list[Trajectory]:
    """RK4 for many initial states at once; one :class:`Trajectory` each.

    A member whose state leaves the box or turns non-finite is cut at the
    last good state and flagged.
    """
    p0s = np.atleast_2d(np.asarray(p0s, dtype=float))
    steps = _check_run(field_, p0s, T, dt)
    m, n = p0s.shape
    states = np.empty((steps + 1, m, n))
    states[0] = p0s
    stop = np.full(m, steps)
    status = ["ok"] * m
    active = np.arange(m)
    x = p0s.copy()
    for s in range(1, steps + 1):
        x = _rk4(field_, x, dt)
        finite = np.all(np.isfinite(x), axis=1)
        inside = finite & field_.in_box(np.where(finite[:, None], x, 0.0))
        if not np.all(inside):
            for j in np.flatnonzero(~inside):
                member = active[j]
                stop[member] = s - 1
                status[member] = "non-finite" if not finite[j] else "left-box"
            active = active[inside]
            x = x[inside]
            if active.size == 0:
                break
        states[s, active] = x
    times = dt * np.arange(steps + 1)
    out = []
    for i in range(m):
        k = stop[i] + 1
        out.append(Trajectory(times[:k].copy(), states[:k, i].copy(), dt, "rk4", None, status[i]))
    return out


def integrate_deterministic(field_: FieldSpec, p0: Sequence[float], T: float, dt: float = 1e-3) -> Trajectory:
    """Fixed-step RK4 integration of ``dp/dt = A(p)`` from ``p0`` over ``[0, T]``."""
    p0 = np.asarray(p0, dtype=float)
    if p0.ndim != 1:
        raise FieldError("integrate_deterministic takes a single initial state")
    traj = integrate_ensemble(field_, p0[None, :], T, dt)[0]
    if traj.truncated:
        log.warning("%s: trajectory truncated (%s) at t=%g", field_.name, traj.status, traj.times[-1])
    return traj


def simulate_sde(
    field_: FieldSpec,
    noise: NoiseSpec,
    p0: Sequence[float],
    T: float,
    dt: float = 1e-3,
    member: int = 0,
    key: Sequence[int] = (),
) -> Trajectory:
    """Euler-Maruyama path ``p += A(p) dt + L sqrt(dt) z`` with ``L L^T = Sigma``.

    The noise stream is member ``member`` of ``noise.seed`` (see
    :func:`member_rng`), so this path coincides with that member of
    :func:`run_ensemble`.  Leaving the box or a non-finite state stops the
    run and flags the partial trajectory.
    """
    p0 = np.asarray(p0, dtype=float)
    steps = _check_run(field_, p0, T, dt)
    n = field_.dimension
    if noise.covariance.shape != (n, n):
        raise FieldError(f"covariance must be {n}x{n}")
    chol = noise.factor
    rng = member_rng(noise.seed, tuple(key) + (member,))
    sq = np.sqrt(dt)
    states = np.empty((steps + 1, n))
    states[0] = p0
    x = p0.copy()
    status = "ok"
    last = steps
    lo, hi = field_.box[:, 0], field_.box[:, 1]
    s = 0
    while s < steps:
        c = min(NOISE_CHUNK, steps - s)
        z = rng.standard_normal((NOISE_CHUNK, n))[:c]
        incr = np.zeros((c, n))
        for i in range(n):
            for j in range(n):
                if chol[i, j] != 0.0:
                    incr[:, i] = incr[:, i] + chol[i, j] * z[:, j]
        incr *= sq
        with np.errstate(all="ignore"):
            for r in range(c):
                x = x + field_.evaluate(x) * dt + incr[r]
                states[s + r + 1] = x
        # checked per chunk; samples past the first bad one are discarded
        block = states[s + 1 : s + c + 1]
        ok = np.all(np.isfinite(block), axis=1) & np.all((block >= lo) & (block <= hi), axis=1)
        if not np.all(ok):
            q = int(np.argmin(ok))
            status = "non-finite" if not np.all(np.isfinite(block[q])) else "left-box"
            last = s + q
            break
        s += c
    if status != "ok":
        log.warning("%s: SDE run stopped (%s) at t=%g", field_.name, status, last * dt)
    times = dt * np.arange(last + 1)
    return Trajectory(times, states[: last + 1].copy(), dt, "euler-maruyama-ito", noise.seed, status)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleResult:
    """Per-member outcome of :func:`run_ensemble`, in member order."""

    final_states: FloatArray
    hit_times: FloatArray  # nan where the target was not reached
    status: list[str]  # hit | running | left-box | non-finite
    recorded: FloatArray | None = None  # (len(record_times), members, n)
    record_times: FloatArray | None = None


def _ensemble_block(
    field_: FieldSpec,
    chol: FloatArray,
    seed: int,
    key: tuple[int, ...],
    members: FloatArray,
    p0: FloatArray,
    steps: int,
    dt: float,
    target: FloatArray | None,
    capture_radius: float,
    record_steps: FloatArray,
) -> EnsembleResult:
    m = members.size
    n = p0.size
    gens = [member_rng(seed, key + (int(i),)) for i in members]
    x = np.tile(p0, (m, 1))
    ids = np.arange(m)
    final = np.tile(p0, (m, 1))
    hit = np.full(m, np.nan)
    status = ["running"] * m
    recorded = np.full((record_steps.size, m, n), np.nan)
    rec_pos = {int(s): r for r, s in enumerate(record_steps)}
    if 0 in rec_pos:
        recorded[rec_pos[0]] = x
    lo, hi = field_.box[:, 0], field_.box[:, 1]
    sq = np.sqrt(dt)
    pairs = [(i, j, chol[i, j]) for i in range(n) for j in range(n) if chol[i, j] != 0.0]
    buf = np.empty((NOISE_CHUNK, 0, n))
    r2 = capture_radius * capture_radius

    def retire(mask: np.ndarray, label: str, when: float | None) -> None:
        nonlocal x, ids, buf
        for j in np.flatnonzero(mask):
            member = ids[j]
            status[member] = label
            final[member] = x[j]
            if when is not None:
                hit[member] = when
        keep = ~mask
        x, ids, buf = x[keep], ids[keep], buf[:, keep]

    if target is not None:
        d0 = np.sum((x - target) ** 2, axis=1) <= r2
        if np.any(d0):
            retire(d0, "hit", 0.0)
    for s in range(steps):
        if ids.size == 0:
            break
        c = s % NOISE_CHUNK
        if c == 0:
            buf = np.empty((NOISE_CHUNK, ids.size, n))
            for j, member in enumerate(ids):
                buf[:, j, :] = gens[member].standard_normal((NOISE_CHUNK, n))
        z = buf[c]
        incr = np.zeros_like(x)
        for i, j, v in pairs:
            incr[:, i] = incr[:, i] + v * z[:, j]
        x = x + field_.evaluate(x) * dt + incr * sq
        t = (s + 1) * dt
        finite = np.all(np.isfinite(x), axis=1)
        inside = finite & np.all((x >= lo) & (x <= hi), axis=1)
        if not np.all(inside):
            retire(~finite, "non-finite", None)
            inside = np.all((x >= lo) & (x <= hi), axis=1)
            retire(~inside, "left-box", None)
        if target is not None and ids.size:
            arrived = np.sum((x - target) ** 2, axis=1) <= r2
            if np.any(arrived):
                retire(arrived, "hit", t)
        r = rec_pos.get(s + 1)
        if r is not None:
            recorded[r, ids] = x
    for j, member in enumerate(ids):
        final[member] = x[j]
    return EnsembleResult(final, hit, status, recorded)


def run_ensemble(
    field_: FieldSpec,
    noise: NoiseSpec,
    p0: Sequence[float],
    n_members: int,
    T: float,
    dt: float,
    target: Sequence[float] | None = None,
    capture_radius: float = 0.1,
    record_times: Sequence[float] | None = None,
    key: Sequence[int] = (),
    workers: int = 1,
) -> EnsembleResult:
    """Run ``n_members`` Euler-Maruyama paths from ``p0`` for up to ``T``.

    With ``target`` set, a member stops on first entering ``capture_radius``
    of it and its hit time is recorded.  ``record_times`` (multiples of
    ``dt``) snapshot the still-running members.  ``workers > 1`` splits the
    members into contiguous blocks run in separate processes; output is
    identical for any worker count.
    """
    p0 = np.asarray(p0, dtype=float)
    steps = _check_run(field_, p0, T, dt)
    if n_members < 1:
        raise FieldError("n_members must be >= 1")
    chol = noise.factor
    rec = np.asarray([] if record_times is None else record_times, dtype=float)
    rec_steps = np.rint(rec / dt).astype(int)
    if np.any(np.abs(rec_steps * dt - rec) > 1e-9 * np.maximum(1.0, rec)) or np.any(rec_steps > steps):
        raise FieldError("record_times must be multiples of dt within [0, T]")
    tgt = None if target is None else np.asarray(target, dtype=float)
    key = tuple(int(k) for k in key)
    members = np.arange(n_members)
    args = (field_, chol, noise.seed, key)
    tail = (p0, steps, dt, tgt, capture_radius, rec_steps)
    if workers <= 1 or n_members < 2:
        parts = [_ensemble_block(*args, members, *tail)]
    else:
        blocks = [b for b in np.array_split(members, min(workers, n_members)) if b.size]
        with ProcessPoolExecutor(max_workers=len(blocks)) as pool:
            futures = [pool.submit(_ensemble_block, *args, b, *tail) for b in blocks]
            parts = [f.result() for f in futures]
    result = EnsembleResult(
        final_states=np.concatenate([p.final_states for p in parts]),
        hit_times=np.concatenate([p.hit_times for p in parts]),
        status=[s for p in parts for s in p.status],
        recorded=np.concatenate([p.recorded for p in parts], axis=1),
        record_times=rec,
    )
    return result


# ---------------------------------------------------------------------------
# Transitions and first passage
# ---------------------------------------------------------------------------


@dataclass
class TransitionEvent:
    from_point: int
    to_point: int
    departure_time: float
    arrival_time: float
    path_slice: Trajectory = field(repr=False)
    min_distance_to_saddle: dict[int, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "from_point": self.from_point,
            "to_point": self.to_point,
            "departure_time": float(self.departure_time),
            "arrival_time": float(self.arrival_time),
            "min_distance_to_saddle": {str(k): float(v) for k, v in sorted(self.min_distance_to_saddle.items())},
        }


def distance_to_polyline(points: FloatArray, target: FloatArray) -> float:
    """Minimum distance from ``target`` to the polyline through ``points``."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 1:
        return float(np.linalg.norm(points[0] - target))
    a, b = points[:-1], points[1:]
    ab = b - a
    denom = np.sum(ab * ab, axis=1)
    t = np.where(denom > 0, np.sum((target - a) * ab, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return float(np.min(np.linalg.norm(closest - target, axis=1)))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of the True runs of ``mask``."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def detect_transitions(
    traj: Trajectory,
    points: Sequence[CriticalPoint],
    capture_radius: float = 0.1,
    hysteresis_radius: float = 0.3,
) -> list[TransitionEvent]:
    """Well-to-well hops of a trajectory, with hysteresis.

    A visit to a stable point starts when the path enters ``capture_radius``
    of it and ends when the path leaves ``hysteresis_radius``.  Consecutive
    visits to different points yield one event, whose slice runs from the
    last sample inside the capture ball of the origin point to the first
    sample inside the capture ball of the destination.  Point identifiers
    are positions in ``points``.
    """
    if not hysteresis_radius > capture_radius > 0:
        raise FieldError("need hysteresis_radius > capture_radius > 0")
    stable = [i for i, cp in enumerate(points) if cp.stability == "stable"]
    saddles = [i for i, cp in enumerate(points) if cp.stability == "saddle"]
    if len(stable) < 2:
        raise FieldError("detect_transitions needs at least two stable points")
    x = traj.states
    visits: list[tuple[int, int, int]] = []  # (first capture idx, last capture idx, point)
    for i in stable:
        d = np.linalg.norm(x - points[i].location, axis=1)
        captured = d <= capture_radius
        if not np.any(captured):
            continue
        for lo, hi in _runs(d <= hysteresis_radius):
            inside = np.flatnonzero(captured[lo:hi])
            if inside.size:
                visits.append((lo + int(inside[0]), lo + int(inside[-1]), i))
    visits.sort()
    events = []
    for (_, last_a, pa), (first_b, _, pb) in zip(visits, visits[1:]):
        if pa == pb:
            continue
        piece = traj.slice(last_a, first_b + 1)
        events.append(
            TransitionEvent(
                from_point=pa,
                to_point=pb,
                departure_time=float(traj.times[last_a]),
                arrival_time=float(traj.times[first_b]),
                path_slice=piece,
                min_distance_to_saddle={
                    j: distance_to_polyline(piece.states, points[j].location) for j in saddles
                },
            )
        )
    return events


def saddle_passage_fraction(events: Sequence[TransitionEvent], radius: float) -> float:
    """Share of events whose path came within ``radius`` of some saddle (nan if no events)."""
    if not events:
        return float("nan")
    near = [min(e.min_distance_to_saddle.values(), default=np.inf) <= radius for e in events]
    return float(np.mean(near))


@dataclass(frozen=True)
class PassageEstimate:
    eps: float
    mean: float
    stderr: float
    n_runs: int
    n_censored: int
    n_lost: int  # left the box or went non-finite

    def to_record(self) -> dict:
        return {
            "eps": float(self.eps),
            "mean": float(self.mean),
            "stderr": float(self.stderr),
            "n_runs": self.n_runs,
            "n_censored": self.n_censored,
            "n_lost": self.n_lost,
        }


def mean_first_passage(
    field_: FieldSpec,
    start: CriticalPoint,
    target: CriticalPoint,
    noise_levels: Sequence[float],
    ensemble_size: int,
    dt: float,
    t_cap: float,
    seed: int = 0,
    capture_radius: float = 0.1,
    workers: int = 1,
) -> list[PassageEstimate]:
    """MFPT from ``start`` into ``capture_radius`` of ``target`` under ``Sigma = eps I``.

    Noise level ``k`` uses stream key ``(k,)`` under ``seed``.  Runs still
    free at ``t_cap`` are censored and excluded from the mean; an all-censored
    level reports ``nan`` rather than failing.
    """
    if ensemble_size < 100:
        raise FieldError("ensemble_size must be >= 100")
    if np.linalg.norm(start.location - target.location) <= capture_radius:
        raise FieldError("start lies inside the target capture ball")
    out = []
    for k, eps in enumerate(noise_levels):
        if not eps > 0:
            raise FieldError("noise levels must be positive")
        noise = NoiseSpec.isotropic(eps, field_.dimension, seed)
        res = run_ensemble(
            field_, noise, start.location, ensemble_size, t_cap, dt,
            target=target.location, capture_radius=capture_radius, key=(k,), workers=workers,
        )
        hits = res.hit_times[~np.isnan(res.hit_times)]
        censored = sum(s == "running" for s in res.status)
        lost = sum(s in ("left-box", "non-finite") for s in res.status)
        if hits.size:
            mean = float(np.mean(hits))
            se = float(np.std(hits, ddof=1) / np.sqrt(hits.size)) if hits.size > 1 else float("nan")
        else:
            mean = se = float("nan")
            log.warning("all %d runs censored at eps=%g", ensemble_size, eps)
        out.append(PassageEstimate(float(eps), mean, se, ensemble_size, int(censored), int(lost)))
    return out


def arrhenius_slope(estimates: Sequence[PassageEstimate]) -> float:
    """Least-squares slope of ``ln(MFPT)`` against ``1/eps``."""
    inv = np.array([1.0 / e.eps for e in estimates])
    logs = np.log([e.mean for e in estimates])
    return float(np.polyfit(inv, logs, 1)[0])


# ---------------------------------------------------------------------------
# Energy identity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyBalance:
    kinetic: float  # integral of |dp/dt|^2 dt
    potential_drop: float  # V(p(t0)) - V(p(tf))
    solenoidal_work: float  # integral of dp . Abar
    residual: float

    @property
    def margin(self) -> float:
        return self.potential_drop + self.solenoidal_work


def _trapezoid(y: FloatArray, dx: float) -> float:
    return float(dx * (np.sum(y) - 0.5 * (y[0] + y[-1])))


def energy_identity_check(
    traj: Trajectory,
    decomposition: AnalyticDecomposition | tuple[Callable, Callable | None],
) -> EnergyBalance:
    """Both sides of ``int |p'|^2 dt = V(p0) - V(pf) + int dp . Abar`` along ``traj``.

    Velocities are second-order finite differences of the stored states, so
    the check uses only the trajectory and the analytic ``(V, Abar)``; the
    trapezoid rule is used for both integrals.  A missing ``Abar`` counts as
    zero.
    """
    if decomposition is None:
        raise FieldError("energy identity needs an analytic decomposition")
    if isinstance(decomposition, AnalyticDecomposition):
        potential, solenoidal = decomposition.potential, decomposition.solenoidal
    else:
        potential, solenoidal = decomposition
    if potential is None:
        raise FieldError("energy identity needs an analytic potential")
    x = traj.states
    if x.shape[0] < 3:
        raise FieldError("energy identity needs at least three samples")
    vel = np.gradient(x, traj.dt, axis=0, edge_order=2)
    kinetic = _trapezoid(np.sum(vel * vel, axis=1), traj.dt)
    v = potential(x)
    drop = float(v[0] - v[-1])
    if solenoidal is None:
        work = 0.0
    else:
        abar = solenoidal(x)
        work = float(np.sum(0.5 * (abar[1:] + abar[:-1]) * np.diff(x, axis=0)))
    return EnergyBalance(kinetic, drop, work, abs(kinetic - (drop + work)))
