"""Excess-demand vector fields.

A :class:`FieldSpec` bundles an evaluable drift ``A(p, pi)`` with its
parameter vector, an axis-aligned domain box and, optionally, analytic
potential / solenoidal parts and an analytic Jacobian.  All callables take
``(p, params)`` and accept batched input of shape ``(..., n)``.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]
Rule = Callable[[FloatArray, FloatArray], FloatArray]

# central-difference step: relative 1e-5, absolute floor 1e-8
FD_REL_STEP = 1e-5
FD_ABS_FLOOR = 1e-8
DECOMPOSITION_TOL = 1e-10
SOLENOIDAL_DIV_TOL = 1e-8


class FieldError(ValueError):
    """Raised for invalid fields or evaluations outside their contract."""


def _frozen(a: ArrayLike) -> FloatArray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FieldSpec:
    """An excess-demand field on a box.

    ``drift`` is required; ``potential``, ``solenoidal`` and ``jacobian`` are
    optional analytic forms.  When both analytic parts are present the drift
    must equal ``-grad(potential) + solenoidal``.
    """

    dimension: int
    parameters: FloatArray
    drift: Rule
    box: FloatArray
    potential: Rule | None = None
    solenoidal: Rule | None = None
    jacobian: Rule | None = None
    name: str = "field"
    # rebuilds the analytic rules for a new parameter vector (and validates it)
    rebuild: Callable[[FloatArray], "FieldSpec"] | None = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise FieldError("dimension must be >= 1")
        object.__setattr__(self, "parameters", _frozen(np.atleast_1d(self.parameters)))
        box = _frozen(self.box)
        if box.shape != (self.dimension, 2):
            raise FieldError(f"box must have shape ({self.dimension}, 2), got {box.shape}")
        if not np.all(np.isfinite(box)) or np.any(box[:, 0] >= box[:, 1]):
            raise FieldError("box needs finite bounds with min < max on every axis")
        object.__setattr__(self, "box", box)

    # raw batched evaluation, no domain checks; used by the integrators
    def evaluate(self, p: FloatArray) -> FloatArray:
        return self.drift(p, self.parameters)

    def eval_potential(self, p: FloatArray) -> FloatArray:
        if self.potential is None:
            raise FieldError(f"{self.name}: no analytic potential")
        return self.potential(np.asarray(p, dtype=float), self.parameters)

    def eval_solenoidal(self, p: FloatArray) -> FloatArray:
        if self.solenoidal is None:
            raise FieldError(f"{self.name}: no analytic solenoidal part")
        return self.solenoidal(np.asarray(p, dtype=float), self.parameters)

    def in_box(self, p: FloatArray) -> NDArray[np.bool_]:
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.box[:, 0]) & (p <= self.box[:, 1]), axis=-1)

    def with_parameters(self, params: ArrayLike) -> "FieldSpec":
        params = np.atleast_1d(np.asarray(params, dtype=float))
        if params.shape != self.parameters.shape:
            raise FieldError(
                f"parameter vector must have length {self.parameters.size}, got {params.size}"
            )
        if self.rebuild is not None:
            return self.rebuild(params)
        return dataclasses.replace(self, parameters=params)

    def with_box(self, box: ArrayLike) -> "FieldSpec":
        return dataclasses.replace(self, box=np.asarray(box, dtype=float))


def _as_point(field_: FieldSpec, p: ArrayLike) -> FloatArray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (field_.dimension,):
        raise FieldError(
            f"{field_.name}: expected price vector(s) of dimension {field_.dimension}, "
            f"got shape {p.shape}"
        )
    if not np.all(np.isfinite(p)):
        raise FieldError(f"{field_.name}: non-finite price vector")
    if not np.all(field_.in_box(p)):
        raise FieldError(f"{field_.name}: price vector outside the domain box")
    return p


def eval_excess_demand(field_: FieldSpec, p: ArrayLike) -> FloatArray:
    """Evaluate ``A(p, pi)`` with dimension, finiteness and domain checks."""
    p = _as_point(field_, p)
    out = np.asarray(field_.evaluate(p), dtype=float)
    if not np.all(np.isfinite(out)):
        raise FieldError(f"{field_.name}: non-finite excess demand (ill-posed field)")
    return out


def fd_step(p: FloatArray) -> FloatArray:
    """Central-difference step ``1e-5 * max(1, |p|)``, floored at 1e-8."""
    scale = np.maximum(1.0, np.linalg.norm(p, axis=-1))
    return np.maximum(FD_REL_STEP * scale, FD_ABS_FLOOR)


def fd_jacobian(field_: FieldSpec, p: FloatArray, h: float | FloatArray | None = None) -> FloatArray:
    """Central finite-difference Jacobian, batched over leading axes."""
    p = np.asarray(p, dtype=float)
    n = field_.dimension
    step = fd_step(p) if h is None else np.broadcast_to(np.asarray(h, dtype=float), p.shape[:-1])
    jac = np.empty(p.shape + (n,))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        shift = step[..., None] * e
        diff = field_.evaluate(p + shift) - field_.evaluate(p - shift)
        jac[..., :, j] = diff / (2.0 * step[..., None])
    return jac


def eval_jacobian(
    field_: FieldSpec,
    p: ArrayLike,
    mode: str = "analytic",
    h: float | None = None,
) -> FloatArray:
    """Jacobian ``J[i, j] = dA_i/dp_j`` at ``p``.

    ``mode`` is ``"analytic"`` (requires ``field_.jacobian``) or
    ``"finite-difference"`` (central differences, step ``h`` or the default
    relative step).
    """
    p = _as_point(field_, p)
    if mode == "analytic":
        if field_.jacobian is None:
            raise FieldError(f"{field_.name}: no analytic Jacobian")
        jac = np.asarray(field_.jacobian(p, field_.parameters), dtype=float)
    elif mode in ("finite-difference", "fd"):
        jac = fd_jacobian(field_, p, h)
    else:
        raise FieldError(f"unknown Jacobian mode {mode!r}")
    if not np.all(np.isfinite(jac)):
        raise FieldError(f"{field_.name}: non-finite Jacobian entries")
    return jac


def jacobian(field_: FieldSpec, p: FloatArray) -> FloatArray:
    """Analytic Jacobian when available, else finite differences; no checks."""
    if field_.jacobian is not None:
        return field_.jacobian(p, field_.parameters)
    return fd_jacobian(field_, p)


def asymmetry_norm(field_: FieldSpec, p: ArrayLike) -> float:
    """Frobenius norm of the antisymmetric part of the Jacobian at ``p``."""
    mode = "analytic" if field_.jacobian is not None else "finite-difference"
    jac = eval_jacobian(field_, p, mode=mode)
    anti = 0.5 * (jac - np.swapaxes(jac, -1, -2))
    return np.linalg.norm(anti, axis=(-2, -1))


def verify_decomposition(field_: FieldSpec, points: FloatArray) -> float:
    """Max reconstruction error ``|A + grad V - Abar|`` over ``points``.

    The gradient of the potential is taken by central differences with a
    step small enough to stay well under the 1e-10 identity tolerance for
    polynomial potentials of moderate degree.
    """
    if field_.potential is None or field_.solenoidal is None:
        raise FieldError(f"{field_.name}: both analytic parts are required")
    grad_v = potential_gradient(field_, points)
    resid = field_.evaluate(points) + grad_v - field_.solenoidal(points, field_.parameters)
    return float(np.max(np.abs(resid)))


def potential_gradient(field_: FieldSpec, p: FloatArray) -> FloatArray:
    """Gradient of the analytic potential (fourth-order central differences)."""
    if field_.potential is None:
        raise FieldError(f"{field_.name}: no analytic potential")
    p = np.asarray(p, dtype=float)
    n = field_.dimension
    h = 1e-3 * np.maximum(1.0, np.abs(p))
    out = np.empty(p.shape)
    v = lambda q: field_.potential(q, field_.parameters)  # noqa: E731
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        hj = h[..., j : j + 1] * e
        out[..., j] = (
            -v(p + 2 * hj) + 8 * v(p + hj) - 8 * v(p - hj) + v(p - 2 * hj)
        ) / (12.0 * h[..., j])
    return out


def sample_points(box: FloatArray, count: int, seed: int = 0) -> FloatArray:
    rng = np.random.default_rng(seed)
    lo, hi = box[:, 0], box[:, 1]
    return lo + (hi - lo) * rng.random((count, box.shape[0]))


# ---------------------------------------------------------------------------
# Double-well family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AppendixParams:
    """Parameters of the asymmetric double-well family.

    Two wells exist iff ``a**2 - k**2 / b > 0``.
    """

    a: float = 1.0
    b: float = 1.0
    k: float = 0.0
    reference_point: tuple[float, float] = (0.0, 0.0)

    @property
    def two_well(self) -> bool:
        return self.a**2 - self.k**2 / self.b > 0

    def wells(self) -> tuple[FloatArray, FloatArray]:
        """Closed-form wells ``(b, a)``: lower and higher price of good 1, in deviations."""
        if not self.two_well:
            raise FieldError("degenerate wells: a^2 - k^2/b <= 0")
        x = np.sqrt(self.a**2 - self.k**2 / self.b)
        low = np.array([-x, (self.k / self.b) * x])
        high = np.array([x, -(self.k / self.b) * x])
        return low, high


class AppendixModel:
    """Analytic rules of the double-well family in deviation coordinates.

    ``params`` is ``(a, b, k)``; prices are shifted by the reference point.
    """

    def __init__(self, reference_point: Sequence[float] = (0.0, 0.0)):
        self.reference_point = np.asarray(reference_point, dtype=float)

    def _dev(self, p: FloatArray) -> tuple[FloatArray, FloatArray]:
        d = np.asarray(p, dtype=float) - self.reference_point
        return d[..., 0], d[..., 1]

    def drift(self, p: FloatArray, params: FloatArray) -> FloatArray:
        a, b, k = params
        d = np.asarray(p, dtype=float) - self.reference_point
        x, y = d[..., 0], d[..., 1]
        out = np.empty(d.shape)
        out[..., 0] = x * (a * a - x * x) + k * y
        out[..., 1] = -b * y - k * x
        return out

    def potential(self, p: FloatArray, params: FloatArray) -> FloatArray:
        a, b, _ = params
        x, y = self._dev(p)
        w = a * a - x * x
        return 0.25 * w * w + 0.5 * b * y * y

    def solenoidal(self, p: FloatArray, params: FloatArray) -> FloatArray:
        k = params[2]
        x, y = self._dev(p)
        return np.stack([k * y, -k * x], axis=-1)

    def jacobian(self, p: FloatArray, params: FloatArray) -> FloatArray:
        a, b, k = params
        x, _ = self._dev(p)
        jac = np.empty(np.shape(x) + (2, 2))
        jac[..., 0, 0] = a * a - 3.0 * x * x
        jac[..., 0, 1] = k
        jac[..., 1, 0] = -k
        jac[..., 1, 1] = -b
        return jac


DEFAULT_APPENDIX_HALF_WIDTH = 4.0


def make_appendix_field(
    params: AppendixParams,
    box: ArrayLike | None = None,
    require_two_well: bool = True,
) -> FieldSpec:
    """Build the double-well field with its analytic decomposition and Jacobian.

    Raises :class:`FieldError` for ``a <= 0``, ``b <= 0`` or, unless
    ``require_two_well`` is False, outside the two-well regime.
    """
    if not (params.a > 0 and params.b > 0):
        raise FieldError("appendix field needs a > 0 and b > 0")
    if not np.isfinite(params.k):
        raise FieldError("appendix field needs finite k")
    if require_two_well and not params.two_well:
        raise FieldError(
            f"a^2 - k^2/b = {params.a**2 - params.k**2 / params.b:.6g} <= 0: "
            "not in the two-well regime"
        )
    ref = np.asarray(params.reference_point, dtype=float)
    if box is None:
        half = DEFAULT_APPENDIX_HALF_WIDTH * max(1.0, params.a)
        box = np.stack([ref - half, ref + half], axis=1)
    model = AppendixModel(ref)
    rebuild = functools.partial(
        _rebuild_appendix, reference_point=tuple(ref), box=box, require_two_well=require_two_well
    )

    return FieldSpec(
        dimension=2,
        parameters=np.array([params.a, params.b, params.k]),
        drift=model.drift,
        box=np.asarray(box, dtype=float),
        potential=model.potential,
        solenoidal=model.solenoidal,
        jacobian=model.jacobian,
        name=f"appendix(a={params.a:g}, b={params.b:g}, k={params.k:g})",
        rebuild=rebuild,
    )


def _rebuild_appendix(params: FloatArray, reference_point, box, require_two_well) -> FieldSpec:
    a, b, k = (float(v) for v in params)
    return make_appendix_field(
        AppendixParams(a, b, k, reference_point), box=box, require_two_well=require_two_well
    )


# ---------------------------------------------------------------------------
# Polynomial fields
# ---------------------------------------------------------------------------

Term = tuple[float, tuple[int, ...]]


def _parse_terms(raw: Sequence[Sequence[float]], n: int, where: str) -> list[Term]:
    terms = []
    for i, t in enumerate(raw):
        if len(t) != n + 1:
            raise FieldError(f"{where}[{i}]: expected [coef, e_1..e_{n}], got {list(t)}")
        exps = tuple(int(e) for e in t[1:])
        if any(e < 0 or e != f for e, f in zip(exps, t[1:])):
            raise FieldError(f"{where}[{i}]: exponents must be non-negative integers")
        terms.append((float(t[0]), exps))
    return terms


def _monomials(p: FloatArray, exps: NDArray[np.int64]) -> FloatArray:
    # p: (..., n), exps: (T, n) -> (..., T)
    out = np.ones(p.shape[:-1] + (exps.shape[0],))
    for d in range(exps.shape[1]):
        col = exps[:, d]
        if np.any(col):
            out = out * np.power(p[..., d : d + 1], col)
    return out


class PolynomialTable:
    """Sparse polynomial ``sum_t c_t prod_d p_d^{e_td}``, coefficients passed at call time."""

    def __init__(self, exps: Sequence[tuple[int, ...]], n: int):
        self.n = n
        self.exps = np.asarray(exps, dtype=np.int64).reshape(-1, n)

    def __call__(self, p: FloatArray, coefs: FloatArray) -> FloatArray:
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape[:-1])
        if self.exps.shape[0] == 0:
            return out
        mono = _monomials(p, self.exps)
        # fixed-order elementwise sum: row results must not depend on batch size
        for t in range(self.exps.shape[0]):
            out = out + coefs[t] * mono[..., t]
        return out

    def derivative(self, axis: int) -> tuple["PolynomialTable", FloatArray]:
        """Derivative table and the per-term multipliers."""
        mult = self.exps[:, axis].astype(float)
        exps = self.exps.copy()
        exps[:, axis] = np.maximum(exps[:, axis] - 1, 0)
        return PolynomialTable([tuple(e) for e in exps], self.n), mult


class PolynomialModel:
    """Drift, potential, solenoidal part and Jacobian of a polynomial field.

    The flat parameter vector concatenates the drift, potential and
    solenoidal coefficients in declaration order.
    """

    def __init__(
        self,
        n: int,
        drift: Sequence[Sequence[Term]],
        potential: Sequence[Term] | None,
        solenoidal: Sequence[Sequence[Term]] | None,
    ):
        self.n = n
        self.drift_tables = [PolynomialTable([e for _, e in comp], n) for comp in drift]
        self.pot_table = (
            PolynomialTable([e for _, e in potential], n) if potential is not None else None
        )
        self.sol_tables = (
            [PolynomialTable([e for _, e in comp], n) for comp in solenoidal]
            if solenoidal is not None
            else None
        )
        sizes = [len(c) for c in drift]
        sizes.append(len(potential) if potential is not None else 0)
        sizes.extend(len(c) for c in solenoidal or [])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.n_drift = len(drift)
        self.jac_tables = [
            [t.derivative(j) for j in range(n)] for t in self.drift_tables
        ]

    def _coefs(self, params: FloatArray, slot: int) -> FloatArray:
        return params[self.offsets[slot] : self.offsets[slot + 1]]

    def drift(self, p: FloatArray, params: FloatArray) -> FloatArray:
        return np.stack(
            [t(p, self._coefs(params, i)) for i, t in enumerate(self.drift_tables)], axis=-1
        )

    def potential(self, p: FloatArray, params: FloatArray) -> FloatArray:
        return self.pot_table(p, self._coefs(params, self.n_drift))

    def solenoidal(self, p: FloatArray, params: FloatArray) -> FloatArray:
        base = self.n_drift + 1
        return np.stack(
            [t(p, self._coefs(params, base + i)) for i, t in enumerate(self.sol_tables)],
            axis=-1,
        )

    def potential_gradient(self, p: FloatArray, params: FloatArray) -> FloatArray:
        c = self._coefs(params, self.n_drift)
        cols = []
        for j in range(self.n):
            dt, mult = self.pot_table.derivative(j)
            cols.append(dt(p, mult * c))
        return np.stack(cols, axis=-1)

    def solenoidal_divergence(self, p: FloatArray, params: FloatArray) -> FloatArray:
        base = self.n_drift + 1
        total = np.zeros(np.shape(p)[:-1])
        for i, t in enumerate(self.sol_tables):
            dt, mult = t.derivative(i)
            total = total + dt(p, mult * self._coefs(params, base + i))
        return total

    def jacobian(self, p: FloatArray, params: FloatArray) -> FloatArray:
        p = np.asarray(p, dtype=float)
        jac = np.empty(p.shape + (self.n,))
        for i, row in enumerate(self.jac_tables):
            c = self._coefs(params, i)
            for j, (dt, mult) in enumerate(row):
                jac[..., i, j] = dt(p, mult * c)
        return jac


def _gradient_terms(potential: Sequence[Term], n: int) -> list[list[Term]]:
    """Terms of ``-grad V`` for a polynomial potential."""
    out: list[list[Term]] = []
    for d in range(n):
        comp = []
        for c, e in potential:
            if e[d] > 0:
                ne = list(e)
                ne[d] -= 1
                comp.append((-c * e[d], tuple(ne)))
        out.append(comp)
    return out


class _PolynomialBuilder:
    """Builds (and validates) a polynomial FieldSpec for a coefficient vector."""

    def __init__(self, model: PolynomialModel, n: int, box: FloatArray, name: str, check_points: int):
        self.model = model
        self.n = n
        self.box = box
        self.name = name
        self.check_points = check_points

    def __call__(self, params: FloatArray) -> FieldSpec:
        model, name = self.model, self.name
        has_pot = model.pot_table is not None
        has_sol = model.sol_tables is not None
        spec = FieldSpec(
            dimension=self.n,
            parameters=params,
            drift=model.drift,
            box=self.box,
            potential=model.potential if has_pot else None,
            solenoidal=model.solenoidal if has_sol else None,
            jacobian=model.jacobian,
            name=name,
            rebuild=self,
        )
        pts = sample_points(spec.box, self.check_points)
        if has_sol:
            div = np.max(np.abs(model.solenoidal_divergence(pts, spec.parameters)))
            if div > SOLENOIDAL_DIV_TOL:
                raise FieldError(f"{name}: solenoidal part has divergence {div:.3g}")
        if has_pot and has_sol:
            minus_grad = -model.potential_gradient(pts, spec.parameters)
            err = np.max(
                np.abs(
                    model.drift(pts, spec.parameters)
                    - minus_grad
                    - model.solenoidal(pts, spec.parameters)
                )
            )
            if err > DECOMPOSITION_TOL * max(1.0, float(np.max(np.abs(minus_grad)))):
                raise FieldError(
                    f"{name}: drift != -grad(potential) + solenoidal (max error {err:.3g})"
                )
        return spec


def make_polynomial_field(
    dimension: int,
    box: ArrayLike,
    drift: Sequence[Sequence[Sequence[float]]] | None = None,
    potential: Sequence[Sequence[float]] | None = None,
    solenoidal: Sequence[Sequence[Sequence[float]]] | None = None,
    name: str = "polynomial",
    check_points: int = 64,
) -> FieldSpec:
    """Build a polynomial field from coefficient tables.

    Each table entry is ``[coef, e_1, ..., e_n]``.  ``drift`` lists one table
    per component; when omitted it is assembled as ``-grad(potential) +
    solenoidal``.  Declared parts are checked for the reconstruction identity
    and for a divergence-free solenoidal part at ``check_points`` samples.
    """
    n = int(dimension)
    pot = _parse_terms(potential, n, "potential") if potential is not None else None
    sol = (
        [_parse_terms(c, n, f"solenoidal[{i}]") for i, c in enumerate(solenoidal)]
        if solenoidal is not None
        else None
    )
    if sol is not None and len(sol) != n:
        raise FieldError(f"solenoidal needs {n} component tables, got {len(sol)}")
    if drift is None:
        if pot is None and sol is None:
            raise FieldError("a polynomial field needs a drift table or analytic parts")
        drift_terms = _gradient_terms(pot, n) if pot is not None else [[] for _ in range(n)]
        if sol is not None:
            drift_terms = [d + s for d, s in zip(drift_terms, sol)]
    else:
        if len(drift) != n:
            raise FieldError(f"drift needs {n} component tables, got {len(drift)}")
        drift_terms = [_parse_terms(c, n, f"drift[{i}]") for i, c in enumerate(drift)]

    model = PolynomialModel(n, drift_terms, pot, sol)
    coefs = [c for comp in drift_terms for c, _ in comp]
    coefs += [c for c, _ in pot] if pot is not None else []
    coefs += [c for comp in sol for c, _ in comp] if sol is not None else []

    build = _PolynomialBuilder(model, n, np.asarray(box, dtype=float), name, check_points)
    return build(np.asarray(coefs, dtype=float))


def make_linear_field(matrix: ArrayLike, box: ArrayLike | None = None, name: str = "linear") -> FieldSpec:
    """``A(p) = M p`` as a polynomial field (parameters are the entries of ``M``)."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    if box is None:
        box = [[-10.0, 10.0]] * n
    drift = []
    for i in range(n):
        comp = []
        for j in range(n):
            e = [0] * n
            e[j] = 1
            comp.append([m[i, j], *e])
        drift.append(comp)
    return make_polynomial_field(n, box, drift=drift, name=name)


def make_quadratic_potential_field(
    n: int = 2, box: ArrayLike | None = None, stiffness: float = 1.0
) -> FieldSpec:
    """Pure gradient field of ``V = stiffness/2 |p|^2``."""
    if box is None:
        box = [[-10.0, 10.0]] * n
    pot = []
    for d in range(n):
        e = [0] * n
        e[d] = 2
        pot.append([0.5 * stiffness, *e])
    zero_sol = [[] for _ in range(n)]
    return make_polynomial_field(
        n, box, potential=pot, solenoidal=zero_sol, name=f"quadratic-well(n={n})"
    )
