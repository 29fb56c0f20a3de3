"""Helmholtz-Hodge split ``A = -grad V + Abar`` on a node grid.

The discrete gradient is central in the interior and second-order one-sided
on the box faces.  The Poisson equation is assembled as the composition of
the same divergence and gradient stencils, so the recovered solenoidal part
has zero discrete divergence at interior nodes up to solver precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import FieldError, FieldSpec, FloatArray, potential_gradient, sample_points

MIN_RESOLUTION = 8
MAX_NODES = 4_000_000
POISSON_TOL = 1e-10
MAX_REFINEMENTS = 20
BOUNDARY_CONDITIONS = ("auto", "flux", "potential")


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    box: FloatArray
    resolution: tuple[int, ...]

    def __post_init__(self) -> None:
        box = np.asarray(self.box, dtype=float)
        res = tuple(int(r) for r in np.atleast_1d(self.resolution))
        if box.ndim != 2 or box.shape[1] != 2:
            raise FieldError(f"grid box must have shape (n, 2), got {box.shape}")
        if len(res) != box.shape[0]:
            raise FieldError("grid resolution needs one entry per axis")
        if np.any(box[:, 0] >= box[:, 1]):
            raise FieldError("grid box needs min < max on every axis")
        if min(res) < MIN_RESOLUTION:
            raise FieldError(f"grid too coarse: resolution {res} < {MIN_RESOLUTION} per axis")
        if int(np.prod(res)) > MAX_NODES:
            raise FieldError(f"grid has {int(np.prod(res))} nodes, above the cap {MAX_NODES}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "resolution", res)

    @property
    def ndim(self) -> int:
        return len(self.resolution)

    @property
    def spacing(self) -> FloatArray:
        return (self.box[:, 1] - self.box[:, 0]) / (np.asarray(self.resolution) - 1)

    def axes(self) -> list[FloatArray]:
        return [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.box, self.resolution)]

    def nodes(self) -> FloatArray:
        """Node coordinates, shape ``resolution + (ndim,)`` (``ij`` indexing)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def interior_mask(self, margin: int = 1) -> np.ndarray:
        mask = np.zeros(self.resolution, dtype=bool)
        mask[tuple(slice(margin, r - margin) for r in self.resolution)] = True
        return mask


@dataclass(frozen=True)
class DecompositionResult:
    grid: GridSpec
    field_grid: FloatArray
    potential_grid: FloatArray
    solenoidal_grid: FloatArray
    reconstruction_residual: float
    divergence_residual: float
    poisson_residual: float
    boundary_condition: str
    gauge_note: str = "V is defined up to an additive constant; normalized to zero grid mean"


@dataclass(frozen=True)
class AnalyticDecomposition:
    potential: Callable[[FloatArray], FloatArray]
    solenoidal: Callable[[FloatArray], FloatArray]
    reconstruction_residual: float


def _diff_matrix(n: int, h: float) -> sp.csr_matrix:
    """1-D first derivative: central inside, one-sided second order at both ends."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5, 0.5]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5, 2.0, -0.5, 1.5, -2.0, 0.5]
    return sp.csr_matrix((np.asarray(vals) / h, (rows, cols)), shape=(n, n))


def gradient_operators(grid: GridSpec) -> list[sp.csr_matrix]:
    """Sparse partial-derivative operators acting on C-order flattened node arrays."""
    ops = []
    for d, (r, h) in enumerate(zip(grid.resolution, grid.spacing)):
        factors = [sp.identity(m, format="csr") for m in grid.resolution]
        factors[d] = _diff_matrix(r, h)
        op = factors[0]
        for f in factors[1:]:
            op = sp.kron(op, f, format="csr")
        ops.append(op)
    return ops


def discrete_gradient(values: FloatArray, grid: GridSpec) -> FloatArray:
    """Gradient of node samples; shape ``resolution + (ndim,)``."""
    flat = np.asarray(values, dtype=float).ravel()
    return np.stack(
        [(g @ flat).reshape(grid.resolution) for g in gradient_operators(grid)], axis=-1
    )


def _central_divergence(vec: FloatArray, grid: GridSpec) -> FloatArray:
    inner = tuple(slice(1, r - 1) for r in grid.resolution)
    div = np.zeros(tuple(r - 2 for r in grid.resolution))
    for d, h in enumerate(grid.spacing):
        hi = list(inner)
        lo = list(inner)
        hi[d] = slice(2, None)
        lo[d] = slice(0, -2)
        div += (vec[tuple(hi) + (d,)] - vec[tuple(lo) + (d,)]) / (2.0 * h)
    return div


def check_divergence_free(solenoidal_grid: FloatArray, grid: GridSpec) -> float:
    """Max absolute central-difference divergence over interior nodes."""
    vec = np.asarray(solenoidal_grid, dtype=float)
    if vec.shape != grid.resolution + (grid.ndim,):
        raise FieldError(
            f"solenoidal grid has shape {vec.shape}, expected {grid.resolution + (grid.ndim,)}"
        )
    return float(np.max(np.abs(_central_divergence(vec, grid))))


def _boundary_axis(grid: GridSpec) -> np.ndarray:
    """Per node: first axis on which it sits on a face, or -1 for interior nodes."""
    axis = np.full(grid.resolution, -1, dtype=int)
    idx = np.indices(grid.resolution)
    for d in reversed(range(grid.ndim)):
        on_face = (idx[d] == 0) | (idx[d] == grid.resolution[d] - 1)
        axis[on_face] = d
    return axis


def _resolve_bc(field_: FieldSpec, bc: str) -> str:
    if bc not in BOUNDARY_CONDITIONS:
        raise FieldError(f"unknown boundary condition {bc!r}; choose from {BOUNDARY_CONDITIONS}")
    if bc == "auto":
        return "potential" if field_.potential is not None else "flux"
    if bc == "potential" and field_.potential is None:
        raise FieldError(f"{field_.name}: boundary condition 'potential' needs an analytic potential")
    return bc


def decompose_on_grid(
    field_: FieldSpec,
    grid: GridSpec,
    bc: str = "auto",
    tol: float = POISSON_TOL,
    max_refinements: int = MAX_REFINEMENTS,
) -> DecompositionResult:
    """Solve ``div grad V = -div A`` on the grid and set ``Abar = A + grad V``.

    Boundary rows impose a Neumann condition on the normal derivative of V:

    ``"flux"``
        ``dV/dn = -A.n``, i.e. the solenoidal part carries no flux through
        the box faces.  Needs nothing beyond the drift.
    ``"potential"``
        ``dV/dn`` taken from the field's analytic potential, which truncates
        the unbounded-space split to the box.
    ``"auto"``
        ``"potential"`` when the field declares a potential, else ``"flux"``.

    The row of one face node beside the low corner is replaced by ``V = 0``
    to remove the constant null space; V is then shifted to zero grid mean.  The sparse LU solve is
    followed by iterative refinement until the interior residual is below
    ``tol`` (relative to the right-hand side); failing that raises
    :class:`DecompositionError` carrying the residual.
    """
    if grid.ndim != field_.dimension:
        raise FieldError("grid dimension does not match the field")
    if grid.ndim > 3:
        raise FieldError("grid decomposition is limited to dimension <= 3")
    bc = _resolve_bc(field_, bc)
    nodes = grid.nodes()
    if not np.all(field_.in_box(nodes)):
        raise FieldError(f"{field_.name}: grid box is not inside the field's domain box")
    a_grid = np.asarray(field_.evaluate(nodes), dtype=float)
    if not np.all(np.isfinite(a_grid)):
        raise FieldError(f"{field_.name}: non-finite field values on the grid")

    grads = gradient_operators(grid)
    n_nodes = int(np.prod(grid.resolution))
    a_flat = a_grid.reshape(n_nodes, grid.ndim)

    lap = sum(g @ g for g in grads).tocsr()
    rhs = -sum(g @ a_flat[:, d] for d, g in enumerate(grads))

    face_axis = _boundary_axis(grid).ravel()
    boundary = face_axis >= 0
    if bc == "flux":
        normal_target = -a_flat
    else:
        normal_target = potential_gradient(field_, nodes.reshape(n_nodes, grid.ndim))

    # pin a face node next to the low corner; the corner itself enters no other row,
    # so pinning it would leave the constant null space in place
    pin = int(np.ravel_multi_index((0,) + (1,) * (grid.ndim - 1), grid.resolution))
    keep = (~boundary).astype(float)
    keep[pin] = 0.0
    op = sp.diags(keep) @ lap
    for d, g in enumerate(grads):
        sel = (face_axis == d).astype(float)
        sel[pin] = 0.0
        op = op + sp.diags(sel) @ g
        rhs = np.where(sel > 0, normal_target[:, d], rhs)
    op = (op + sp.csr_matrix(([1.0], ([pin], [pin])), shape=op.shape)).tocsc()
    rhs[pin] = 0.0

    try:
        lu = spla.splu(op)
    except RuntimeError as exc:
        raise DecompositionError(f"Poisson factorization failed: {exc}") from exc
    v = lu.solve(rhs)
    interior = ~boundary
    scale = max(1.0, float(np.max(np.abs(rhs[interior]))))

    def interior_residual(x: FloatArray) -> float:
        return float(np.max(np.abs((op @ x - rhs)[interior]))) / scale

    res = interior_residual(v)
    for _ in range(max_refinements):
        if res <= tol:
            break
        v = v + lu.solve(rhs - op @ v)
        res = interior_residual(v)
    if not np.isfinite(res) or res > tol:
        raise DecompositionError(
            f"Poisson solve did not reach tolerance {tol:g}; relative residual {res:.3e}"
        )

    v = v - v.mean()
    grad_v = np.stack([g @ v for g in grads], axis=-1)
    sol_flat = a_flat + grad_v
    potential_grid = v.reshape(grid.resolution)
    solenoidal_grid = sol_flat.reshape(grid.resolution + (grid.ndim,))
    recon = float(np.max(np.abs(a_flat - (-grad_v + sol_flat))))
    return DecompositionResult(
        grid=grid,
        field_grid=a_grid,
        potential_grid=potential_grid,
        solenoidal_grid=solenoidal_grid,
        reconstruction_residual=recon,
        divergence_residual=check_divergence_free(solenoidal_grid, grid),
        poisson_residual=res,
        boundary_condition=bc,
    )


def analytic_decomposition(field_: FieldSpec, samples: int = 256, tol: float = 1e-10) -> AnalyticDecomposition:
    """Return the field's declared ``(V, Abar)`` after checking ``A = -grad V + Abar``."""
    if field_.potential is None or field_.solenoidal is None:
        raise FieldError(f"{field_.name}: analytic decomposition needs both potential and solenoidal parts")
    pts = sample_points(field_.box, samples)
    grad_v = potential_gradient(field_, pts)
    resid = field_.evaluate(pts) + grad_v - field_.solenoidal(pts, field_.parameters)
    err = float(np.max(np.abs(resid)))
    scale = max(1.0, float(np.max(np.abs(grad_v))))
    if err > tol * scale:
        raise FieldError(f"{field_.name}: reconstruction identity violated (max error {err:.3e})")
    return AnalyticDecomposition(
        potential=field_.eval_potential,
        solenoidal=field_.eval_solenoidal,
        reconstruction_residual=err,
    )


def write_decomposition_csv(result: DecompositionResult, path: str | Path) -> None:
    """One row per node: coordinates, V, Abar components, A components."""
    grid = result.grid
    n = grid.ndim
    coords = grid.nodes().reshape(-1, n)
    v = result.potential_grid.ravel()
    sol = result.solenoidal_grid.reshape(-1, n)
    a = result.field_grid.reshape(-1, n)
    header = (
        [f"p{i + 1}" for i in range(n)]
        + ["V"]
        + [f"Abar{i + 1}" for i in range(n)]
        + [f"A{i + 1}" for i in range(n)]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(coords.shape[0]):
            w.writerow([repr(float(x)) for x in (*coords[i], v[i], *sol[i], *a[i])])


@dataclass(frozen=True)
class AnalyticComparison:
    """Max interior errors of a grid split against the analytic one."""

    potential_error: float  # zero-mean gauge on both sides, margin 1
    solenoidal_error: float  # margin 2, clear of the one-sided boundary stencils

    def to_record(self) -> dict:
        return {"potential_error": self.potential_error, "solenoidal_error": self.solenoidal_error}


def compare_with_analytic(result: DecompositionResult, field_: FieldSpec) -> AnalyticComparison:
    if field_.potential is None or field_.solenoidal is None:
        raise FieldError(f"{field_.name}: no analytic decomposition to compare with")
    grid = result.grid
    nodes = grid.nodes()
    v = field_.eval_potential(nodes)
    v = v - v.mean()
    ev = np.abs(result.potential_grid - v)[grid.interior_mask(1)]
    ea = np.abs(result.solenoidal_grid - field_.eval_solenoidal(nodes))[grid.interior_mask(2)]
    return AnalyticComparison(float(np.max(ev)), float(np.max(ea)))
