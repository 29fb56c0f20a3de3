"""Price-adjustment dynamics: critical points, Hodge split, noisy transitions, action paths."""

from __future__ import annotations

__version__ = "0.1.0"

from .critical import CriticalPoint, basin_of_attraction, classify, compare_scenarios, find_critical_points
from .dynamics import (
    NoiseSpec,
    Trajectory,
    detect_transitions,
    energy_identity_check,
    integrate_deterministic,
    mean_first_passage,
    run_ensemble,
    simulate_sde,
)
from .field import (
    AppendixParams,
    FieldError,
    FieldSpec,
    eval_excess_demand,
    eval_jacobian,
    make_appendix_field,
    make_polynomial_field,
)
from .hodge import GridSpec, analytic_decomposition, decompose_on_grid
from .paths import (
    PiecewisePath,
    appendix_paths,
    line_integral_solenoidal,
    minimize_action,
    onsager_machlup_action,
    positivity_margin,
)

__all__ = [
    "AppendixParams",
    "CriticalPoint",
    "FieldError",
    "FieldSpec",
    "GridSpec",
    "NoiseSpec",
    "PiecewisePath",
    "Trajectory",
    "analytic_decomposition",
    "appendix_paths",
    "basin_of_attraction",
    "classify",
    "compare_scenarios",
    "decompose_on_grid",
    "detect_transitions",
    "energy_identity_check",
    "eval_excess_demand",
    "eval_jacobian",
    "find_critical_points",
    "integrate_deterministic",
    "line_integral_solenoidal",
    "make_appendix_field",
    "make_polynomial_field",
    "mean_first_passage",
    "minimize_action",
    "onsager_machlup_action",
    "positivity_margin",
    "run_ensemble",
    "simulate_sde",
]
