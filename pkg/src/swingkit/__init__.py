"""Swing-option pricing and policy analysis on scenario lattices.

The problem: maximize E[integral of u(s)X(s) ds] over adapted exercise rates
u in [0, L] with total volume at most 1. The package solves it by backward
induction on (time, node, volume level) grids, extracts bang-bang policies,
and cross-checks the solution through optimal-stopping representations of
the marginal value and martingale dual bounds.
"""

from .models import (LatticeNode, PathEnsemble, ScenarioLattice, TimeGrid,
                     backward_extremum, build_binary_example, build_binomial,
                     count_paths, enumerate_paths, read_lattice, sample_paths,
                     write_lattice)
from .solver import (BoundaryReport, DerivativeField, InvariantError,
                     LipschitzDiagnostic, ResidualReport, ValueField, VolumeGrid,
                     bellman_residual, boundary_check, check_value_invariants,
                     derivatives, lipschitz_diagnostic, solve)
from .policy import (ControlPath, ExerciseBoundary, ExerciseRegions,
                     MollifiedControl, PolicyField, RolloutBundle, check_inclusion,
                     check_saturation, exercise_regions, exit_times, extract_policy,
                     mollified_iterate, rollout)
from .stopping import (DoobDecomposition, MarginalReport, MarginalRow, SnellField,
                       StopWindows, StoppingRule, check_snell, doob_decomposition,
                       evaluate_stop_rule, marginal_value_report,
                       optimal_predictable_stop, snell, stop_windows)
from .duality import (DualReport, GapRow, MartingaleField, OptimalMartingaleResult,
                      build_optimal_martingale, constant_martingale,
                      doob_martingale_of_terminal, dual_value, duality_gap_study,
                      random_martingale)
from .oracle import EnumerationResult, brute_force_value, closed_form

__version__ = "0.1.0"

__all__ = [
    "LatticeNode", "PathEnsemble", "ScenarioLattice", "TimeGrid",
    "backward_extremum", "build_binary_example", "build_binomial", "count_paths",
    "enumerate_paths", "read_lattice", "sample_paths", "write_lattice",
    "BoundaryReport", "DerivativeField", "InvariantError", "LipschitzDiagnostic",
    "ResidualReport", "ValueField", "VolumeGrid", "bellman_residual",
    "boundary_check", "check_value_invariants", "derivatives",
    "lipschitz_diagnostic", "solve",
    "ControlPath", "ExerciseBoundary", "ExerciseRegions", "MollifiedControl",
    "PolicyField", "RolloutBundle", "check_inclusion", "check_saturation",
    "exercise_regions", "exit_times", "extract_policy", "mollified_iterate",
    "rollout",
    "DoobDecomposition", "MarginalReport", "MarginalRow", "SnellField",
    "StopWindows", "StoppingRule", "check_snell", "doob_decomposition",
    "evaluate_stop_rule", "marginal_value_report", "optimal_predictable_stop",
    "snell", "stop_windows",
    "DualReport", "GapRow", "MartingaleField", "OptimalMartingaleResult",
    "build_optimal_martingale", "constant_martingale",
    "doob_martingale_of_terminal", "dual_value", "duality_gap_study",
    "random_martingale",
    "EnumerationResult", "brute_force_value", "closed_form",
    "__version__",
]
