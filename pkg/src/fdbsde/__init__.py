"""Regime-switching factor BSDEs for forward exponential utility under defaults.

Modules: scenario (inputs and constants), defaults (default times and
densities), factor (factor paths), driver (pointwise optimisation), solver
(grid BSDE solver and vanishing-discount limit), harness (Monte Carlo checks),
cli (command line).
"""
from .errors import (AssumptionError, DomainError, FdbsdeError, NumericalError, ParseError, ScenarioError,
                     SchemaError, SemanticError)
from .scenario import builtin_scenario, check_dissipativity, compute_constants, load_scenario, scenario_from_dict
from .solver import ergodic_continuation, ergodic_residual, solve_chain, solve_regime

__all__ = [
    "AssumptionError", "DomainError", "FdbsdeError", "NumericalError", "ParseError", "ScenarioError",
    "SchemaError", "SemanticError", "builtin_scenario", "check_dissipativity", "compute_constants",
    "load_scenario", "scenario_from_dict", "ergodic_continuation", "ergodic_residual", "solve_chain",
    "solve_regime",
]
