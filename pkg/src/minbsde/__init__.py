"""Regression Monte Carlo for constrained BSDEs and HJB integro-PDEs."""
from .bsde import (PROJECTION, ConstraintReport, StabilityError, ValueEstimate, ValueSurface,
                   check_a_independence, driver_eval, estimate_z, monotonicity_in_n,
                   penalized_backward_sweep, projection_backward_sweep)
from .dual import (GirsanovWeight, TiltError, TiltSpec, constant_tilt, dual_value_estimate,
                   extract_bang_bang_tilt, girsanov_weight, girsanov_weights, toward_atom_tilt,
                   weight_martingale_check)
from .forward import PathBundle, SimulationAborted, TimeGrid, path_moment_check, \
    sample_regime_path, simulate_paths
from .model import (CatalogError, DriverSpec, FiniteJumpMeasure, ModelSpec, NumericError,
                    RegimeSet, make_catalog_problem, terminal_payoff)
from .pde import CFLError, FDGrid, FDSolution, apply_generator, fd_solve_hjb, fd_value_at, \
    make_fd_grid
from .regression import BasisSpec, FitResult, design_matrix, ls_fit, predict

__version__ = "0.1.0"
