"""Trait concentration in phenotype-structured populations spread over K patches.

Small-mutation limits of selection-mutation-migration systems: a PDE time
stepper, the effective Hamiltonian (Perron root of the patch fitness
matrix), a direct solver for the limiting Dirac masses, and diagnostics
comparing the two.
"""
__version__ = "0.1.0"

from .errors import (AssumptionError, BlowUpError, BracketError, ConfigError, InfeasibleError,
                     NumericalError, PatchPopError, PositivityError, StabilityError)
from .model import (GrowthSpec, PatchModel, Tabulated, build_model, growth, load_config,
                    mirror_quadratic, validate_assumptions)
from .hamiltonian import (effective_hamiltonian, fitness_matrix, hamiltonian_values, landscape,
                          perron_pair, quartic_G, trace_F)
from .pde import (DensityState, GridSpec, InitialBump, RunOptions, init_state, pressures,
                  run_to_steady, step)
from .asymptotic import (AsymptoticSolution, dirac_weights, migration_sweep, solve_general,
                         solve_symmetric, verify_solution)
from .concentration import (Tolerances, compare_limits, extract_diracs, hopf_cole,
                            patch_coupling_gap, semiconvexity_deficit)
