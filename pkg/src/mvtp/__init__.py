"""Energy-balancing estimation for modified vector-valued treatment policies."""

from .balance import (SolverConfig, Weights, classification_weights, effective_sample_size,
                      project_scaled_simplex, solve_energy_weights)
from .data import Dataset, Standardizer, load_csv, validate_schema, write_csv
from .diagnose import error_decomposition, permutation_balance_test, tau_sweep
from .energy import EUCLIDEAN, GAUSSIAN, build_gram, energy_gradient, weighted_energy_distance
from .errors import *  # noqa: F401,F403
from .estimate import (EstimationRecipe, PolicyEffectEstimate, augmented_estimate,
                       bootstrap_ci, run_pipeline, weighted_estimate)
from .outcome import OutcomeConfig
from .plasmode import (BenchmarkConfig, PlasmodeConfig, generate_dataset, plasmode_mu,
                       run_benchmark, synthetic_source)
from .policy import (ScalePolicy, VentSettings, builtin_policy, mechanical_power,
                     policy_from_config, shift_dataset)
from .sensitivity import (effect_bounds, extremal_bounds, largest_significant_lambda,
                          sensitivity_curve)

__version__ = "0.1.0"
