"""Pseudospectral simulation and optimization toolkit for the convective
Brinkman-Forchheimer equations on the periodic torus, with Monte Carlo
Laplace functionals converging to a deterministic control value in the
small-noise limit."""

from .errors import BlowupError, ConfigurationError
from .fields import (PhysicalGrid, SpectralField, field_from_json,
                     field_to_json, inner, load_field, norm, project_leray,
                     random_divergence_free, save_field, to_physical,
                     to_spectral)
from .operators import (ForcingSpec, PhysicalParams, apply_absorption,
                        apply_convection, apply_stokes, drift,
                        monotonicity_defect, pair_scale,
                        torus_identity_residual)
from .simulate import (MomentCondition, NoiseSpec, TimeGrid, Trajectory,
                       check_moment_condition, continuous_dependence_gap,
                       exponential_moment_statistic, sample_noise_increment,
                       simulate, step)
from .laplace import (LaplaceEstimate, Observable, constant_observable,
                      estimate_laplace, estimate_multi_time,
                      linear_observable, log_mean_exp,
                      saturating_distance_observable, tanh_observable)
from .control import (ControlPath, OptimizerOptions, ValueResult,
                      cost_and_gradient, dpp_residual, minimize_value,
                      solve_controlled)
from .harness import (ConvergenceReport, ExperimentConfig, PropertyReport,
                      load_config, run_convergence_study, run_moment_study,
                      run_property_suite)

__version__ = "0.1.0"
