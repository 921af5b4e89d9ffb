"""Numerical information geometry for parametric probability families."""

__version__ = "0.1.0"

from .errors import (BasePointMismatch, BoundaryError, DegeneracyError, DimensionError, DomainError,
                     ExperimentError, FamilyConstructionError, IntegrationError, NonConvergenceError,
                     StatManifoldError, SupportError)
from .family import (BUILTINS, Box, ParametricFamily, bernoulli, box, categorical, gaussian,
                     gaussian_known_sigma, gaussian_natural, poisson, uniform_beta_mixture,
                     validate_family)
from .integrate import Budget, expect
from .metric import FisherMatrix, fisher_matrix, fisher_matrix_hessian, inverse_metric
from .connection import alpha_connection, christoffel_second_kind, convert_connection, skewness_tensor
from .curvature import flatness_report, riemann_tensor, sectional_curvature
from .geodesic import exponential_map, integrate_geodesic
from .inference import (CurvedModelSpec, EstimatorSpec, asymptotic_mse, cramer_rao_check,
                        estimator_covariance, k_tensor, mse_experiment)

__all__ = [name for name in dir() if not name.startswith("_")]
