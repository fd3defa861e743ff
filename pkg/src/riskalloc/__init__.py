"""Stochastic root finding for systemic shortfall risk allocations.

Projected Robbins-Monro and Polyak-Ruppert averaged iterations for the
optimality system of multivariate shortfall risk, with online estimators of
the asymptotic covariance, confidence intervals, correlated loss samplers
and reference solutions.
"""
from .estimators import (CovEstimator, JacEstimator, SingularJacobianError, asymptotic_cov,
                         ci_half_width, confidence_interval, diagnose_gain, normal_quantile,
                         update_cov, update_jac)
from .loss import LossKind, LossSpec, NonFiniteResultError, evaluate, field, gradient
from .oracle import (ExpGaussModel, ExpGaussParams, SAAConvergenceError, exact_allocation,
                     saa_root, src)
from .sa import (Rectangle, ReplicationError, Replications, RunConfig, StepSchedule,
                 Trajectory, normalized_error, pr_average, project, run_replications, run_rm)
from .samplers import (CalibrationError, CompoundPoissonSpec, GaussianSpec,
                       InfeasibleCorrelationError, JumpDistribution, bivariate_normal_cdf,
                       calibrate_pair, count_correlation, make_rng, poisson_cdf_inverse,
                       sample_compound_poisson, sample_gaussian)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
