"""
Monte-Carlo reparameterization gradient estimators of the energy and the
negative ELBO, estimators of the assumption statistics, and a central
finite-difference oracle.

Every estimator draws its base samples from a caller-owned numpy Generator,
so two estimators handed clones of the same stream see the same u's.
"""

import logging
import math
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from bbvi import utils
from bbvi.errors import ContractViolation
from bbvi.family import (
    FamilyConfig,
    VariationalParams,
    lower_indices,
    neg_entropy_grad,
    reparameterize,
    scale_matrix,
    unflatten,
)
from bbvi.models import AssumptionStatistic, GradientEstimate
from bbvi.targets import Target

logger = logging.getLogger(__name__)


def _draw(config: FamilyConfig, rng: np.random.Generator, M: int) -> np.ndarray:
    if M < 1:
        raise ContractViolation(f"Number of Monte-Carlo samples must be at least 1, got {M}")
    return config.base.draw(rng, (M, config.dim))


def path_gradients(params: VariationalParams, config: FamilyConfig, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """
    Pull per-sample z-gradients g back through T_lambda(u) = C u + m.

    d/dm_i = g_i, d/ds_i = phi'(s_i) u_i g_i, d/dL_ij = u_j g_i (j < i).
    Returns an (M, p) array of flattened per-sample gradients.
    """
    u = np.atleast_2d(u)
    g = np.atleast_2d(g)
    d = config.dim
    blocks = [g, config.conditioner.derivative(params.s) * u * g]
    if config.is_cholesky:
        rows, cols = lower_indices(d)
        blocks.append(g[:, rows] * u[:, cols])
    return np.concatenate(blocks, axis=1)


def per_sample_energy_grads(params: VariationalParams, config: FamilyConfig, target: Target, u) -> np.ndarray:
    """nabla_lambda l(T_lambda(u)) for each row of u."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    z = reparameterize(params, config, u)
    return path_gradients(params, config, u, target.grad_neg_log_joint(z))


def per_sample_stl_grads(params: VariationalParams, config: FamilyConfig, target: Target, u) -> np.ndarray:
    """
    Sticking-the-landing gradients: path derivative of l(T_lambda(u)) plus the
    path derivative of log q_nu(T_lambda(u)) with nu held at the current lambda.
    Since grad_z log q(z) = -C^-T C^-1 (z - m) = -C^-T u, the score never needs z.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    C = scale_matrix(params, config)
    z = u @ C.T + params.m
    score = -solve_triangular(C, u.T, lower=True, trans="T").T
    return path_gradients(params, config, u, target.grad_neg_log_joint(z) + score)


def summarize(per_sample: np.ndarray, shift: np.ndarray | None = None) -> GradientEstimate:
    """Mean, unbiased traced variance and per-coordinate standard errors of per-sample gradients."""
    n = per_sample.shape[0]
    mean, standard_error = utils.mean_and_standard_error(per_sample)
    trace_variance = float(per_sample.var(axis=0, ddof=1).sum()) if n > 1 else math.inf
    if shift is not None:
        mean = mean + shift
    return GradientEstimate(
        mean=mean,
        per_sample_trace_variance=trace_variance,
        samples_used=n,
        standard_error=standard_error,
    )


def energy_grad(params: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> GradientEstimate:
    u = _draw(config, rng, M)
    return summarize(per_sample_energy_grads(params, config, target, u))


def total_grad_cfe(params: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> GradientEstimate:
    """Closed-form entropy estimator: MC energy gradient plus the exact entropy gradient."""
    u = _draw(config, rng, M)
    per_sample = per_sample_energy_grads(params, config, target, u)
    return summarize(per_sample, shift=neg_entropy_grad(params, config))


def total_grad_stl(params: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> GradientEstimate:
    u = _draw(config, rng, M)
    return summarize(per_sample_stl_grads(params, config, target, u))


TOTAL_GRADIENT_ESTIMATORS = {
    "cfe": total_grad_cfe,
    "stl": total_grad_stl,
}


def assumption_convexity_stat(params: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> AssumptionStatistic:
    """Per-coordinate estimates of E g_i(lambda; u) u_i, which must be >= 0 for a convex energy."""
    u = _draw(config, rng, M)
    g = target.grad_neg_log_joint(reparameterize(params, config, u))
    mean, standard_error = utils.mean_and_standard_error(g * u)
    return AssumptionStatistic(mean=mean, standard_error=standard_error)


def assumption_smoothness_stat(params: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> AssumptionStatistic:
    """Per-coordinate estimates of E g_i(lambda; u) u_i phi''(s_i)."""
    u = _draw(config, rng, M)
    curvature = config.conditioner.second_derivative(params.s)
    if not np.any(curvature):
        # phi'' vanishes identically (identity conditioner): the statistic is exactly zero.
        zeros = np.zeros(config.dim)
        return AssumptionStatistic(mean=zeros, standard_error=zeros.copy())
    g = target.grad_neg_log_joint(reparameterize(params, config, u))
    mean, standard_error = utils.mean_and_standard_error(g * u * curvature)
    return AssumptionStatistic(mean=mean, standard_error=standard_error)


def expected_smoothness_samples(params_a: VariationalParams, params_b: VariationalParams, config: FamilyConfig, target: Target, M: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of ||nabla f(lambda; u) - nabla f(lambda'; u)||^2 under common u."""
    u = _draw(config, rng, M)
    diff = per_sample_energy_grads(params_a, config, target, u) - per_sample_energy_grads(params_b, config, target, u)
    return np.sum(diff * diff, axis=1)


def finite_difference(objective: Callable[[np.ndarray], float], lam, step: float = 1e-6) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar objective of the flat parameter vector.

    Args:
        objective: Function of the flattened parameter vector.
        lam: Point at which the gradient is taken.
        step: Difference step, must be positive.

    Returns:
        Vector of (objective(lam + step e_j) - objective(lam - step e_j)) / (2 step).
    """
    if step <= 0:
        raise ContractViolation(f"finite_difference step must be positive, got {step}")

    lam = np.asarray(lam, dtype=float)
    grad = np.zeros(lam.size)
    x = lam.copy()
    for j in range(lam.size):
        x[j] = lam[j] + step
        f_plus = objective(x)
        x[j] = lam[j] - step
        f_minus = objective(x)
        x[j] = lam[j]
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad


def fixed_draw_objective(config: FamilyConfig, target: Target, u) -> Callable[[np.ndarray], float]:
    """lambda -> l(T_lambda(u)) on the flat vector, the objective behind single-sample gradient checks."""
    u = np.asarray(u, dtype=float)

    def objective(vector: np.ndarray) -> float:
        params = unflatten(vector, config)
        return float(target.neg_log_joint(reparameterize(params, config, u)))

    return objective


def single_sample_grad(params: VariationalParams, config: FamilyConfig, target: Target, u) -> np.ndarray:
    return per_sample_energy_grads(params, config, target, u)[0]
