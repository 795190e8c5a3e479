"""
Numerical verification of the identities, bounds and constants behind BBVI
with location-scale families.

Each check owns the random stream it is handed and returns a
VerificationReport. Statistical checks compare in units of Monte-Carlo
standard errors (4-SE bands); algebraic checks use a 1e-12 absolute tolerance.
`run_suite` runs the whole battery with per-check streams derived from one seed.
"""

import asyncio
import logging
import math
import time
from dataclasses import replace
from functools import reduce

import numpy as np
from scipy.optimize import minimize_scalar

from bbvi import utils
from bbvi.errors import ContractViolation, UnsupportedConfiguration
from bbvi.estimators import assumption_convexity_stat, expected_smoothness_samples, finite_difference, per_sample_energy_grads
from bbvi.family import (
    Conditioner,
    FamilyConfig,
    VariationalParams,
    energy_closed_form,
    energy_grad_closed_form,
    flatten,
    initial_params,
    lower_indices,
    reparameterize,
    scale_matrix,
    unflatten,
)
from bbvi.models import VerificationReport
from bbvi.optimizers import StepSchedule, run
from bbvi.targets import QuadraticTarget, make_conditioned_gaussian, optimal_params

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-12
SE_BAND = 4.0
SUITE_BUDGET_SECONDS = 300.0
SOFTPLUS_GRID = (-20.0, 20.0, 4001)
SOFTPLUS_L_H = 0.167096
SOFTPLUS_L_S = 0.26034
CONSTANT_TOLERANCE = 1e-3


def _report(name: str, statistic: float, tolerance: float, detail: str, seed: int | None = None) -> VerificationReport:
    statistic = float(statistic)
    status = "pass" if statistic <= tolerance else "fail"  # NaN fails
    return VerificationReport(name, status, statistic, float(tolerance), detail, seed)


def _skip(name: str, detail: str, seed: int | None = None) -> VerificationReport:
    return VerificationReport(name, "skip", float("nan"), float("nan"), detail, seed)


def _in_standard_errors(excess: float, standard_error: float) -> float:
    """excess / SE, with an exact comparison when the standard error vanishes."""
    if standard_error > 0:
        return excess / standard_error
    return 0.0 if excess <= EXACT_TOLERANCE else math.inf


def _require_identity(config: FamilyConfig):
    if not config.conditioner.is_linear:
        raise UnsupportedConfiguration(f"This check needs the identity conditioner, got {config.conditioner.kind}")


# ---------------------------------------------------------------------------
# Reparameterization identities
# ---------------------------------------------------------------------------


def reparameterization_jacobian(params: VariationalParams, config: FamilyConfig, u) -> np.ndarray:
    """The d x p Jacobian of lambda -> T_lambda(u), columns in flat [m; s; L] order."""
    u = np.asarray(u, dtype=float)
    d = config.dim
    J = np.zeros((d, config.num_params))
    J[:, :d] = np.eye(d)
    J[np.arange(d), d + np.arange(d)] = config.conditioner.derivative(params.s) * u
    if config.is_cholesky:
        rows, cols = lower_indices(d)
        J[rows, 2 * d + np.arange(rows.size)] = u[cols]
    return J


def jacobian_constant(u, config: FamilyConfig) -> float:
    """c(u): 1 + ||u||^2 for Cholesky, 1 + ||U^2||_F for mean-field."""
    u = np.asarray(u, dtype=float)
    if config.is_cholesky:
        return float(1.0 + u @ u)
    return float(1.0 + np.sqrt(np.sum(u**4)))


def _dense_scale_jacobian(params: VariationalParams, config: FamilyConfig, u: np.ndarray) -> np.ndarray:
    """Jacobian of (m, C) -> C u + m over [m; row-major vec(C)] for a full d x d scale, by central differences."""
    d = config.dim
    point = np.concatenate([params.m, scale_matrix(params, config).ravel()])

    def coordinate(i: int):
        return lambda v: float(v[i] + v[d:].reshape(d, d)[i] @ u)

    # the map is linear, so a unit step is exact up to rounding
    return np.vstack([finite_difference(coordinate(i), point, step=1.0) for i in range(d)])


def _jacobian_deviation(config: FamilyConfig, u: np.ndarray) -> float:
    params = initial_params(config)
    J = reparameterization_jacobian(params, config, u)
    gram = J @ J.T
    c = jacobian_constant(u, config)
    if config.is_cholesky:
        # Row i of a triangular scale sees u_1..u_i, so the Gram matrix is
        # diag(1 + cumsum(u^2)); its top entry is c(u). A dense scale gives c(u) I.
        expected = 1.0 + np.cumsum(u * u)
        dense = _dense_scale_jacobian(params, config, u)
        dense_dev = np.max(np.abs(dense @ dense.T - c * np.eye(config.dim)))
        top_dev = abs(expected[-1] - c)
        deviation = max(dense_dev, top_dev)
    else:
        expected = 1.0 + u * u
        deviation = max(0.0, expected.max() - c)
    return float(max(deviation, np.max(np.abs(gram - np.diag(expected)))))


def check_jacobian_identity(config: FamilyConfig, trials: int, rng: np.random.Generator, max_dim: int = 8) -> VerificationReport:
    """
    Assemble the exact Jacobian for `trials` random u per dimension 1..max_dim
    and compare J J^T against c(u).

    Cholesky: J J^T is exactly diag(1 + u_1^2, ..., 1 + ||u||^2), with spectral
    norm c(u); the dense-scale Jacobian satisfies J J^T = c(u) I. Mean-field:
    J J^T = diag(1 + u_i^2), bounded in norm by c(u).
    """
    _require_identity(config)
    if trials < 1:
        raise ContractViolation(f"trials must be positive, got {trials}")
    worst = 0.0
    for d in range(1, max_dim + 1):
        sized = replace(config, dim=d)
        for _ in range(trials):
            worst = max(worst, _jacobian_deviation(sized, config.base.draw(rng, d)))
    detail = f"{config.kind}: max |J J^T - c(u) structure| over d=1..{max_dim}, {trials} draws each"
    return _report(f"jacobian_identity[{config.kind}]", worst, EXACT_TOLERANCE, detail)


def check_linearity(config: FamilyConfig, trials: int, rng: np.random.Generator) -> VerificationReport:
    """T_{lambda - lambda'}(u) = T_lambda(u) - T_lambda'(u) for random triples."""
    _require_identity(config)
    worst = 0.0
    for _ in range(trials):
        a = unflatten(rng.standard_normal(config.num_params), config)
        b = unflatten(rng.standard_normal(config.num_params), config)
        diff = unflatten(flatten(a) - flatten(b), config)
        u = config.base.draw(rng, config.dim)
        lhs = reparameterize(diff, config, u, validate=False)
        rhs = reparameterize(a, config, u, validate=False) - reparameterize(b, config, u, validate=False)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return _report(f"linearity[{config.kind}]", worst, EXACT_TOLERANCE, f"{trials} random (lambda, lambda', u)")


def _random_params(config: FamilyConfig, rng: np.random.Generator) -> VariationalParams:
    d = config.dim
    m = rng.standard_normal(d)
    s = rng.uniform(0.5, 2.0, d)
    lower = 0.5 * rng.standard_normal(config.num_lower) if config.is_cholesky else None
    return VariationalParams(m=m, s=s, L=lower)


def check_squared_distance(config: FamilyConfig, M: int, rng: np.random.Generator) -> VerificationReport:
    """E ||T_lambda(u) - T_lambda'(u)||^2 = ||lambda - lambda'||^2."""
    _require_identity(config)
    a = _random_params(config, rng)
    b = _random_params(config, rng)
    u = config.base.draw(rng, (M, config.dim))
    diff = reparameterize(a, config, u) - reparameterize(b, config, u)
    mean, se = utils.mean_and_standard_error(np.sum(diff * diff, axis=1))
    exact = float(np.sum((flatten(a) - flatten(b)) ** 2))
    z = _in_standard_errors(abs(float(mean) - exact), float(se))
    detail = f"MC {float(mean):.6g} vs ||lambda - lambda'||^2 = {exact:.6g}"
    return _report(f"squared_distance[{config.kind}]", z, SE_BAND, detail)


def marginalization_value(params: VariationalParams, config: FamilyConfig, z) -> float:
    """
    Right-hand side of the u-norm marginalization: exact for Cholesky, an upper
    bound for mean-field.
    """
    d = config.dim
    k = config.base.kurtosis
    C = scale_matrix(params, config)
    dist = float(np.sum((params.m - np.asarray(z, dtype=float)) ** 2))
    frob = float(np.sum(C * C))
    if config.is_cholesky:
        return (d + 1) * dist + (d + k) * frob
    return (np.sqrt(d * k) + k * np.sqrt(d) + 1.0) * dist + config.variance_constant * frob


def check_marginalization(params: VariationalParams, config: FamilyConfig, z, M: int, rng: np.random.Generator) -> VerificationReport:
    _require_identity(config)
    u = config.base.draw(rng, (M, config.dim))
    weight = 1.0 + (np.sum(u * u, axis=1) if config.is_cholesky else np.sqrt(np.sum(u**4, axis=1)))
    dist = reparameterize(params, config, u) - np.asarray(z, dtype=float)
    mean, se = utils.mean_and_standard_error(weight * np.sum(dist * dist, axis=1))
    exact = marginalization_value(params, config, z)
    excess = float(mean) - exact
    if config.is_cholesky:
        excess = abs(excess)
    detail = f"{config.kind}: MC {float(mean):.6g} vs {'closed form' if config.is_cholesky else 'bound'} {exact:.6g}"
    return _report(f"marginalization[{config.kind}]", _in_standard_errors(excess, float(se)), SE_BAND, detail)


# ---------------------------------------------------------------------------
# Smoothness, variance and convexity
# ---------------------------------------------------------------------------


def bregman_energy(params_a: VariationalParams, params_b: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> float:
    """B_f(lambda, lambda') = f(lambda) - f(lambda') - <grad f(lambda'), lambda - lambda'>."""
    step = flatten(params_a) - flatten(params_b)
    grad_b = energy_grad_closed_form(params_b, config, target)
    return energy_closed_form(params_a, config, target) - energy_closed_form(params_b, config, target) - float(grad_b @ step)


def check_expected_smoothness(target: QuadraticTarget, pairs: int, M: int, rng: np.random.Generator, config: FamilyConfig | None = None) -> VerificationReport:
    """E ||grad f(lambda; u) - grad f(lambda'; u)||^2 <= 2 L kappa C(d, phi) B_f(lambda, lambda') per random pair."""
    if not isinstance(target, QuadraticTarget):
        raise UnsupportedConfiguration("Expected smoothness needs the closed-form Bregman divergence of a quadratic target")
    config = config or FamilyConfig(dim=target.dim)
    _require_identity(config)
    factor = 2.0 * target.smoothness * target.condition_number * config.variance_constant

    worst = -math.inf
    for _ in range(pairs):
        a = _random_params(config, rng)
        b = _random_params(config, rng)
        lhs, se = utils.mean_and_standard_error(expected_smoothness_samples(a, b, config, target, M, rng))
        rhs = factor * bregman_energy(a, b, config, target)
        worst = max(worst, _in_standard_errors(float(lhs) - rhs, float(se)))
    detail = f"{pairs} pairs, d={config.dim}, kappa={target.condition_number:.4g}; worst (LHS - RHS) in SEs"
    return _report("expected_smoothness", worst, SE_BAND, detail)


def optimum_variance(target: QuadraticTarget, config: FamilyConfig, samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Traced variance of a single-sample energy gradient at lambda*, and its standard error."""
    params = optimal_params(target, config)
    u = config.base.draw(rng, (samples, config.dim))
    per_sample = per_sample_energy_grads(params, config, target, u)
    spread = np.sum((per_sample - per_sample.mean(axis=0)) ** 2, axis=1)
    variance = float(spread.sum() / (samples - 1))
    return variance, float(spread.std(ddof=1) / np.sqrt(samples))


def optimum_variance_bound(target: QuadraticTarget, config: FamilyConfig, M: int) -> float:
    """(1/M) C(d, phi) L^2 (||z_bar - m*||^2 + ||C*||_F^2) with z_bar = m* = mu."""
    C_star = scale_matrix(optimal_params(target, config), config)
    return config.variance_constant * target.smoothness**2 * float(np.sum(C_star * C_star)) / M


def check_optimum_variance(target: QuadraticTarget, config: FamilyConfig, M: int, rng: np.random.Generator, samples: int = 100_000) -> VerificationReport:
    variance, se = optimum_variance(target, config, samples, rng)
    bound = optimum_variance_bound(target, config, M)
    z = _in_standard_errors(variance / M - bound, se / M)
    detail = f"{config.kind} d={config.dim}: sigma^2 {variance / M:.6g} vs bound {bound:.6g}"
    return _report(f"optimum_variance[{config.kind},d={config.dim}]", z, SE_BAND, detail)


def _sup_by_grid(fn, name: str) -> float:
    low, high, count = SOFTPLUS_GRID
    grid = np.linspace(low, high, count)
    values = fn(grid)
    steps = np.sign(np.diff(values))
    steps = steps[steps != 0]
    changes = int(np.count_nonzero(steps[1:] != steps[:-1]))
    if changes != 1:
        logger.warning(f"softplus_constants: {name} has {changes} slope changes on the grid, refinement may miss the supremum")
    i = int(np.argmax(values))
    if i == 0 or i == count - 1:
        raise ContractViolation(f"{name} peaks at the grid boundary; widen the search interval")
    result = minimize_scalar(lambda s: -float(fn(s)), bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden", tol=1e-8)
    return float(-result.fun)


def softplus_constants() -> tuple[float, float]:
    """
    (L_h, L_s factor) = (sup -(log softplus)''(s), sup softplus(s) softplus''(s)).
    """
    conditioner = Conditioner("softplus")
    L_h = _sup_by_grid(conditioner.neg_log_curvature, "L_h")
    L_s = _sup_by_grid(lambda s: utils.softplus(s) * utils.softplus_hess(s), "L_s")
    return L_h, L_s


def check_softplus_constants() -> VerificationReport:
    L_h, L_s = softplus_constants()
    low, high, count = SOFTPLUS_GRID
    exp_analog = float(np.max(np.abs(Conditioner("exp").neg_log_curvature(np.linspace(low, high, count)))))
    statistic = max(abs(L_h - SOFTPLUS_L_H), abs(L_s - SOFTPLUS_L_S), exp_analog)
    detail = f"L_h={L_h:.6f}, L_s factor={L_s:.6f}, exp analog of L_h={exp_analog:g}"
    return _report("softplus_constants", statistic, CONSTANT_TOLERANCE, detail)


def check_convexity_counterexample(M: int, rng: np.random.Generator) -> VerificationReport:
    """
    With A = [[1, -2], [-2, 5]] and C = [[1, 0], [1, 1]] the first coordinate of
    E g_i u_i equals (AC)_11 = -1, so the convexity assumption fails for a full-rank
    scale; the diagonal scale C = I keeps both coordinates at A_ii >= 0.
    """
    target = QuadraticTarget([[1.0, -2.0], [-2.0, 5.0]])
    cholesky = FamilyConfig(dim=2)
    full = VariationalParams(m=np.zeros(2), s=np.ones(2), L=np.ones(1))
    stat = assumption_convexity_stat(full, cholesky, target, M, rng)

    meanfield = FamilyConfig(kind="meanfield", dim=2)
    diag = assumption_convexity_stat(initial_params(meanfield), meanfield, target, M, rng)
    diagonal_ok = bool(np.all(diag.mean >= -SE_BAND * diag.standard_error))

    statistic = abs(float(stat.mean[0]) + 1.0) if diagonal_ok else math.inf
    detail = f"E g1 u1 = {stat.mean[0]:.5f} (target -1); mean-field restriction {np.round(diag.mean, 4).tolist()}"
    return _report("convexity_counterexample", statistic, 0.01, detail)


def _matrix_lemma_trial(rng: np.random.Generator, draws: int, hessian_kind: str) -> tuple[float, float, float]:
    d = int(rng.integers(1, 6))
    p = int(rng.integers(1, 7))
    L = float(rng.uniform(0.5, 5.0))
    J = rng.standard_normal((d, p)) + rng.uniform(0.1, 2.0) * rng.standard_normal((draws, d, p))
    if hessian_kind == "random":
        B = rng.standard_normal((d, d))
        eigenvalues, Q = np.linalg.eigh(0.5 * (B + B.T))
        H = (Q * np.clip(eigenvalues, -L, L)) @ Q.T
    elif hessian_kind == "scaled_identity":
        H = L * np.eye(d)
    elif hessian_kind == "zero":
        H = np.zeros((d, d))
    else:
        raise ContractViolation(f"Unknown hessian kind '{hessian_kind}'")

    curved, curved_se = utils.mean_and_standard_error(np.einsum("nip,ij,njq->npq", J, H, J, optimize=True))
    gram, gram_se = utils.mean_and_standard_error(np.einsum("nip,niq->npq", J, J))
    lhs = float(np.linalg.norm(curved, 2))
    rhs = L * float(np.linalg.norm(gram, 2))
    slack = SE_BAND * (float(np.linalg.norm(curved_se)) + L * float(np.linalg.norm(gram_se)))
    return lhs, rhs, slack


def check_matrix_lemma(trials: int, rng: np.random.Generator, draws: int = 100_000, hessian_kind: str = "random") -> VerificationReport:
    """||E J^T H J||_2 <= L ||E J^T J||_2 for random J laws and symmetric H with ||H||_2 <= L."""
    worst = -math.inf
    for _ in range(trials):
        lhs, rhs, slack = _matrix_lemma_trial(rng, draws, hessian_kind)
        worst = max(worst, _in_standard_errors(lhs - rhs, slack))
    detail = f"{trials} ({hessian_kind}) families of {draws} draws; worst (LHS - RHS) in units of the 4-SE slack"
    return _report(f"matrix_lemma[{hessian_kind}]", worst, 1.0, detail)


# ---------------------------------------------------------------------------
# Convergence rates
# ---------------------------------------------------------------------------


def fixed_stepsize_complexity(eps: float, mu: float, L: float, sigma2: float, config: FamilyConfig, M: int, dist0: float) -> tuple[float, int]:
    """
    Stepsize and iteration count that bring E||lambda_T - lambda*||^2 below eps
    for proximal SGD with a fixed stepsize on a mu-strongly convex, L-smooth target.
    """
    if eps <= 0 or mu <= 0 or L < mu or M < 1:
        raise ContractViolation(f"Need eps > 0, 0 < mu <= L and M >= 1 (eps={eps}, mu={mu}, L={L}, M={M})")
    kappa = L / mu
    C = config.variance_constant
    gamma_cap = M / (2.0 * L * kappa * C)
    gamma = min(eps * mu / (4.0 * sigma2), gamma_cap) if sigma2 > 0 else gamma_cap
    rate = max(4.0 * sigma2 / (eps * mu**2), 2.0 * kappa**2 * C / M)
    log_term = math.log(2.0 * dist0 / eps) if dist0 > 0 else 0.0
    return gamma, max(0, math.ceil(rate * log_term))


def fixed_stepsize_bound(T: int, gamma: float, mu: float, dist0_sq: float, sigma2: float) -> float:
    """(1 - gamma mu)^T ||lambda_0 - lambda*||^2 + 2 gamma sigma^2 / mu."""
    return (1.0 - gamma * mu) ** T * dist0_sq + 2.0 * gamma * sigma2 / mu


def decreasing_schedule_bound(T: int, T_kappa: int, dist0_sq: float, sigma2: float, mu: float) -> float:
    """16 T_kappa^2 ||lambda_0 - lambda*||^2 / (e^2 T^2) + 8 sigma^2 / (mu^2 T), valid for T >= 4 T_kappa."""
    if T < 1:
        raise ContractViolation(f"The decreasing-schedule bound needs T >= 1, got {T}")
    return 16.0 * T_kappa**2 * dist0_sq / (math.e**2 * T**2) + 8.0 * sigma2 / (mu**2 * T)


def _mean_distances(target, config, schedule, reps, T_list, M, rng) -> dict[int, float]:
    """Mean ||lambda_T - lambda*||^2 over `reps` prox-SGD runs from m = 0, C = I."""
    T_max = max(T_list)
    every = reduce(math.gcd, T_list) or 1
    base_seed = int(rng.integers(2**31))
    totals = dict.fromkeys(T_list, 0.0)
    for r in range(reps):
        stream = utils.make_stream(utils.derive_seed(base_seed, r))
        result = run("prox_sgd", target, config, schedule, "cfe", M, T_max, stream, every, initial_params(config))
        if result.failed:
            return {T: math.inf for T in T_list}
        by_iteration = {record.iteration: record.param_dist_sq for record in result.records}
        for T in T_list:
            totals[T] += by_iteration[T]
    return {T: total / reps for T, total in totals.items()}


def _sigma2_at_optimum(target, config, M, rng, samples: int) -> float:
    return optimum_variance(target, config, samples, rng)[0] / M


def check_rate_bound(
    target: QuadraticTarget,
    schedule: StepSchedule,
    reps: int,
    T_list,
    rng: np.random.Generator,
    config: FamilyConfig | None = None,
    M: int = 10,
    variance_samples: int = 100_000,
) -> VerificationReport:
    """
    Mean squared distance to lambda* after T fixed-stepsize prox-SGD steps stays
    below twice (1 - gamma mu)^T ||lambda_0 - lambda*||^2 + 2 gamma sigma^2 / mu,
    with sigma^2 measured at lambda*. Stepsizes above M / (2 L kappa C) are out of
    the theorem's range and reported as skipped.
    """
    config = config or FamilyConfig(dim=target.dim)
    name = "rate_bound"
    mu = target.strong_convexity
    gamma_cap = M / (2.0 * target.smoothness * target.condition_number * config.variance_constant)
    if schedule.kind != "fixed" or schedule.gamma > gamma_cap:
        detail = f"out of precondition: {schedule.kind} stepsize {schedule.gamma:.4g}, fixed stepsize cap {gamma_cap:.4g}"
        logger.warning(f"check_rate_bound: {detail}")
        return _skip(name, detail)

    T_list = sorted({int(T) for T in T_list})
    optimum = flatten(optimal_params(target, config))
    dist0_sq = float(np.sum((flatten(initial_params(config)) - optimum) ** 2))
    sigma2 = _sigma2_at_optimum(target, config, M, rng, variance_samples)
    means = _mean_distances(target, config, schedule, reps, T_list, M, rng)

    ratios = {T: means[T] / fixed_stepsize_bound(T, schedule.gamma, mu, dist0_sq, sigma2) for T in T_list}
    detail = ", ".join(f"T={T}: {means[T]:.4g} ({ratios[T]:.3f} x bound)" for T in T_list)
    return _report(name, max(ratios.values()), 2.0, detail)


def check_decreasing_schedule(
    target: QuadraticTarget,
    reps: int,
    T_list,
    rng: np.random.Generator,
    config: FamilyConfig | None = None,
    M: int = 10,
    variance_samples: int = 100_000,
) -> VerificationReport:
    """The two-stage schedule's bound at each T >= 4 T_kappa; smaller T are out of precondition."""
    config = config or FamilyConfig(dim=target.dim)
    name = "decreasing_schedule"
    schedule = StepSchedule.theory(target, config, M)
    T_kappa = math.ceil(target.condition_number**2 * config.variance_constant / M)
    valid = sorted({int(T) for T in T_list if T >= 4 * T_kappa})
    if not valid:
        return _skip(name, f"every T is below 4 T_kappa = {4 * T_kappa}")

    mu = target.strong_convexity
    optimum = flatten(optimal_params(target, config))
    dist0_sq = float(np.sum((flatten(initial_params(config)) - optimum) ** 2))
    sigma2 = _sigma2_at_optimum(target, config, M, rng, variance_samples)
    means = _mean_distances(target, config, schedule, reps, valid, M, rng)

    ratios = {T: means[T] / decreasing_schedule_bound(T, T_kappa, dist0_sq, sigma2, mu) for T in valid}
    detail = f"T_kappa={T_kappa}; " + ", ".join(f"T={T}: {ratios[T]:.3f} x bound" for T in valid)
    return _report(name, max(ratios.values()), 2.0, detail)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def _suite_checks():
    cholesky = FamilyConfig(dim=3)
    meanfield = FamilyConfig(kind="meanfield", dim=3)

    def marginalization(config):
        def check(rng):
            return check_marginalization(_random_params(config, rng), config, rng.standard_normal(config.dim), 1_000_000, rng)
        return check

    def optimum_variance_check(kind, d):
        def check(rng):
            kappa = 10.0 if d > 1 else 1.0
            target = make_conditioned_gaussian(d, kappa, 10.0, rng, rotate=kind == "cholesky")
            return check_optimum_variance(target, FamilyConfig(kind=kind, dim=d), 10, rng)
        return check

    checks = [
        ("softplus_constants", lambda rng: check_softplus_constants()),
        ("jacobian_identity[cholesky]", lambda rng: check_jacobian_identity(cholesky, 100, rng)),
        ("jacobian_identity[meanfield]", lambda rng: check_jacobian_identity(meanfield, 100, rng)),
        ("linearity", lambda rng: check_linearity(FamilyConfig(dim=4), 100, rng)),
        ("squared_distance", lambda rng: check_squared_distance(cholesky, 1_000_000, rng)),
        ("marginalization[cholesky]", marginalization(cholesky)),
        ("marginalization[meanfield]", marginalization(meanfield)),
        ("expected_smoothness", lambda rng: check_expected_smoothness(make_conditioned_gaussian(5, 10.0, 10.0, rng), 20, 100_000, rng)),
    ]
    for kind in ("cholesky", "meanfield"):
        for d in (1, 5, 10):
            checks.append((f"optimum_variance[{kind},d={d}]", optimum_variance_check(kind, d)))
    checks += [
        ("convexity_counterexample", lambda rng: check_convexity_counterexample(1_000_000, rng)),
        ("matrix_lemma", lambda rng: check_matrix_lemma(50, rng)),
        ("rate_bound", _rate_bound_check),
        ("decreasing_schedule", lambda rng: check_decreasing_schedule(make_conditioned_gaussian(2, 2.0, 2.0, rng), 20, (100, 1000), rng)),
    ]
    return checks


def _rate_bound_check(rng: np.random.Generator) -> VerificationReport:
    target = make_conditioned_gaussian(5, 10.0, 10.0, rng)
    config = FamilyConfig(dim=5)
    M = 10
    gamma = M / (2.0 * target.smoothness * target.condition_number * config.variance_constant)
    return check_rate_bound(target, StepSchedule.fixed(gamma), 20, (100, 1000, 10_000), rng, config, M)


async def _run_suite_async(seed: int, threads: int) -> list[VerificationReport]:
    checks = _suite_checks()
    reports: list[VerificationReport | None] = [None] * len(checks)
    gate = asyncio.Semaphore(max(1, threads))

    async def worker(index: int, name: str, check):
        check_seed = utils.derive_seed(seed, index)
        async with gate:
            started = time.perf_counter()
            report = await asyncio.to_thread(check, utils.make_stream(check_seed))
        report = replace(report, check_name=name, seed=check_seed)
        logger.info(f"Verification {name}: {report.status} (statistic={report.statistic:.6g}, tolerance={report.tolerance:.6g}, {time.perf_counter() - started:.1f}s)")
        reports[index] = report

    await asyncio.gather(*(worker(i, name, check) for i, (name, check) in enumerate(checks)))
    return reports


def run_suite(seed: int, threads: int = 1) -> list[VerificationReport]:
    """Every check in a fixed order; check i draws from the stream seeded with seed ^ i."""
    started = time.perf_counter()
    reports = asyncio.run(_run_suite_async(seed, threads))
    elapsed = time.perf_counter() - started
    if elapsed > SUITE_BUDGET_SECONDS:
        logger.warning(f"Verification suite took {elapsed:.0f}s, over its {SUITE_BUDGET_SECONDS:.0f}s budget")
    failed = sum(1 for report in reports if not report.passed)
    logger.info(f"Verification suite finished in {elapsed:.1f}s: {len(reports) - failed}/{len(reports)} checks passed")
    return reports
