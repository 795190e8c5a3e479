"""
Update rules for BBVI: vanilla SGD on the full negative ELBO, proximal SGD with
the closed-form entropy prox on the scale diagonal, ProxGen-Adam, and the Adam
baseline it is compared against. Updates act on flat parameter vectors laid out
as [m; s; L], and `run` drives any of them over a target.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from bbvi.errors import ContractViolation, DomainViolation, NumericFailure, UnsupportedConfiguration
from bbvi.estimators import TOTAL_GRADIENT_ESTIMATORS, energy_grad
from bbvi.family import (
    FamilyConfig,
    VariationalParams,
    elbo_closed_form,
    flatten,
    kl_to_gaussian,
    neg_entropy,
    reparameterize,
    unflatten,
)
from bbvi.models import RunResult, TrajectoryRecord
from bbvi.targets import QuadraticTarget, Target, optimal_params
from bbvi.utils import make_stream

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("sgd", "prox_sgd", "proxgen_adam", "adam")
DOMAIN_EPSILON = 1e-10
EVAL_SEED = 20231
EVAL_SAMPLES = 1000


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "fixed"
    gamma: float = 1e-3
    mu: float = 1.0  # two_stage only
    switch: int = 0  # two_stage only: last iteration of the flat phase

    def __post_init__(self):
        if self.kind not in ("fixed", "inv_sqrt", "two_stage"):
            raise UnsupportedConfiguration(f"Unknown step schedule '{self.kind}'")
        if self.gamma <= 0 or self.mu <= 0:
            raise ContractViolation(f"Step schedule constants must be positive (gamma={self.gamma}, mu={self.mu})")

    @classmethod
    def fixed(cls, gamma: float) -> "StepSchedule":
        return cls("fixed", gamma)

    @classmethod
    def inv_sqrt(cls, gamma0: float) -> "StepSchedule":
        return cls("inv_sqrt", gamma0)

    @classmethod
    def two_stage(cls, gamma_flat: float, mu: float, switch: int) -> "StepSchedule":
        return cls("two_stage", gamma_flat, mu, int(switch))

    @classmethod
    def theory(cls, target: Target, config: FamilyConfig, M: int) -> "StepSchedule":
        """gamma = M / (2 L kappa C(d, phi)) up to t = 4 ceil(kappa^2 C(d, phi) / M), then (2t+1)/((t+1)^2 mu)."""
        kappa = target.smoothness / target.strong_convexity
        C = config.variance_constant
        gamma_flat = M / (2.0 * target.smoothness * kappa * C)
        switch = 4 * math.ceil(kappa**2 * C / M)
        return cls.two_stage(gamma_flat, target.strong_convexity, switch)

    def __call__(self, t: int) -> float:
        if self.kind == "fixed":
            return self.gamma
        if self.kind == "inv_sqrt":
            return self.gamma / math.sqrt(t + 1)
        if t <= self.switch:
            return self.gamma
        return (2 * t + 1) / ((t + 1) ** 2 * self.mu)


def prox_entropy_scale(s, gamma):
    """
    prox of gamma * (-log s) at s: the positive root of x^2 - s x - gamma = 0,
    x = s + (sqrt(s^2 + 4 gamma) - s) / 2.

    For s < 0 the algebraically equal form 2 gamma / (sqrt(s^2 + 4 gamma) - s) avoids cancellation.
    """
    s = np.asarray(s, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0):
        raise ContractViolation(f"Prox stepsize must be non-negative, got {gamma}")
    if np.any((gamma == 0) & (s <= 0)):
        raise DomainViolation("gamma = 0 is only the identity limit for s > 0")
    root = np.sqrt(s * s + 4.0 * gamma)
    positive = 0.5 * (s + root)
    negative = 2.0 * gamma / np.where(s < 0, root - s, 1.0)
    result = np.where(s >= 0, positive, negative)
    return result if result.ndim else float(result)


def _check_finite(vector: np.ndarray, what: str):
    if not np.all(np.isfinite(vector)):
        raise NumericFailure(f"Non-finite {what} encountered")


def _clamp_scale(lam: np.ndarray, config: FamilyConfig) -> int:
    """Clamp s_i <= DOMAIN_EPSILON up to DOMAIN_EPSILON in place (identity conditioner only)."""
    if not config.conditioner.is_linear:
        return 0
    scale = lam[config.scale_slice()]
    violations = scale <= DOMAIN_EPSILON
    count = int(np.count_nonzero(violations))
    if count:
        scale[violations] = DOMAIN_EPSILON
    return count


def sgd_step(lam: np.ndarray, grad_total: np.ndarray, gamma: float, config: FamilyConfig) -> tuple[np.ndarray, int]:
    """lambda' = lambda - gamma * (grad f + grad h); returns the new vector and the number of clamped s_i."""
    _check_finite(grad_total, "gradient")
    new = np.asarray(lam, dtype=float) - gamma * grad_total
    clamps = _clamp_scale(new, config)
    return new, clamps


def prox_sgd_step(lam: np.ndarray, grad_energy: np.ndarray, gamma: float, config: FamilyConfig) -> np.ndarray:
    """lambda' = prox_{gamma h}(lambda - gamma grad f); the prox only touches the scale diagonal."""
    if not config.conditioner.is_linear:
        raise UnsupportedConfiguration("The closed-form entropy prox requires the identity conditioner")
    _check_finite(grad_energy, "gradient")
    new = np.asarray(lam, dtype=float) - gamma * grad_energy
    block = config.scale_slice()
    new[block] = prox_entropy_scale(new[block], gamma)
    return new


@dataclass(frozen=True, eq=False)
class ProxGenAdamState:
    momentum: np.ndarray
    second_moment: np.ndarray
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation(f"Moment rates must lie in [0, 1), got beta1={self.beta1}, beta2={self.beta2}")
        if self.eps <= 0 or self.alpha <= 0:
            raise ContractViolation(f"alpha and eps must be positive, got alpha={self.alpha}, eps={self.eps}")

    @classmethod
    def zeros(cls, num_params: int, alpha: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "ProxGenAdamState":
        return cls(np.zeros(num_params), np.zeros(num_params), alpha, beta1, beta2, eps)


def proxgen_adam_step(lam: np.ndarray, state: ProxGenAdamState, grad_energy: np.ndarray, config: FamilyConfig, alpha: float | None = None) -> tuple[np.ndarray, ProxGenAdamState]:
    """
    One ProxGen-Adam iteration on the energy gradient. No bias correction,
    constant beta1, and the entropy prox applied to each s_i with that
    coordinate's own stepsize; h enters only through the prox.
    """
    if not config.conditioner.is_linear:
        raise UnsupportedConfiguration("ProxGen-Adam's scale prox requires the identity conditioner")
    _check_finite(grad_energy, "gradient")
    alpha = state.alpha if alpha is None else alpha

    momentum = state.beta1 * state.momentum + (1.0 - state.beta1) * grad_energy
    second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad_energy * grad_energy
    stepsizes = alpha / (np.sqrt(second_moment) + state.eps)

    new = np.asarray(lam, dtype=float) - stepsizes * momentum
    block = config.scale_slice()
    new[block] = prox_entropy_scale(new[block], stepsizes[block])

    _check_finite(new, "ProxGen-Adam iterate")
    return new, replace(state, momentum=momentum, second_moment=second_moment, alpha=alpha)


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, num_params: int, alpha: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(num_params), np.zeros(num_params), 0, alpha, beta1, beta2, eps)


def adam_step(lam: np.ndarray, state: AdamState, grad_total: np.ndarray, config: FamilyConfig) -> tuple[np.ndarray, AdamState, int]:
    """Bias-corrected Adam on the full negative-ELBO gradient, with the SGD scale clamp."""
    _check_finite(grad_total, "gradient")
    t = state.step + 1
    first = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad_total
    second = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad_total * grad_total
    first_hat = first / (1.0 - state.beta1**t)
    second_hat = second / (1.0 - state.beta2**t)
    new = np.asarray(lam, dtype=float) - state.alpha * first_hat / (np.sqrt(second_hat) + state.eps)
    clamps = _clamp_scale(new, config)
    return new, replace(state, first_moment=first, second_moment=second, step=t), clamps


def _elbo(params: VariationalParams, config: FamilyConfig, target: Target) -> float:
    if isinstance(target, QuadraticTarget):
        return elbo_closed_form(params, config, target)
    # Fixed evaluation stream so that checkpoints of different runs are comparable.
    u = config.base.draw(make_stream(EVAL_SEED), (EVAL_SAMPLES, config.dim))
    energy = float(np.mean(target.neg_log_joint(reparameterize(params, config, u))))
    return energy + neg_entropy(params, config)


def _known_optimum(target: Target, config: FamilyConfig) -> np.ndarray | None:
    if not isinstance(target, QuadraticTarget):
        return None
    try:
        return flatten(optimal_params(target, config))
    except UnsupportedConfiguration:
        return None


def _validate_run(optimizer_kind: str, config: FamilyConfig, estimator_kind: str, M: int, T: int, checkpoint_every: int):
    if optimizer_kind not in OPTIMIZER_KINDS:
        raise UnsupportedConfiguration(f"Unknown optimizer '{optimizer_kind}', expected one of {OPTIMIZER_KINDS}")
    if estimator_kind not in TOTAL_GRADIENT_ESTIMATORS:
        raise UnsupportedConfiguration(f"Unknown estimator '{estimator_kind}'")
    if optimizer_kind in ("prox_sgd", "proxgen_adam") and not config.conditioner.is_linear:
        raise UnsupportedConfiguration(f"{optimizer_kind} requires the identity conditioner, got {config.conditioner.kind}")
    if M < 1 or T < 0 or checkpoint_every < 1:
        raise ContractViolation(f"Need M >= 1, T >= 0 and checkpoint_every >= 1 (got M={M}, T={T}, checkpoint_every={checkpoint_every})")


def run(
    optimizer_kind: str,
    target: Target,
    family: FamilyConfig,
    schedule: StepSchedule,
    estimator_kind: str,
    M: int,
    T: int,
    rng: np.random.Generator,
    checkpoint_every: int,
    init: VariationalParams,
    eps_kl: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> RunResult:
    """
    Run one optimizer for T iterations from `init`.

    Records metrics at t = 0, every `checkpoint_every` iterations and at the
    final iteration. With `eps_kl` set (quadratic targets), the run stops at the
    first iterate whose KL is <= eps_kl and reports that iteration. Numeric
    failures end the run early and are reported in the result, not raised.
    """
    _validate_run(optimizer_kind, family, estimator_kind, M, T, checkpoint_every)
    estimator = TOTAL_GRADIENT_ESTIMATORS[estimator_kind]
    quadratic = isinstance(target, QuadraticTarget)
    optimum = _known_optimum(target, family)

    lam = flatten(init).copy()
    clamps = 0
    records: list[TrajectoryRecord] = []
    iterations_to_eps = None
    proxgen_state = ProxGenAdamState.zeros(family.num_params, schedule.gamma, beta1, beta2, eps)
    adam_state = AdamState.zeros(family.num_params, schedule.gamma, beta1, beta2, eps)

    def checkpoint(t: int, params: VariationalParams, kl: float | None):
        dist = float(np.sum((lam - optimum) ** 2)) if optimum is not None else None
        records.append(TrajectoryRecord(t, kl, dist, _elbo(params, family, target), clamps))

    t = 0
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            params = unflatten(lam, family)
            kl = kl_to_gaussian(params, family, target) if quadratic else None
            checkpoint(0, params, kl)
            if eps_kl is not None and kl is not None and kl <= eps_kl:
                iterations_to_eps = 0

            while t < T and iterations_to_eps is None:
                gamma = schedule(t)
                if optimizer_kind == "prox_sgd":
                    grad = energy_grad(params, family, target, M, rng).mean
                    lam = prox_sgd_step(lam, grad, gamma, family)
                elif optimizer_kind == "sgd":
                    grad = estimator(params, family, target, M, rng).mean
                    lam, clamped = sgd_step(lam, grad, gamma, family)
                    clamps += clamped
                elif optimizer_kind == "proxgen_adam":
                    # the entropy is handled by the prox, so only f is linearized
                    grad = energy_grad(params, family, target, M, rng).mean
                    lam, proxgen_state = proxgen_adam_step(lam, proxgen_state, grad, family, alpha=gamma)
                else:
                    grad = estimator(params, family, target, M, rng).mean
                    adam_state = replace(adam_state, alpha=gamma)
                    lam, adam_state, clamped = adam_step(lam, adam_state, grad, family)
                    clamps += clamped
                _check_finite(lam, "iterate")
                t += 1

                params = unflatten(lam, family)
                due = t % checkpoint_every == 0 or t == T
                kl = None
                if quadratic and (due or eps_kl is not None):
                    kl = kl_to_gaussian(params, family, target)
                if eps_kl is not None and kl is not None and kl <= eps_kl:
                    iterations_to_eps = t
                if due or iterations_to_eps is not None:
                    checkpoint(t, params, kl)
    except (NumericFailure, DomainViolation) as e:
        logger.warning(f"{optimizer_kind}: run aborted at iteration {t}: {e}")
        return RunResult(records, iterations_to_eps, failed=True, failure=str(e))

    if clamps:
        logger.debug(f"{optimizer_kind}: {clamps} scale clamps over {t} iterations")
    return RunResult(records, iterations_to_eps)
