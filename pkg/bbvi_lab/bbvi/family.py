"""
The location-scale variational family.

Parameters are stored as a location m, diagonal pre-parameters s and (for the
Cholesky family) the strict lower triangle L of the scale matrix
C = D_phi(s) + L. The flattened vector is always [m; s; row-major strict lower
triangle], so that the Euclidean norm of the flat vector is the parameter norm
used by the convergence bounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np

from bbvi import utils
from bbvi.errors import ContractViolation, DomainViolation, NumericFailure, UnsupportedConfiguration

if TYPE_CHECKING:
    from bbvi.targets import QuadraticTarget

logger = logging.getLogger(__name__)

CONDITIONER_KINDS = ("identity", "softplus", "exp")
FAMILY_KINDS = ("cholesky", "meanfield")

# Below this argument softplus(x) ~ exp(x) and the ratio formulas switch to series.
_SOFTPLUS_TAIL = -30.0


@dataclass(frozen=True)
class Conditioner:
    """Diagonal conditioner phi mapping s_i to the diagonal of the scale matrix."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in CONDITIONER_KINDS:
            raise UnsupportedConfiguration(f"Unknown conditioner '{self.kind}', expected one of {CONDITIONER_KINDS}")

    @property
    def is_linear(self) -> bool:
        return self.kind == "identity"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "softplus":
            return utils.softplus(x)
        return np.exp(x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.ones_like(x)
        if self.kind == "softplus":
            return utils.softplus_grad(x)
        return np.exp(x)

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.zeros_like(x)
        if self.kind == "softplus":
            return utils.softplus_hess(x)
        return np.exp(x)

    def log_value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.log(x)
        if self.kind == "softplus":
            return utils.log_softplus(x)
        return x.copy()

    def log_derivative(self, x):
        """(log phi)'(x) = phi'(x) / phi(x)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return 1.0 / x
        if self.kind == "exp":
            return np.ones_like(x)
        tail = x < _SOFTPLUS_TAIL
        safe = np.where(tail, 0.0, x)
        ratio = utils.softplus_grad(safe) / utils.softplus(safe)
        return np.where(tail, 1.0 - 0.5 * np.exp(np.minimum(x, 0.0)), ratio)

    def neg_log_curvature(self, x):
        """-(log phi)''(x), the curvature the entropic regularizer contributes along s."""
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return 1.0 / x**2
        if self.kind == "exp":
            return np.zeros_like(x)
        tail = x < _SOFTPLUS_TAIL
        safe = np.where(tail, 0.0, x)
        ratio = utils.softplus_grad(safe) / utils.softplus(safe)
        curvature = ratio**2 - utils.softplus_hess(safe) / utils.softplus(safe)
        return np.where(tail, 0.5 * np.exp(np.minimum(x, 0.0)), curvature)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0) and self.kind != "identity":
            raise DomainViolation(f"{self.kind} conditioner is only invertible on (0, inf), got {y}")
        if self.kind == "identity":
            return y.copy()
        if self.kind == "softplus":
            return utils.inverse_softplus(y)
        return np.log(y)


@dataclass(frozen=True)
class BaseDistribution:
    """Standardized, symmetric base distribution of the reparameterization."""

    kind: str = "standard_normal"
    kurtosis: float = 3.0

    def __post_init__(self):
        if self.kind != "standard_normal":
            raise UnsupportedConfiguration(f"Unknown base distribution '{self.kind}'")
        if self.kurtosis < 1:
            raise ContractViolation(f"Kurtosis must be at least 1, got {self.kurtosis}")

    def entropy(self, dim: int) -> float:
        return 0.5 * dim * np.log(2.0 * np.pi * np.e)

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.standard_normal(size)


@dataclass(frozen=True)
class FamilyConfig:
    kind: str = "cholesky"
    conditioner: Conditioner = Conditioner()
    base: BaseDistribution = BaseDistribution()
    dim: int = 1

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise UnsupportedConfiguration(f"Unknown family '{self.kind}', expected one of {FAMILY_KINDS}")
        if self.dim < 1:
            raise ContractViolation(f"Dimension must be positive, got {self.dim}")

    @property
    def is_cholesky(self) -> bool:
        return self.kind == "cholesky"

    @property
    def num_lower(self) -> int:
        return self.dim * (self.dim - 1) // 2 if self.is_cholesky else 0

    @property
    def num_params(self) -> int:
        return 2 * self.dim + self.num_lower

    @property
    def variance_constant(self) -> float:
        """C(d, phi): d + k_phi for Cholesky, 2 k_phi sqrt(d) + 1 for mean-field."""
        k = self.base.kurtosis
        if self.is_cholesky:
            return self.dim + k
        return 2.0 * k * np.sqrt(self.dim) + 1.0

    def scale_slice(self) -> slice:
        return slice(self.dim, 2 * self.dim)


@dataclass(frozen=True, eq=False)
class VariationalParams:
    m: np.ndarray
    s: np.ndarray
    L: np.ndarray | None = None  # strict lower triangle, row-major; None for mean-field

    def __post_init__(self):
        for name in ("m", "s", "L"):
            value = getattr(self, name)
            if value is None:
                continue
            array = np.array(value, dtype=float).ravel()
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if self.m.shape != self.s.shape:
            raise ContractViolation(f"m and s must have equal length, got {self.m.size} and {self.s.size}")

    @property
    def dim(self) -> int:
        return self.m.size


@lru_cache(maxsize=None)
def lower_indices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (i, j) indices of the strict lower triangle."""
    rows, cols = np.tril_indices(dim, -1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def check_consistent(params: VariationalParams, config: FamilyConfig):
    if params.dim != config.dim:
        raise ContractViolation(f"Parameters have dimension {params.dim}, family expects {config.dim}")
    if config.is_cholesky:
        if params.L is None or params.L.size != config.num_lower:
            raise ContractViolation(f"Cholesky family needs {config.num_lower} lower-triangular entries")
    elif params.L is not None and params.L.size:
        raise ContractViolation("Mean-field parameters must not carry a lower triangle")


def check_domain(params: VariationalParams, config: FamilyConfig):
    if config.conditioner.is_linear and np.any(params.s <= 0):
        raise DomainViolation(f"Identity conditioner requires every s_i > 0, got min(s) = {params.s.min():.6g}")


def flatten(params: VariationalParams) -> np.ndarray:
    parts = [params.m, params.s]
    if params.L is not None:
        parts.append(params.L)
    return np.concatenate(parts)


def unflatten(vector: np.ndarray, config: FamilyConfig) -> VariationalParams:
    vector = np.asarray(vector, dtype=float)
    if vector.size != config.num_params:
        raise ContractViolation(f"Expected a vector of length {config.num_params}, got {vector.size}")
    d = config.dim
    lower = vector[2 * d:] if config.is_cholesky else None
    return VariationalParams(m=vector[:d], s=vector[d:2 * d], L=lower)


def initial_params(config: FamilyConfig, init_scale: float = 1.0, location=None) -> VariationalParams:
    """m0 = location (default 0) and C0 = init_scale * I, with s0 = phi^-1(init_scale)."""
    d = config.dim
    m = np.zeros(d) if location is None else np.asarray(location, dtype=float)
    s = np.full(d, float(config.conditioner.inverse(init_scale)))
    lower = np.zeros(config.num_lower) if config.is_cholesky else None
    return VariationalParams(m=m, s=s, L=lower)


def params_from_scale(config: FamilyConfig, m, C) -> VariationalParams:
    """Parameters whose scale matrix is the given lower-triangular C."""
    C = np.asarray(C, dtype=float)
    if not config.is_cholesky and np.any(np.tril(C, -1)):
        raise UnsupportedConfiguration("Mean-field family cannot represent a non-diagonal scale matrix")
    s = config.conditioner.inverse(np.diag(C))
    lower = C[lower_indices(config.dim)] if config.is_cholesky else None
    return VariationalParams(m=m, s=s, L=lower)


def scale_matrix(params: VariationalParams, config: FamilyConfig, validate: bool = True) -> np.ndarray:
    """C = D_phi(s) + L (Cholesky) or D_phi(s) (mean-field)."""
    check_consistent(params, config)
    if validate:
        check_domain(params, config)
    C = np.diag(config.conditioner.value(params.s))
    if config.is_cholesky and config.dim > 1:
        C[lower_indices(config.dim)] = params.L
    return C


def reparameterize(params: VariationalParams, config: FamilyConfig, u, validate: bool = True) -> np.ndarray:
    """
    T_lambda(u) = C u + m, for a single u of shape (d,) or a batch of shape (M, d).
    With validate=False the map is evaluated outside the parameter domain, which
    the linearity identity needs for differences of parameters.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != config.dim:
        raise ContractViolation(f"Base draw has dimension {u.shape[-1]}, family expects {config.dim}")
    C = scale_matrix(params, config, validate=validate)
    return u @ C.T + params.m


def sample(params: VariationalParams, config: FamilyConfig, rng: np.random.Generator, M: int) -> np.ndarray:
    if M < 1:
        raise ContractViolation(f"Number of samples must be at least 1, got {M}")
    u = config.base.draw(rng, (M, config.dim))
    return reparameterize(params, config, u)


def neg_entropy(params: VariationalParams, config: FamilyConfig) -> float:
    """h(lambda) = -H(base) - sum_i log phi(s_i)."""
    check_consistent(params, config)
    check_domain(params, config)
    return float(-config.base.entropy(config.dim) - np.sum(config.conditioner.log_value(params.s)))


def neg_entropy_grad(params: VariationalParams, config: FamilyConfig) -> np.ndarray:
    check_consistent(params, config)
    check_domain(params, config)
    grad = np.zeros(config.num_params)
    grad[config.scale_slice()] = -config.conditioner.log_derivative(params.s)
    return grad


def _gaussian_terms(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget):
    if target.dim != config.dim:
        raise ContractViolation(f"Target has dimension {target.dim}, family expects {config.dim}")
    C = scale_matrix(params, config)
    AC = target.A @ C
    diff = params.m - target.mu
    trace_term = float(np.sum(C * AC))
    quad_term = float(diff @ target.A @ diff)
    return C, AC, diff, trace_term, quad_term


def energy_closed_form(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> float:
    """f(lambda) = E l(T_lambda(u)) = 1/2 tr(A C C^T) + 1/2 (m - mu)^T A (m - mu) + offset."""
    _, _, _, trace_term, quad_term = _gaussian_terms(params, config, target)
    return 0.5 * trace_term + 0.5 * quad_term + target.offset


def energy_grad_closed_form(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> np.ndarray:
    C, AC, diff, _, _ = _gaussian_terms(params, config, target)
    d = config.dim
    grad = np.zeros(config.num_params)
    grad[:d] = target.A @ diff
    grad[d:2 * d] = config.conditioner.derivative(params.s) * np.diag(AC)
    if config.is_cholesky:
        grad[2 * d:] = AC[lower_indices(d)]
    return grad


def elbo_closed_form(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> float:
    """The negative ELBO F = f + h, exact for quadratic targets."""
    value = energy_closed_form(params, config, target) + neg_entropy(params, config)
    if not np.isfinite(value):
        raise NumericFailure(f"Closed-form ELBO is not finite ({value})")
    return value


def elbo_grad_closed_form(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> np.ndarray:
    return energy_grad_closed_form(params, config, target) + neg_entropy_grad(params, config)


def kl_to_gaussian(params: VariationalParams, config: FamilyConfig, target: QuadraticTarget) -> float:
    """KL(q_lambda || N(mu, A^-1)), using log-determinants read off Cholesky diagonals."""
    C, _, _, trace_term, quad_term = _gaussian_terms(params, config, target)
    diag = np.abs(np.diag(C))
    if np.any(diag == 0):
        raise NumericFailure("Scale matrix is singular; KL is infinite")
    log_det_cov = 2.0 * np.sum(np.log(diag))
    kl = 0.5 * (trace_term + quad_term - config.dim - target.log_det_A - log_det_cov)
    if not np.isfinite(kl):
        raise NumericFailure(f"KL evaluation produced a non-finite value ({kl})")
    return float(kl)
