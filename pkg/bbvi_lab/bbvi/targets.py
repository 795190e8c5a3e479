"""
Negative log joint targets l(z) = -log p(z, x) with closed-form gradients.

Targets are immutable and expose only values and gradients; the algorithms
never see a Hessian. Both accept a single point of shape (d,) or a batch of
shape (M, d).
"""

import logging
from typing import Protocol

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from bbvi.errors import ContractViolation, UnsupportedConfiguration
from bbvi.family import FamilyConfig, VariationalParams, params_from_scale

logger = logging.getLogger(__name__)


class Target(Protocol):
    dim: int
    strong_convexity: float
    smoothness: float

    def neg_log_joint(self, z): ...

    def grad_neg_log_joint(self, z): ...


def _check_point(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] != dim:
        raise ContractViolation(f"Point has dimension {z.shape[-1] if z.ndim else 0}, target expects {dim}")
    return z


class QuadraticTarget:
    """
    l(z) = 1/2 (z - mu)^T A (z - mu) + offset, i.e. a Gaussian posterior N(mu, A^-1).

    The extreme eigenvalues of A are the strong-convexity constant mu = lambda_min(A)
    and the smoothness constant L = lambda_max(A); both are computed once here.
    """

    def __init__(self, A, mu=None, offset: float = 0.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ContractViolation(f"A must be a square matrix, got shape {A.shape}")
        d = A.shape[0]
        # Symmetrize exactly so that A_ij == A_ji bit for bit.
        A = 0.5 * (A + A.T)
        try:
            factor = cho_factor(A, lower=True)
        except np.linalg.LinAlgError as e:
            raise ContractViolation(f"A is not positive definite: {e}") from e

        self.A = A
        self.A.setflags(write=False)
        self.mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float).ravel()
        if self.mu.size != d:
            raise ContractViolation(f"Mean has length {self.mu.size}, A is {d}x{d}")
        self.mu.setflags(write=False)
        self.offset = float(offset)
        self.dim = d
        self._factor = factor

        eigenvalues = np.linalg.eigvalsh(A)
        self.strong_convexity = float(eigenvalues[0])
        self.smoothness = float(eigenvalues[-1])
        self.log_det_A = float(2.0 * np.sum(np.log(np.diag(factor[0]))))
        logger.debug(f"QuadraticTarget d={d}: mu_min={self.strong_convexity:.6g}, L={self.smoothness:.6g}")

    @property
    def condition_number(self) -> float:
        return self.smoothness / self.strong_convexity

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.A - np.diag(np.diag(self.A)))

    def neg_log_joint(self, z):
        z = _check_point(z, self.dim)
        diff = z - self.mu
        return 0.5 * np.einsum("...i,ij,...j->...", diff, self.A, diff) + self.offset

    def grad_neg_log_joint(self, z):
        z = _check_point(z, self.dim)
        return (z - self.mu) @ self.A

    def covariance(self) -> np.ndarray:
        return cho_solve(self._factor, np.eye(self.dim))


class LogisticTarget:
    """
    Bayesian logistic regression with a N(0, alpha^-1 I) prior:
    l(z) = sum_i log(1 + exp(-y_i x_i^T z)) + alpha/2 ||z||^2.

    strong_convexity is alpha; smoothness is the upper bound alpha + lambda_max(X^T X) / 4.
    """

    def __init__(self, X, y, alpha: float = 1.0):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if alpha <= 0:
            raise ContractViolation(f"Prior precision must be positive, got {alpha}")
        if y.size != X.shape[0]:
            raise ContractViolation(f"X has {X.shape[0]} rows but y has {y.size} labels")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ContractViolation("Labels must be -1 or +1")

        self.X = X
        self.y = y
        self.X.setflags(write=False)
        self.y.setflags(write=False)
        self.alpha = float(alpha)
        self.dim = X.shape[1]
        self.strong_convexity = self.alpha
        self.smoothness = self.alpha + 0.25 * float(np.linalg.eigvalsh(X.T @ X)[-1])

    @property
    def condition_number(self) -> float:
        return self.smoothness / self.strong_convexity

    def _margins(self, z):
        return (z @ self.X.T) * self.y

    def neg_log_joint(self, z):
        z = _check_point(z, self.dim)
        loss = np.logaddexp(0.0, -self._margins(z)).sum(axis=-1)
        return loss + 0.5 * self.alpha * np.sum(z * z, axis=-1)

    def grad_neg_log_joint(self, z):
        z = _check_point(z, self.dim)
        weights = -expit(-self._margins(z)) * self.y
        return weights @ self.X + self.alpha * z


def make_logistic_target(num_data: int, dim: int, alpha: float, rng: np.random.Generator) -> LogisticTarget:
    """Synthetic logistic regression data with labels drawn from a random ground-truth weight."""
    X = rng.standard_normal((num_data, dim))
    w = rng.standard_normal(dim)
    y = np.where(rng.random(num_data) < expit(X @ w), 1.0, -1.0)
    return LogisticTarget(X, y, alpha)


def optimal_params(target: QuadraticTarget, family: FamilyConfig) -> VariationalParams:
    """
    lambda* for a Gaussian target: m* = mu and C* the lower Cholesky factor of A^-1.

    Only exact for the Cholesky family, or the mean-field family with a diagonal A;
    otherwise the mean-field optimum is not the posterior and this raises.
    """
    if target.dim != family.dim:
        raise ContractViolation(f"Target has dimension {target.dim}, family expects {family.dim}")
    if not family.is_cholesky and not target.is_diagonal:
        raise UnsupportedConfiguration("Mean-field optimum of a non-diagonal quadratic is not the exact posterior")
    C_star = np.linalg.cholesky(target.covariance())
    return params_from_scale(family, target.mu, C_star)


def make_conditioned_gaussian(d: int, kappa: float, L: float, rng: np.random.Generator, mean=None, rotate: bool = True) -> QuadraticTarget:
    """
    Random Gaussian target with lambda_max(A) = L and lambda_min(A) = L / kappa.

    Interior eigenvalues are log-uniform between the extremes, the eigenbasis is
    a Haar-random orthogonal matrix (skipped with rotate=False, which keeps A
    diagonal), and the mean is standard normal unless given.
    """
    if kappa < 1 or L <= 0:
        raise ContractViolation(f"Need kappa >= 1 and L > 0, got kappa={kappa}, L={L}")
    if d < 2 and kappa > 1:
        raise ContractViolation(f"A {d}-dimensional target cannot have condition number {kappa}")

    mu = rng.standard_normal(d) if mean is None else np.asarray(mean, dtype=float)
    if kappa == 1:
        return QuadraticTarget(L * np.eye(d), mu)

    interior = (L / kappa) * kappa ** rng.random(d - 2)
    eigenvalues = np.concatenate([[L / kappa], np.sort(interior), [L]])
    if not rotate:
        return QuadraticTarget(np.diag(eigenvalues), mu)
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    A = (Q * eigenvalues) @ Q.T
    return QuadraticTarget(A, mu)
