import numpy as np
from scipy.special import expit


def softplus(x):
    """
    Numerically stable softplus, log(1 + exp(x)).
    Uses x + log1p(exp(-x)) on the positive branch so that |x| up to 700 stays accurate.
    """
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_grad(x):
    """First derivative of softplus, the logistic sigmoid."""
    return expit(np.asarray(x, dtype=float))


def softplus_hess(x):
    """Second derivative of softplus, sigmoid(x) * sigmoid(-x)."""
    x = np.asarray(x, dtype=float)
    return expit(x) * expit(-x)


def log_softplus(x):
    """log(softplus(x)); exact in the far negative tail where softplus(x) ~ exp(x)."""
    x = np.asarray(x, dtype=float)
    tail = x < -30.0
    safe = np.where(tail, 0.0, x)
    return np.where(tail, x - 0.5 * np.exp(np.minimum(x, 0.0)), np.log(softplus(safe)))


def inverse_softplus(y):
    """
    Inverse of softplus for y > 0: log(exp(y) - 1), evaluated as y + log(-expm1(-y)).
    """
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def mean_and_standard_error(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-column Monte-Carlo mean and standard error of the mean.

    Args:
        samples: Array of shape (M, ...) with one draw per row.

    Returns:
        (mean, standard_error); the standard error uses the unbiased sample
        variance and is +inf when only a single draw is available.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    if n < 2:
        return mean, np.full_like(mean, np.inf)
    return mean, np.sqrt(samples.var(axis=0, ddof=1) / n)


def derive_seed(base_seed: int, index: int) -> int:
    """Seed of the index-th replication: base_seed XOR index."""
    return int(base_seed) ^ int(index)


def make_stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def clone_stream(rng: np.random.Generator) -> np.random.Generator:
    """Independent copy of a random stream at its current position (common random numbers)."""
    bit_generator = type(rng.bit_generator)()
    bit_generator.state = rng.bit_generator.state
    return np.random.Generator(bit_generator)
