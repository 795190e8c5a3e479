from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GradientEstimate:
    mean: np.ndarray  # flattened over lambda, length p
    per_sample_trace_variance: float  # unbiased, summed over coordinates
    samples_used: int
    standard_error: np.ndarray  # per coordinate, +inf when samples_used == 1


@dataclass(frozen=True)
class AssumptionStatistic:
    mean: np.ndarray  # one entry per latent coordinate
    standard_error: np.ndarray


@dataclass
class TrajectoryRecord:
    iteration: int
    kl: float | None  # None when the target has no closed-form KL
    param_dist_sq: float | None  # None when lambda* is unknown
    elbo: float
    domain_clamps: int


@dataclass
class RunResult:
    records: list[TrajectoryRecord]
    iterations_to_eps: int | None  # None when the KL threshold was never met
    failed: bool = False
    failure: str = ""


@dataclass
class VerificationReport:
    check_name: str
    status: str  # 'pass', 'fail' or 'skip' (out of precondition)
    statistic: float
    tolerance: float
    detail: str = ""
    seed: int | None = None

    @property
    def passed(self) -> bool:
        return self.status != "fail"


@dataclass(order=True)
class SweepRow:
    # Field order is the sort order used when the sweep is written out.
    optimizer: str
    conditioner: str
    stepsize: float
    init_scale: float
    trial: int
    iters_to_eps: int  # equals T when censored
    censored: bool
    final_kl: float
    failed: bool = field(default=False, compare=False)
