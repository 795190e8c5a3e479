import os
import unittest

import numpy as np

from bbvi.family import FamilyConfig, VariationalParams

SLOW = os.environ.get("BBVI_LAB_SLOW") == "1"
slow = unittest.skipUnless(SLOW, "set BBVI_LAB_SLOW=1 to run acceptance-scale tests")


def random_params(config: FamilyConfig, rng: np.random.Generator) -> VariationalParams:
    """Random parameters inside the domain of every conditioner."""
    d = config.dim
    if config.conditioner.is_linear:
        s = rng.uniform(0.5, 1.5, d)
    else:
        s = rng.uniform(-1.0, 1.0, d)
    lower = 0.3 * rng.standard_normal(config.num_lower) if config.is_cholesky else None
    return VariationalParams(m=rng.standard_normal(d), s=s, L=lower)
