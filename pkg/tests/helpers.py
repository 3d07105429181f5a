"""Instance builders shared across test modules."""

import numpy as np

from fungalloc.model import Problem, UtilitySpec


def random_problem(rng, family="log", n=None, m=None, scarcity=0.3, **kwargs):
    """Small random instance with positive efficiencies and binding limits."""
    n = int(rng.integers(2, 21)) if n is None else n
    m = int(rng.integers(1, 5)) if m is None else m
    A = rng.uniform(0.05, 1.0, (n, m))
    R = rng.uniform(0.2, 1.0, m) * n * scarcity
    if family == "target_priority" and "weights" not in kwargs:
        kwargs["weights"] = np.where(rng.random(n) < 0.5, 2.0, 1.0)
        kwargs["targets"] = rng.uniform(0.1, 0.5, n)
    spec = UtilitySpec(family, **kwargs)
    return Problem(efficiency=A, limits=R, utility=spec)
