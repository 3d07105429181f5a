"""Fungible resource allocation via dual price discovery.

Maximizes a separable concave utility of job throughputs subject to per-job
time budgets and global resource limits. The dual problem is solved by
adjusting resource prices; each dual evaluation solves all per-job
subproblems analytically and in a vectorized batch.
"""

from .model import Allocation, Problem, UtilitySpec, validate
from .solver import SolveOptions, SolveResult, solve

__all__ = [
    "Allocation",
    "Problem",
    "SolveOptions",
    "SolveResult",
    "UtilitySpec",
    "solve",
    "validate",
]

__version__ = "0.1.0"
