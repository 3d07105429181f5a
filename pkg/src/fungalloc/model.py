"""Problem data model: jobs, resources, utility specification, and derived quantities.

A problem is an n-by-m efficiency matrix (row i gives the throughput of job i
when it runs 100% of the time on each resource), a vector of m resource usage
limits, an optional per-job scalar demand, and a utility specification.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    DomainViolation,
    NonPositiveLimit,
    UnsupportedFamily,
    ZeroEfficiencyRowWithLogUtility,
)

FAMILIES = ("linear", "log", "alpha_fair", "power", "target_priority")

# Relative slack used by feasibility checks; scale-aware because usage and
# limits can be ~1e6 on large instances.
FEAS_RTOL = 1e-9


@dataclass(frozen=True)
class UtilitySpec:
    """Tagged utility family with its parameters.

    linear           u(t) = t
    log              u(t) = log t
    alpha_fair       u(t) = t^(1-alpha)/(1-alpha) for alpha >= 0, alpha != 1;
                     alpha = 0 is linear, alpha = 1 is log
    power            u(t) = t^rho for rho in (0, 1], u(t) = -t^rho for rho < 0
    target_priority  u(t) = w_i * min(t - t_des_i, 0), per-job weight/target
    """

    family: str
    alpha: Optional[float] = None
    rho: Optional[float] = None
    weights: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedFamily(f"unknown utility family {self.family!r}")
        if self.family == "alpha_fair":
            if self.alpha is None or self.alpha < 0:
                raise DomainViolation("alpha_fair requires alpha >= 0")
        elif self.alpha is not None:
            raise DomainViolation("alpha only valid for alpha_fair")
        if self.family == "power":
            if self.rho is None or not (0 < self.rho <= 1 or self.rho < 0):
                raise DomainViolation("power requires rho in (0, 1] or rho < 0")
        elif self.rho is not None:
            raise DomainViolation("rho only valid for power")
        if self.family == "target_priority":
            if self.weights is None or self.targets is None:
                raise DomainViolation("target_priority requires weights and targets")
            w = np.asarray(self.weights, dtype=float)
            td = np.asarray(self.targets, dtype=float)
            if np.any(w <= 0) or np.any(td <= 0):
                raise DomainViolation("weights and targets must be positive")
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "targets", td)
        elif self.weights is not None or self.targets is not None:
            raise DomainViolation("weights/targets only valid for target_priority")

    def needs_positive_throughput(self) -> bool:
        """True when u(t) is unbounded below as t -> 0+."""
        if self.family == "log":
            return True
        if self.family == "power" and self.rho is not None and self.rho < 0:
            return True
        if self.family == "alpha_fair" and self.alpha is not None and self.alpha >= 1:
            return True
        return False


@dataclass(frozen=True)
class Problem:
    """One resource allocation instance."""

    efficiency: np.ndarray  # (n, m), nonnegative
    limits: np.ndarray  # (m,), positive
    utility: UtilitySpec
    demands: Optional[np.ndarray] = None  # (n,), positive; default all ones

    def __post_init__(self):
        object.__setattr__(
            self, "efficiency", np.ascontiguousarray(self.efficiency, dtype=float)
        )
        object.__setattr__(self, "limits", np.asarray(self.limits, dtype=float))
        if self.demands is not None:
            object.__setattr__(self, "demands", np.asarray(self.demands, dtype=float))

    @property
    def n(self) -> int:
        return self.efficiency.shape[0]

    @property
    def m(self) -> int:
        return self.efficiency.shape[1]

    def demands_or_ones(self) -> np.ndarray:
        if self.demands is None:
            return np.ones(self.n)
        return self.demands


@dataclass
class Allocation:
    """Time-fraction matrix X, row i allocating job i across the m resources."""

    X: np.ndarray
    feasible: bool = field(default=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)

    def row_sums(self) -> np.ndarray:
        return self.X.sum(axis=1)


def validate(problem: Problem) -> None:
    """Raise unless all problem invariants hold."""
    A, R = problem.efficiency, problem.limits
    if A.ndim != 2 or R.ndim != 1 or R.shape[0] != A.shape[1]:
        raise DimensionMismatch(
            f"efficiency {A.shape} incompatible with limits {R.shape}"
        )
    if np.any(A < 0):
        raise DomainViolation("efficiency entries must be nonnegative")
    if np.any(R <= 0):
        raise NonPositiveLimit("all resource limits must be positive")
    d = problem.demands
    if d is not None:
        if d.shape != (problem.n,):
            raise DimensionMismatch(f"demands {d.shape} incompatible with n={problem.n}")
        if np.any(d <= 0):
            raise DomainViolation("demands must be positive")
    spec = problem.utility
    if spec.family == "target_priority":
        if spec.weights.shape != (problem.n,) or spec.targets.shape != (problem.n,):
            raise DimensionMismatch("weights/targets must have one entry per job")
    if spec.needs_positive_throughput():
        row_max = A.max(axis=1) if problem.m else np.zeros(problem.n)
        if problem.n and np.any(row_max <= 0):
            bad = int(np.argmax(row_max <= 0))
            raise ZeroEfficiencyRowWithLogUtility(
                f"job {bad} has zero efficiency on every resource; its utility "
                "is unbounded below"
            )


def _check_alloc_dims(problem: Problem, alloc: Allocation) -> None:
    if alloc.X.shape != (problem.n, problem.m):
        raise DimensionMismatch(
            f"allocation {alloc.X.shape} incompatible with problem "
            f"({problem.n}, {problem.m})"
        )


def throughputs(problem: Problem, alloc: Allocation) -> np.ndarray:
    """t_i = a_i . x_i for every job."""
    _check_alloc_dims(problem, alloc)
    return np.einsum("ij,ij->i", problem.efficiency, alloc.X)


def resource_usage(problem: Problem, alloc: Allocation) -> np.ndarray:
    """Total demand-weighted usage of each resource, sum_i d_i x_i."""
    _check_alloc_dims(problem, alloc)
    if problem.demands is None:
        return alloc.X.sum(axis=0)
    return problem.demands @ alloc.X


def check_feasible(problem: Problem, alloc: Allocation) -> bool:
    """Row constraints plus the resource limits, with relative slack."""
    _check_alloc_dims(problem, alloc)
    if alloc.X.size and alloc.X.min() < -FEAS_RTOL:
        return False
    if np.any(alloc.row_sums() > 1 + FEAS_RTOL * 2):
        return False
    r = resource_usage(problem, alloc)
    return bool(np.all(r <= problem.limits * (1 + FEAS_RTOL) + FEAS_RTOL))


def total_utility(problem: Problem, t: np.ndarray) -> float:
    """U(t) = sum_i u_i(t_i)."""
    from . import utilities

    t = np.asarray(t, dtype=float)
    if t.shape != (problem.n,):
        raise DimensionMismatch(f"throughputs {t.shape} incompatible with n={problem.n}")
    vals = utilities.evaluate(problem.utility, t)
    return float(vals.sum())


def average_utility(problem: Problem, t: np.ndarray) -> float:
    return total_utility(problem, t) / problem.n


def utility_derived_average(problem: Problem, t: np.ndarray) -> float:
    """u^{-1} of the mean utility; requires identical, invertible u_i.

    Collapses to familiar means: arithmetic for linear, geometric for log,
    harmonic for u(t) = -1/t.
    """
    from . import utilities

    return utilities.inverse_value(problem.utility, average_utility(problem, t))
