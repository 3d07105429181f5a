"""Analytical per-job subproblem: maximize u(t) - c(t) over one scalar.

c(t) is the minimum price of achieving throughput t. It is the lower convex
boundary of the points {(0,0)} union {(a_j, p_j)}: a piecewise-affine,
increasing, convex function on [0, max_j a_j], and the maximizing allocation
is a vertex solution touching at most two resources.

Two routes are implemented:
  * ``build_envelope``: explicit kink list via a monotone-chain lower hull,
    O(m log m) per job.
  * the batched kernel behind ``solve_all_subproblems``: enumerates all
    segments between pairs of sorted points (including the virtual origin)
    and maximizes the closed-form per-segment solution, fully vectorized
    across jobs. Per-segment maxima of dominated segments never exceed the
    envelope maximum, so both routes return the same optimum.

Ties are broken toward the smallest optimal t, then the segment whose left
endpoint comes first in sorted order, so results are deterministic.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import DomainViolation, TOutOfSegment, UnsupportedFamily
from .model import Allocation, Problem, UtilitySpec
from . import utilities

NONZERO_TOL = 1e-7

# Upper bound on elements per temporary in the batched kernel; keeps peak
# memory flat for large n by chunking over jobs.
_CHUNK_ELEMS = 4_000_000


@dataclass
class CostEnvelope:
    """Kinks of c(t). resource_of_kink uses 0 for the virtual origin and
    j+1 for (0-based) resource j."""

    kinks: List[Tuple[float, float]]
    resource_of_kink: List[int]

    def value(self, t: np.ndarray) -> np.ndarray:
        ts = np.array([k[0] for k in self.kinks])
        cs = np.array([k[1] for k in self.kinks])
        return np.interp(np.asarray(t, dtype=float), ts, cs)


@dataclass
class SubproblemSolution:
    t_star: float
    x_star: np.ndarray
    net_utility: float


def build_envelope(a: np.ndarray, prices: np.ndarray) -> CostEnvelope:
    """Lower convex hull of {(0,0)} union {(a_j, p_j)}."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(prices, dtype=float)
    if a.shape != p.shape or a.ndim != 1:
        raise DomainViolation("efficiency and price vectors must match")
    # points at a=0 never extend the domain beyond the origin
    keep = a > 0
    pts = [(0.0, 0.0, 0)]
    order = np.argsort(a[keep], kind="stable")
    idx = np.flatnonzero(keep)[order]
    best_at = {}
    for j in idx:
        aj = float(a[j])
        # among duplicate abscissae keep the cheapest (first on ties)
        if aj not in best_at or p[j] < best_at[aj][0]:
            best_at[aj] = (float(p[j]), int(j))
    for aj in sorted(best_at):
        pj, j = best_at[aj]
        pts.append((aj, pj, j + 1))

    hull: List[Tuple[float, float, int]] = []
    for pt in pts:
        while len(hull) >= 2:
            (x1, y1, _), (x2, y2, _) = hull[-2], hull[-1]
            # drop middle point when it lies on or above the new chord
            if (y2 - y1) * (pt[0] - x1) >= (pt[1] - y1) * (x2 - x1):
                hull.pop()
            else:
                break
        hull.append(pt)
    return CostEnvelope(
        kinks=[(x, y) for x, y, _ in hull],
        resource_of_kink=[r for _, _, r in hull],
    )


def allocation_from_segment(a: np.ndarray, i: int, j: int, t: float) -> np.ndarray:
    """Two-resource allocation achieving throughput t on segment (i, j).

    Indices follow the envelope convention: 0 is the virtual origin, k >= 1
    is resource k-1. Requires t in [a_i, a_j].
    """
    a = np.asarray(a, dtype=float)
    ai = 0.0 if i == 0 else float(a[i - 1])
    aj = float(a[j - 1])
    if not (min(ai, aj) - 1e-12 <= t <= max(ai, aj) + 1e-12):
        raise TOutOfSegment(f"t={t} outside [{ai}, {aj}]")
    if aj == ai:
        raise TOutOfSegment("degenerate segment")
    x = np.zeros(a.shape[0])
    xi = (aj - t) / (aj - ai)
    xj = (t - ai) / (aj - ai)
    if i > 0:
        x[i - 1] = xi
    x[j - 1] = xj
    return x


def maximize_over_segment(
    spec: UtilitySpec,
    job: Optional[int],
    slope: float,
    intercept: float,
    lo: float,
    hi: float,
) -> Tuple[float, float]:
    """Closed-form maximizer of u(t) - (slope*t + intercept) on [lo, hi]."""
    fam = spec.family
    if fam == "linear" or (fam == "alpha_fair" and spec.alpha == 0) or (
        fam == "power" and spec.rho == 1
    ):
        t = hi if slope < 1 else lo
    elif fam == "target_priority":
        w, td = float(spec.weights[job]), float(spec.targets[job])
        t = min(max(td, lo), hi) if w > slope else lo
    elif fam in ("log", "alpha_fair", "power"):
        if slope <= 0:
            t = hi
        else:
            t = min(max(utilities.inverse_derivative(spec, slope), lo), hi)
    else:  # pragma: no cover
        raise UnsupportedFamily(fam)
    val = float(utilities.evaluate(spec, t, job=job)) - (slope * t + intercept)
    return float(t), val


def solve_subproblem(
    spec: UtilitySpec,
    job: Optional[int],
    a: np.ndarray,
    effective_prices: np.ndarray,
) -> SubproblemSolution:
    """Global maximizer of u(t) - c(t), with the <= 2-resource allocation."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    p = np.atleast_2d(np.asarray(effective_prices, dtype=float))
    X, t, net = _solve_batch(a, p, spec, job_offset=0 if job is None else job)
    return SubproblemSolution(t_star=float(t[0]), x_star=X[0], net_utility=float(net[0]))


def solve_all_subproblems(
    problem: Problem, prices: np.ndarray
) -> Tuple[Allocation, np.ndarray]:
    """All n subproblems at effective prices d_i * p; rows are independent."""
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (problem.m,):
        raise DomainViolation(f"prices must have shape ({problem.m},)")
    A = problem.efficiency
    n, m = A.shape
    X = np.empty((n, m))
    net = np.empty(n)
    t = np.empty(n)
    k_pairs = (m + 1) * m // 2
    block = max(1, _CHUNK_ELEMS // max(k_pairs, 1))
    d = problem.demands
    for s in range(0, n, block):
        e = min(n, s + block)
        if d is None:
            P = np.broadcast_to(prices, (e - s, m))
        else:
            P = d[s:e, None] * prices
        X[s:e], t[s:e], net[s:e] = _solve_batch(
            A[s:e], P, problem.utility, job_offset=s
        )
    return Allocation(X=X), net


def _batch_eval(spec: UtilitySpec, T: np.ndarray, job_offset: int) -> np.ndarray:
    """u applied to a (n, k) array of throughput candidates."""
    fam = spec.family
    if fam == "target_priority":
        n = T.shape[0]
        w = spec.weights[job_offset : job_offset + n, None]
        td = spec.targets[job_offset : job_offset + n, None]
        return w * np.minimum(T - td, 0.0)
    return utilities.evaluate(spec, T)


def _batch_argmax_t(
    spec: UtilitySpec,
    slope: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    job_offset: int,
) -> np.ndarray:
    """Per-segment closed-form maximizer, elementwise over (n, k) arrays."""
    fam = spec.family
    if fam == "linear" or (fam == "alpha_fair" and spec.alpha == 0) or (
        fam == "power" and spec.rho == 1
    ):
        return np.where(slope < 1.0, hi, lo)
    if fam == "target_priority":
        n = slope.shape[0]
        w = spec.weights[job_offset : job_offset + n, None]
        td = spec.targets[job_offset : job_offset + n, None]
        return np.where(w > slope, np.clip(td, lo, hi), lo)
    # strictly concave: project (u')^{-1}(slope); slope <= 0 pushes to hi
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if fam == "log" or (fam == "alpha_fair" and spec.alpha == 1):
            t_unc = 1.0 / slope
        elif fam == "alpha_fair":
            t_unc = slope ** (-1.0 / spec.alpha)
        elif fam == "power":
            t_unc = (slope / abs(spec.rho)) ** (1.0 / (spec.rho - 1.0))
        else:  # pragma: no cover
            raise UnsupportedFamily(fam)
    t_unc = np.where(slope > 0, t_unc, np.inf)
    return np.clip(t_unc, lo, hi)


def _solve_batch(
    A: np.ndarray, P: np.ndarray, spec: UtilitySpec, job_offset: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pair-enumeration solve for a block of jobs.

    Every arithmetic step is elementwise per row, so results are identical
    whether jobs are solved together or one at a time.
    """
    n, m = A.shape
    order = np.argsort(A, axis=1, kind="stable")
    a_s = np.take_along_axis(A, order, axis=1)
    p_s = np.take_along_axis(np.ascontiguousarray(P), order, axis=1)
    zero = np.zeros((n, 1))
    a0 = np.concatenate([zero, a_s], axis=1)
    p0 = np.concatenate([zero, p_s], axis=1)

    iu, ju = np.triu_indices(m + 1, k=1)  # lexicographic pair order
    ai, aj = a0[:, iu], a0[:, ju]
    pi, pj = p0[:, iu], p0[:, ju]
    valid = aj > ai
    da = np.where(valid, aj - ai, 1.0)
    slope = (pj - pi) / da

    t_cand = _batch_argmax_t(spec, slope, ai, aj, job_offset)
    with np.errstate(invalid="ignore"):
        val = _batch_eval(spec, t_cand, job_offset) - (pi + slope * (t_cand - ai))
    val[~valid] = -np.inf
    t_cand[~valid] = np.inf

    vmax = val.max(axis=1, keepdims=True)
    tied = val == vmax
    tmin = np.where(tied, t_cand, np.inf).min(axis=1, keepdims=True)
    k_best = (tied & (t_cand == tmin)).argmax(axis=1)
    rows = np.arange(n)

    t_star = t_cand[rows, k_best]
    net = val[rows, k_best]
    ib, jb = iu[k_best], ju[k_best]
    a_i = a0[rows, ib]
    a_j = a0[rows, jb]

    X = np.zeros((n, m))
    degenerate = ~valid[rows, k_best]  # all-zero efficiency row
    if degenerate.any():
        t_star = np.where(degenerate, 0.0, t_star)
        u0 = _batch_eval(spec, np.zeros((n, 1)), job_offset)[:, 0]
        net = np.where(degenerate, u0, net)
    good = ~degenerate
    denom = np.where(good, a_j - a_i, 1.0)
    xj = (t_star - a_i) / denom
    # right endpoint is always a real resource (sorted position jb >= 1)
    gj = np.flatnonzero(good)
    X[gj, order[gj, jb[gj] - 1]] = xj[gj]
    left_real = good & (ib > 0)
    gl = np.flatnonzero(left_real)
    if gl.size:
        xi = (a_j - t_star) / denom
        X[gl, order[gl, ib[gl] - 1]] = xi[gl]
    return X, t_star, net
