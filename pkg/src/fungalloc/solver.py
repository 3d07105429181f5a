"""Price discovery: dual evaluation, price updates, and the solve loop.

The dual problem minimizes the convex dual function g(p) over p >= 0. Each
evaluation of g solves all per-job subproblems at the current prices and
yields the subgradient q = R - r. Prices are updated with L-BFGS (default,
with a projected backtracking line search) or a diminishing-step projected
subgradient method. The loop stops when the duality gap g(p) - U(X~) drops
below the tolerance, certifying the feasible allocation X~.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import utilities
from .errors import LineSearchFailed
from .model import Allocation, Problem, throughputs, total_utility, validate
from .subproblem import NONZERO_TOL, solve_all_subproblems

SLACK_TOL = 1e-7
_LS_DECREASE = 1e-4
_LS_MAX_TRIALS = 20
_CURVATURE_SKIP = 1e-10

# repair_overuse runs inside the loop only below this size; larger instances
# average out single-job effects and converge without it
_REPAIR_MAX_N = 100_000
_REPAIR_SWEEPS = 3

# the exact LP refinement is reserved for desk-scale instances
_POLISH_MAX_ENTRIES = 5_000
_MILP_MAX_ENTRIES = 512
_MILP_TANGENTS = 512


@dataclass
class DualEval:
    dual_value: float
    subgradient: np.ndarray  # q = R - r
    X_raw: Allocation
    usage: np.ndarray
    net_utilities: np.ndarray


@dataclass
class IterationRecord:
    iter: int
    prices: np.ndarray
    usage: np.ndarray
    dual_value: float
    primal_utility: float
    gap: float


@dataclass
class SolveOptions:
    tolerance: Optional[float] = None  # absolute; defaults to 1e-3 * n
    max_iters: int = 300
    update_rule: str = "lbfgs"  # or "subgradient"
    memory: int = 10
    subgradient_step0: Optional[float] = None  # defaults to ||p1||_inf / 10
    initial_prices: Optional[np.ndarray] = None


@dataclass
class SolveResult:
    X_feasible: Allocation
    prices: np.ndarray
    throughputs: np.ndarray
    primal_utility: float
    dual_value: float
    trace: List[IterationRecord]
    converged: bool
    frac_two_resources: float
    frac_positive_slack: float

    @property
    def gap(self) -> float:
        return self.dual_value - self.primal_utility


def evaluate_dual(problem: Problem, prices: np.ndarray) -> DualEval:
    """g(p) = p.R + sum of per-job optimal net utilities; q = R - usage."""
    prices = np.asarray(prices, dtype=float)
    if problem.n == 0:
        R = problem.limits
        return DualEval(
            dual_value=float(prices @ R),
            subgradient=R.copy(),
            X_raw=Allocation(X=np.zeros((0, problem.m))),
            usage=np.zeros(problem.m),
            net_utilities=np.zeros(0),
        )
    X_raw, net = solve_all_subproblems(problem, prices)
    d = problem.demands
    usage = X_raw.X.sum(axis=0) if d is None else d @ X_raw.X
    g = float(prices @ problem.limits + net.sum())
    return DualEval(
        dual_value=g,
        subgradient=problem.limits - usage,
        X_raw=X_raw,
        usage=usage,
        net_utilities=net,
    )


def make_feasible(problem: Problem, X_raw: Allocation) -> Allocation:
    """Scale down columns until the resource limits hold."""
    d = problem.demands
    r = X_raw.X.sum(axis=0) if d is None else d @ X_raw.X
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(r > 0, np.minimum(1.0, problem.limits / r), 1.0)
    return Allocation(X=X_raw.X * scale, feasible=True)


def repair_overuse(
    problem: Problem, prices: np.ndarray, X_raw: Allocation, net: np.ndarray
) -> Allocation:
    """Move near-indifferent jobs off overused resources.

    At prices close to optimal, the jobs crowding an overused resource are
    (almost) tied with an allocation that avoids it. Whole rows are switched
    to their best resource-j-free alternative in order of increasing net
    loss until the limit holds; the final job switches fractionally when the
    blended row still touches at most two resources. Residual overuse is
    left for column scaling.
    """
    from . import utilities

    X = X_raw.X.copy()
    net = net.copy()
    d = problem.demands_or_ones()
    R = problem.limits
    p = np.asarray(prices, dtype=float)
    big = (float(p.max(initial=0.0)) + 1.0) * 1e9
    A = problem.efficiency

    for _ in range(_REPAIR_SWEEPS):
        r = d @ X
        over = np.flatnonzero(r > R * (1 + 1e-12))
        if over.size == 0:
            break
        # worst column first; recompute usage after each column
        for j in over[np.argsort(-(r[over] - R[over]) / R[over])]:
            r = d @ X
            excess = r[j] - R[j]
            if excess <= 0:
                continue
            p_excl = p.copy()
            p_excl[j] = big
            alt_alloc, alt_net = solve_all_subproblems(problem, p_excl)
            X_alt = alt_alloc.X
            users = np.flatnonzero(X[:, j] > NONZERO_TOL)
            if users.size == 0:
                continue
            loss = net[users] - alt_net[users]
            for i in users[np.argsort(loss)]:
                moved = d[i] * X[i, j]
                if moved >= excess > 0:
                    phi = excess / moved
                    x_mix = (1 - phi) * X[i] + phi * X_alt[i]
                    if (x_mix > NONZERO_TOL).sum() <= 2:
                        t_mix = float(A[i] @ x_mix)
                        u_mix = float(utilities.evaluate(problem.utility, t_mix, job=i))
                        X[i] = x_mix
                        net[i] = u_mix - d[i] * float(p @ x_mix)
                        excess = 0.0
                        break
                X[i] = X_alt[i]
                net[i] = alt_net[i]
                excess -= moved
                if excess <= 0:
                    break
    return Allocation(X=X)


def backfill_slack(problem: Problem, X_feasible: Allocation) -> Allocation:
    """Grant leftover resource capacity to jobs with spare time budget.

    Column scaling can strand capacity: a job whose column was scaled ends up
    below its time budget while another resource sits under its limit. Each
    underused column is handed out greedily by current marginal utility,
    bounded by the job's remaining time, the column's remaining capacity,
    and (for target-priority) the job's target. Rows never grow beyond two
    touched resources, so the basic-solution shape is preserved.
    """
    from . import utilities

    X = X_feasible.X.copy()
    A = problem.efficiency
    d = problem.demands_or_ones()
    R = problem.limits
    spec = problem.utility
    for _ in range(_REPAIR_SWEEPS):
        r = d @ X
        slack_cols = np.flatnonzero(r < R * (1 - 1e-12))
        t = np.einsum("ij,ij->i", A, X)
        row_slack = 1.0 - X.sum(axis=1)
        improved = False
        for j in slack_cols:
            cap = R[j] - float(d @ X[:, j])
            with np.errstate(divide="ignore"):
                # clamp well above zero: derivatives can overflow to inf there
                du = np.asarray(utilities.derivative(spec, np.maximum(t, 1e-12)))
            vals = du * A[:, j]
            for i in np.argsort(-vals):
                if cap <= 1e-15:
                    break
                if vals[i] <= 0 or row_slack[i] <= 1e-12:
                    continue
                nnz_i = (X[i] > NONZERO_TOL).sum()
                if X[i, j] <= NONZERO_TOL and nnz_i >= 2:
                    continue
                delta = min(row_slack[i], cap / d[i])
                if spec.family == "target_priority" and t[i] < spec.targets[i]:
                    delta = min(delta, (spec.targets[i] - t[i]) / A[i, j])
                if delta <= 1e-15:
                    continue
                X[i, j] += delta
                row_slack[i] -= delta
                t[i] += A[i, j] * delta
                cap -= d[i] * delta
                improved = True
        if not improved:
            break
    return Allocation(X=X, feasible=True)


def lp_polish(problem: Problem, t_caps: np.ndarray) -> Optional[Allocation]:
    """Exact feasible reallocation maximizing linearized utility, capped at t_caps.

    Solves the linear program
        max sum_i u_i'(t_cap_i) a_i.x_i
        s.t. a_i.x_i <= t_cap_i, 1.x_i <= 1, x >= 0, sum_i d_i x_i <= R,
    which redistributes capacity among jobs that the per-job vertex solutions
    leave tied. Desk-scale only; returns None if the LP does not solve.
    """
    from scipy import sparse
    from scipy.optimize import linprog

    from . import utilities

    A = problem.efficiency
    n, m = A.shape
    d = problem.demands_or_ones()
    t_caps = np.asarray(t_caps, dtype=float)
    spec = problem.utility
    with np.errstate(divide="ignore"):
        if spec.family == "target_priority":
            # jobs capped at or below their target still value throughput at w
            c_row = np.where(t_caps <= spec.targets * (1 + 1e-12), spec.weights, 0.0)
        else:
            c_row = np.asarray(
                utilities.derivative(spec, np.maximum(t_caps, 1e-300))
            )
    c_row = np.minimum(c_row, 1e12)  # keep the LP well scaled

    indptr = np.arange(0, n * m + 1, m)
    indices = np.arange(n * m)
    rows_t = sparse.csr_matrix((A.ravel(), indices, indptr), shape=(n, n * m))
    rows_time = sparse.csr_matrix((np.ones(n * m), indices, indptr), shape=(n, n * m))
    # column j usage: entry (j, i*m + j) = d_i
    cols = sparse.kron(sparse.csr_matrix(d[None, :]), sparse.identity(m)).tocsr()
    A_ub = sparse.vstack([rows_t, rows_time, cols], format="csr")
    b_ub = np.concatenate([t_caps, np.ones(n), problem.limits])
    obj = -(c_row[:, None] * A).ravel()
    res = linprog(obj, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if not res.success:
        return None
    return Allocation(X=np.maximum(res.x.reshape(n, m), 0.0), feasible=True)


def _basify_rows(problem: Problem, X: np.ndarray) -> None:
    """Rewrite rows touching >2 resources as rows on <=2, in place.

    LP vertices can park a handful of rows on three resources. Each such row
    is replaced by a one- or two-resource representation of the same
    throughput whenever one fits the column limits. When every column is
    exactly binding no equal-throughput rewrite exists; the row then takes
    the best throughput reachable on <=2 resources, conceding a small amount
    of utility. The caller only adopts the result if total utility improves.
    """
    A = problem.efficiency
    d = problem.demands_or_ones()
    R = problem.limits
    for i in np.flatnonzero((X > NONZERO_TOL).sum(axis=1) > 2):
        t_i = float(A[i] @ X[i])
        slack = R - d @ X + d[i] * X[i]  # column room with row i removed
        # any resource the job can use is a rewrite candidate, not only the
        # columns the vertex solution happens to touch
        candidates = np.flatnonzero(A[i] > 0)
        done = False
        # single-resource rewrites first, most efficient resource first
        for j in sorted(candidates, key=lambda j: -A[i, j]):
            xj = t_i / A[i, j]
            if xj <= 1 + 1e-12 and d[i] * xj <= slack[j] * (1 + 1e-12):
                X[i] = 0.0
                X[i, j] = min(xj, 1.0)
                done = True
                break
        if done:
            continue
        for j in candidates:
            for k in candidates:
                aj, ak = A[i, j], A[i, k]
                if k == j or aj <= 0 or ak <= 0:
                    continue
                # x_k = (t_i - a_j x_j)/a_k; find a feasible x_j interval
                sj = slack[j] / d[i]
                sk = slack[k] / d[i]
                lo = max(0.0, (t_i - ak * sk) / aj)
                hi = min(t_i / aj, sj)
                # row budget: x_j + (t_i - a_j x_j)/a_k <= 1
                if ak > aj:
                    hi = min(hi, (ak - t_i) / (ak - aj))
                elif ak < aj:
                    lo = max(lo, (ak - t_i) / (ak - aj))
                elif t_i > ak:
                    continue
                if lo > hi * (1 + 1e-12):
                    continue
                xj = min(max(lo, 0.0), hi)
                xk = max((t_i - aj * xj) / ak, 0.0)
                X[i] = 0.0
                X[i, j] = xj
                X[i, k] = xk
                done = True
                break
            if done:
                break
        if done:
            continue
        # no equal-throughput rewrite fits: take the best reachable pair
        best = (0.0, None)
        order = sorted(candidates, key=lambda j: -A[i, j])
        for pos, j in enumerate(order):
            xj = min(1.0, slack[j] / d[i])
            for k in order[pos + 1 :]:
                xk = min(1.0 - xj, slack[k] / d[i])
                t_pair = A[i, j] * xj + A[i, k] * xk
                if t_pair > best[0]:
                    best = (t_pair, (j, xj, k, xk))
            if A[i, j] * xj > best[0]:
                best = (A[i, j] * xj, (j, xj, None, 0.0))
        if best[1] is None:
            X[i] = 0.0
            continue
        t_new = min(best[0], t_i)
        j, xj, k, xk = best[1]
        if A[i, j] * xj >= t_new:
            X[i] = 0.0
            X[i, j] = t_new / A[i, j]
        else:
            X[i] = 0.0
            X[i, j] = xj
            X[i, k] = (t_new - A[i, j] * xj) / A[i, k]


def basic_milp_polish(problem: Problem, time_limit: float = 10.0) -> Optional[Allocation]:
    """Best feasible allocation with every row on <=2 resources, via a MILP.

    Binary indicators gate each entry and at most two may be active per row;
    the concave utility is replaced by the lower envelope of tangent lines,
    which overestimates it by O(grid spacing squared). The caller must
    re-evaluate the true utility of the result before adopting it. Returns
    None on failure or for oversized instances.
    """
    from scipy import sparse
    from scipy.optimize import Bounds, LinearConstraint, milp

    from . import utilities

    A = problem.efficiency
    n, m = A.shape
    if n * m > _MILP_MAX_ENTRIES:
        return None
    d = problem.demands_or_ones()
    spec = problem.utility
    nx = n * m
    nv = 2 * nx + n  # x entries, support indicators, epigraph utilities

    # tangent lines u_i <= u(t0) + u'(t0) (t_i - t0); the piecewise-linear
    # families are represented exactly, the smooth ones on a log-spaced grid
    t_hi = np.maximum(A.max(axis=1), 1e-12)
    if spec.family == "linear":
        slopes = np.ones((1, n))
        intercepts = np.zeros((1, n))
    elif spec.family == "target_priority":
        w, td = spec.weights, spec.targets
        slopes = np.vstack([np.zeros(n), w])
        intercepts = np.vstack([np.zeros(n), -w * td])
    else:
        grids = t_hi[None, :] * np.geomspace(1e-4, 1.0, _MILP_TANGENTS)[:, None]
        slopes = np.empty_like(grids)
        intercepts = np.empty_like(grids)
        for g, t0 in enumerate(grids):
            u0 = np.asarray(utilities.evaluate(spec, t0))
            du0 = np.asarray(utilities.derivative(spec, t0))
            slopes[g] = du0
            intercepts[g] = u0 - du0 * t0
    indptr = np.arange(0, nx + 1, m)
    indices = np.arange(nx)
    blocks = []
    for g in range(slopes.shape[0]):
        x_part = sparse.csr_matrix(
            ((-slopes[g][:, None] * A).ravel(), indices, indptr), shape=(n, nx)
        )
        blocks.append(
            sparse.hstack(
                [x_part, sparse.csr_matrix((n, nx)), sparse.identity(n)], format="csr"
            )
        )
    b_tan = intercepts.ravel()

    rows_time = sparse.csr_matrix((np.ones(nx), indices, indptr), shape=(n, nx))
    zeros_u = sparse.csr_matrix((n, n))
    eye = sparse.identity(nx)
    A_ub = sparse.vstack(
        blocks
        + [
            sparse.hstack([eye, -eye, sparse.csr_matrix((nx, n))], format="csr"),
            sparse.hstack([sparse.csr_matrix((n, nx)), rows_time, zeros_u]),
            sparse.hstack([rows_time, sparse.csr_matrix((n, nx)), zeros_u]),
            sparse.hstack(
                [
                    sparse.kron(sparse.csr_matrix(d[None, :]), sparse.identity(m)),
                    sparse.csr_matrix((m, nx + n)),
                ],
                format="csr",
            ),
        ],
        format="csr",
    )
    b_ub = np.concatenate(
        [b_tan, np.zeros(nx), np.full(n, 2.0), np.ones(n), problem.limits]
    )
    obj = np.concatenate([np.zeros(2 * nx), -np.ones(n)])
    integrality = np.concatenate([np.zeros(nx), np.ones(nx), np.zeros(n)])
    lb = np.concatenate([np.zeros(2 * nx), np.full(n, -np.inf)])
    ub = np.concatenate([np.ones(2 * nx), np.full(n, np.inf)])
    try:
        res = milp(
            obj,
            constraints=LinearConstraint(A_ub, -np.inf, b_ub),
            integrality=integrality,
            bounds=Bounds(lb, ub),
            options={"time_limit": time_limit},
        )
    except ValueError:
        return None
    if res.x is None:
        return None
    X = np.maximum(res.x[:nx].reshape(n, m), 0.0)
    # the relaxed indicator bound can leave a whisker of mass on a third
    # column; zero anything below the support threshold
    X[X <= NONZERO_TOL] = 0.0
    return Allocation(X=X, feasible=True)


def exact_lp_prices(problem: Problem) -> Optional[np.ndarray]:
    """Optimal resource prices for the piecewise-linear families via one LP.

    The dual function of a problem with linear or target-priority utility is
    itself piecewise linear, and first-order updates can crawl at its kinks.
    At desk scale the full problem is a linear program whose resource-row
    marginals are exactly the optimal prices; the caller validates them by
    re-evaluating the dual. Returns None for other families or LP failure.
    """
    from scipy import sparse
    from scipy.optimize import linprog

    A = problem.efficiency
    n, m = A.shape
    d = problem.demands_or_ones()
    spec = problem.utility
    indptr = np.arange(0, n * m + 1, m)
    indices = np.arange(n * m)
    rows_time = sparse.csr_matrix((np.ones(n * m), indices, indptr), shape=(n, n * m))
    cols = sparse.kron(sparse.csr_matrix(d[None, :]), sparse.identity(m)).tocsr()
    if spec.family == "linear":
        A_ub = sparse.vstack([rows_time, cols], format="csr")
        b_ub = np.concatenate([np.ones(n), problem.limits])
        obj = -A.ravel()
    elif spec.family == "target_priority":
        # one shortfall variable per job: u_i = -w_i s_i, s_i >= td_i - a_i.x_i
        rows_t = sparse.csr_matrix((A.ravel(), indices, indptr), shape=(n, n * m))
        shortfall = sparse.vstack(
            [-sparse.identity(n), sparse.csr_matrix((n + m, n))], format="csr"
        )
        A_ub = sparse.hstack(
            [sparse.vstack([-rows_t, rows_time, cols], format="csr"), shortfall],
            format="csr",
        )
        b_ub = np.concatenate([-spec.targets, np.ones(n), problem.limits])
        obj = np.concatenate([np.zeros(n * m), spec.weights])
    else:
        return None
    res = linprog(obj, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if not res.success:
        return None
    return np.maximum(-res.ineqlin.marginals[-m:], 0.0)


def initialize_prices(problem: Problem) -> np.ndarray:
    """Marginal-utility prices at the uniform allocation x_i = R/n."""
    A, R, n = problem.efficiency, problem.limits, problem.n
    x0 = R / n
    kappa = x0.sum()
    if kappa > 1:
        x0 = x0 / kappa
    t0 = A @ x0
    if problem.utility.family != "linear" and np.any(t0 <= 0):
        # marginal utility undefined at zero throughput: fall back to the
        # linear-utility value, which is strictly positive per usable resource
        return A.mean(axis=0)
    du = np.asarray(utilities.derivative(problem.utility, t0))
    if not np.all(np.isfinite(du)):
        return A.mean(axis=0)
    p1 = (du[:, None] * A).mean(axis=0)
    return np.maximum(p1, 0.0)


def subgradient_step(
    prices: np.ndarray, subgrad: np.ndarray, iter: int, step0: float
) -> np.ndarray:
    """Projected subgradient update with the diminishing schedule step0/iter."""
    return np.maximum(prices - (step0 / iter) * subgrad, 0.0)


class LbfgsHistory:
    """Curvature pairs for the limited-memory two-loop recursion."""

    def __init__(self, memory: int = 10):
        self.memory = memory
        self.s: List[np.ndarray] = []
        self.y: List[np.ndarray] = []

    def push(self, s: np.ndarray, y: np.ndarray) -> None:
        sy = float(s @ y)
        if sy <= _CURVATURE_SKIP * np.linalg.norm(s) * np.linalg.norm(y):
            return
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.memory:
            self.s.pop(0)
            self.y.pop(0)

    def clear(self) -> None:
        self.s.clear()
        self.y.clear()


def lbfgs_direction(history: LbfgsHistory, grad: np.ndarray) -> np.ndarray:
    """Two-loop recursion; normalized steepest descent when history is empty."""
    if not history.s:
        norm = np.linalg.norm(grad)
        return -grad / norm if norm > 0 else -grad
    q = grad.copy()
    alphas = []
    rhos = [1.0 / float(s @ y) for s, y in zip(history.s, history.y)]
    for s, y, rho in zip(reversed(history.s), reversed(history.y), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    s_last, y_last = history.s[-1], history.y[-1]
    q *= float(s_last @ y_last) / float(y_last @ y_last)
    for (s, y, rho), a in zip(zip(history.s, history.y, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_step(
    history: LbfgsHistory,
    prices: np.ndarray,
    grad: np.ndarray,
    g_value: float,
    g_eval: Callable[[np.ndarray], float],
) -> Tuple[np.ndarray, float]:
    """Projected backtracking line search along the two-loop direction.

    Raises LineSearchFailed when no trial satisfies sufficient decrease; the
    caller falls back to a subgradient step.
    """
    d = lbfgs_direction(history, grad)
    step = 1.0
    p_scale = 1.0 + float(np.max(np.abs(prices), initial=0.0))
    for _ in range(_LS_MAX_TRIALS):
        p_trial = np.maximum(prices + step * d, 0.0)
        dp = p_trial - prices
        if float(np.max(np.abs(dp), initial=0.0)) > 1e-13 * p_scale:
            # a vanishing move can pass the Armijo test through rounding
            # alone and freeze the loop at a kink of the dual
            g_trial = g_eval(p_trial)
            if g_trial <= g_value + _LS_DECREASE * float(grad @ dp):
                return p_trial, g_trial
        step *= 0.5
    raise LineSearchFailed("no sufficient decrease within trial budget")


def solve(
    problem: Problem,
    options: Optional[SolveOptions] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> SolveResult:
    """Run price discovery until the duality gap certifies the allocation."""
    validate(problem)
    opts = options or SolveOptions()
    tol = opts.tolerance if opts.tolerance is not None else 1e-3 * problem.n
    if opts.initial_prices is not None:
        p = np.maximum(np.asarray(opts.initial_prices, dtype=float), 0.0)
    else:
        p = initialize_prices(problem)
    step0 = opts.subgradient_step0  # resolved on first use when auto

    history = LbfgsHistory(memory=opts.memory)
    trace: List[IterationRecord] = []
    best = None  # (utility, X, prices, t, dual_value)
    prev: Optional[Tuple[np.ndarray, np.ndarray]] = None  # (p, grad) pending pair
    increases = 0
    last_g = np.inf
    pending: Optional[DualEval] = None
    converged = False
    g_floor = np.inf  # tightest dual bound seen, for stall detection
    stalled = 0
    lp_prices_tried = False
    milp_basic: Optional[tuple] = None  # one-shot cache, result may be None

    for k in range(1, opts.max_iters + 1):
        de = pending if pending is not None else evaluate_dual(problem, p)
        pending = None
        grad = de.subgradient  # gradient of the minimized dual: q = R - r
        if prev is not None:
            history.push(p - prev[0], grad - prev[1])
        stats_X = de.X_raw.X
        X_feas = make_feasible(problem, de.X_raw)
        t = throughputs(problem, X_feas)
        primal = total_utility(problem, t)
        if de.dual_value - primal > tol and problem.n <= _REPAIR_MAX_N:
            rep_raw = repair_overuse(problem, p, de.X_raw, de.net_utilities)
            rep_feas = make_feasible(problem, rep_raw)
            rep_t = throughputs(problem, rep_feas)
            rep_primal = total_utility(problem, rep_t)
            if rep_primal > primal:
                stats_X, X_feas, t, primal = rep_raw.X, rep_feas, rep_t, rep_primal
            fill_feas = backfill_slack(problem, X_feas)
            fill_t = throughputs(problem, fill_feas)
            fill_primal = total_utility(problem, fill_t)
            if fill_primal > primal:
                stats_X, X_feas, t, primal = fill_feas.X, fill_feas, fill_t, fill_primal
        if (
            de.dual_value - primal > tol
            and problem.n * problem.m <= _POLISH_MAX_ENTRIES
        ):
            t_hat = np.einsum("ij,ij->i", problem.efficiency, de.X_raw.X)
            pol = lp_polish(problem, t_hat)
            if pol is not None:
                pol_t = throughputs(problem, pol)
                pol_primal = total_utility(problem, pol_t)
                # prefer a basic variant of the vertex: rewriting its rows
                # onto <=2 resources can concede a little throughput, so it
                # is taken whenever it still certifies the tolerance
                basic = Allocation(X=pol.X.copy(), feasible=True)
                _basify_rows(problem, basic.X)
                basic = backfill_slack(problem, basic)
                basic_t = throughputs(problem, basic)
                basic_primal = total_utility(problem, basic_t)
                if de.dual_value - basic_primal > tol:
                    # the one-row-at-a-time rewrite could not certify; search
                    # the <=2-support allocations globally instead (the MILP
                    # is price-free, so one attempt serves every iteration)
                    if milp_basic is None:
                        milp_basic = (basic_milp_polish(problem),)
                    mil = milp_basic[0]
                    if mil is not None:
                        mil = backfill_slack(problem, mil)
                        mil_t = throughputs(problem, mil)
                        mil_primal = total_utility(problem, mil_t)
                        if np.isfinite(mil_primal) and mil_primal > basic_primal:
                            basic, basic_t, basic_primal = mil, mil_t, mil_primal
                if de.dual_value - basic_primal <= tol:
                    stats_X, X_feas, t, primal = basic.X, basic, basic_t, basic_primal
                elif pol_primal > max(primal, basic_primal):
                    stats_X, X_feas, t, primal = pol.X, pol, pol_t, pol_primal
                elif basic_primal > primal:
                    stats_X, X_feas, t, primal = basic.X, basic, basic_t, basic_primal
        gap = de.dual_value - primal
        rec = IterationRecord(
            iter=k,
            prices=p.copy(),
            usage=de.usage.copy(),
            dual_value=de.dual_value,
            primal_utility=primal,
            gap=gap,
        )
        trace.append(rec)
        if callback is not None:
            callback(rec)
        # support statistics come from the raw subproblem solutions: column
        # scaling shaves every row sum below 1 and would miscount slack
        nnz = (stats_X > NONZERO_TOL).sum(axis=1)
        slack = 1.0 - stats_X.sum(axis=1)
        stats = (
            float((nnz == 2).mean()) if problem.n else 0.0,
            float((slack > SLACK_TOL).mean()) if problem.n else 0.0,
        )
        if best is None or primal > best[0]:
            best = (primal, X_feas, p.copy(), t, de.dual_value, stats)
        if gap <= tol:
            # return the certified iterate itself so the allocation and the
            # prices form a matched optimal pair
            best = (primal, X_feas, p.copy(), t, de.dual_value, stats)
            converged = True
            break
        if de.dual_value < g_floor - 1e-9 * (1 + abs(g_floor)):
            g_floor = de.dual_value
            stalled = 0
        else:
            stalled += 1
        if (
            not lp_prices_tried
            and stalled >= 3
            and problem.n * problem.m <= _POLISH_MAX_ENTRIES
        ):
            # the dual of a piecewise-linear utility is polyhedral and the
            # updates can crawl at its kinks; jump to the exact prices
            lp_prices_tried = True
            p_lp = exact_lp_prices(problem)
            if p_lp is not None:
                ev = evaluate_dual(problem, p_lp)
                if ev.dual_value < de.dual_value:
                    pending = ev
                    p = p_lp
                    history.clear()
                    prev = None
                    continue
        if k == opts.max_iters:
            break

        increases = increases + 1 if de.dual_value > last_g else 0
        last_g = de.dual_value

        took_lbfgs = False
        if opts.update_rule == "lbfgs" and increases < 2:
            cache = {}

            def g_eval(pp, _cache=cache):
                ev = evaluate_dual(problem, pp)
                _cache[pp.tobytes()] = ev
                return ev.dual_value

            try:
                p_next, _ = lbfgs_step(history, p, grad, de.dual_value, g_eval)
                pending = cache.get(p_next.tobytes())
                prev = (p.copy(), grad)
                p = p_next
                took_lbfgs = True
            except LineSearchFailed:
                pass
        if not took_lbfgs:
            qnorm2 = float(grad @ grad)
            target = best[0]
            if (
                opts.update_rule == "lbfgs"
                and qnorm2 > 0
                and de.dual_value > target
            ):
                # the line search fails exactly where the dual is kinked
                # (piecewise-linear utilities); a Polyak step toward the best
                # primal value keeps making progress there
                alpha = (de.dual_value - target) / qnorm2
                pmax = max(float(np.max(np.abs(p))) if p.size else 0.0, 1.0)
                qmax = float(np.max(np.abs(grad)))
                if qmax > 0:
                    alpha = min(alpha, pmax / qmax)
                p = np.maximum(p - alpha * grad, 0.0)
            else:
                if step0 is None:
                    # auto: move prices by about a tenth of their own scale,
                    # whatever the magnitude of the subgradient
                    pmax = float(np.max(np.abs(p))) if p.size else 0.0
                    qmax = float(np.max(np.abs(de.subgradient)))
                    step0 = (pmax / 10.0 if pmax > 0 else 0.1) / max(qmax, 1e-30)
                p = subgradient_step(p, de.subgradient, k, step0)
            history.clear()
            prev = None
            increases = 0

    primal, X_feas, p_best, t, dual_best, stats = best
    # report against the tightest dual bound seen
    dual_final = min(r.dual_value for r in trace)
    return SolveResult(
        X_feasible=X_feas,
        prices=p_best,
        throughputs=t,
        primal_utility=primal,
        dual_value=dual_final,
        trace=trace,
        converged=converged,
        frac_two_resources=stats[0],
        frac_positive_slack=stats[1],
    )
