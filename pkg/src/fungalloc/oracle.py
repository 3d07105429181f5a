"""Independent reference solvers for certifying results at desk scale.

Deliberately shares no code with the production kernel: the cost function is
rebuilt by brute-force enumeration of all m(m+1)/2 restricted segments, the
subproblem is maximized on a dense grid, and the full problem is solved by
spectral projected gradient ascent with Dykstra projections for smooth
utilities, or an exact linear program for the piecewise-linear families.
Agreement with the fast path is evidence, not tautology.
"""

from dataclasses import dataclass

import numpy as np

from . import utilities
from .errors import ProjectionNotConverged
from .model import Allocation, Problem, UtilitySpec, resource_usage, throughputs, total_utility
from .subproblem import solve_all_subproblems

_DYKSTRA_TOL = 1e-9
_DYKSTRA_SWEEPS = 200
_GRAD_EPS = 1e-12


def brute_force_cost(a: np.ndarray, prices: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """c(t) as the pointwise minimum over every restricted affine segment."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(prices, dtype=float)
    ts = np.asarray(ts, dtype=float)
    m = a.shape[0]
    av = np.concatenate([[0.0], a])
    pv = np.concatenate([[0.0], p])
    best = np.full(ts.shape, np.inf)
    for i in range(m + 1):
        for j in range(m + 1):
            if i == j or av[j] <= av[i]:
                continue
            inside = (ts >= av[i]) & (ts <= av[j])
            seg = pv[i] + (pv[j] - pv[i]) * (ts - av[i]) / (av[j] - av[i])
            best = np.where(inside, np.minimum(best, seg), best)
    return best


def subproblem_grid_oracle(
    spec: UtilitySpec,
    job: int,
    a: np.ndarray,
    prices: np.ndarray,
    grid_points: int = 100_000,
):
    """Grid argmax of u(t) - c(t) on [0, max a], with brute-force c."""
    a = np.asarray(a, dtype=float)
    a_max = float(a.max())
    if a_max == 0:
        u0 = float(utilities.evaluate(spec, 0.0, job=job))
        return 0.0, u0
    ts = np.linspace(0.0, a_max, grid_points)
    cost = brute_force_cost(a, prices, ts)
    if spec.family == "target_priority":
        w = float(spec.weights[job])
        td = float(spec.targets[job])
        vals = w * np.minimum(ts - td, 0.0) - cost
    else:
        with np.errstate(invalid="ignore"):
            vals = np.asarray(utilities.evaluate(spec, ts)) - cost
    k = int(np.nanargmax(vals))
    return float(ts[k]), float(vals[k])


def _project_rows(X: np.ndarray) -> np.ndarray:
    """Per-row projection onto {x >= 0, sum(x) <= 1}."""
    Y = np.maximum(X, 0.0)
    over = Y.sum(axis=1) > 1.0
    if over.any():
        Y[over] = _simplex_project(X[over])
    return Y


def _simplex_project(V: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the simplex {x >= 0, sum(x) = 1}."""
    U = np.sort(V, axis=1)[:, ::-1]
    css = np.cumsum(U, axis=1) - 1.0
    ks = np.arange(1, V.shape[1] + 1)
    cond = U - css / ks > 0
    rho = cond.sum(axis=1)
    theta = css[np.arange(V.shape[0]), rho - 1] / rho
    return np.maximum(V - theta[:, None], 0.0)


def _project_usage(X: np.ndarray, d: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Per-column projection onto the halfspaces {d . col <= R_j}."""
    r = d @ X
    over = r > R
    if not over.any():
        return X
    Y = X.copy()
    corr = (r - R) / float(d @ d)
    Y[:, over] -= np.outer(d, corr[over])
    return Y


def project_feasible(
    X: np.ndarray, problem: Problem, max_sweeps: int = _DYKSTRA_SWEEPS
) -> np.ndarray:
    """Dykstra's alternating projection onto the feasible set."""
    d = problem.demands_or_ones()
    R = problem.limits
    P = np.zeros_like(X)
    Q = np.zeros_like(X)
    Y = X
    for _ in range(max_sweeps):
        Y1 = _project_rows(Y + P)
        P = Y + P - Y1
        Y2 = _project_usage(Y1 + Q, d, R)
        Q = Y1 + Q - Y2
        if np.abs(Y2 - Y).max() < _DYKSTRA_TOL:
            Y = Y2
            break
        Y = Y2
    viol = max(
        float(np.maximum(-Y, 0).max(initial=0.0)),
        float(np.maximum(Y.sum(axis=1) - 1, 0).max(initial=0.0)),
        float(np.maximum(d @ Y - R, 0).max(initial=0.0)),
    )
    if viol > 1e-6 * (1 + float(R.max())):
        raise ProjectionNotConverged(f"residual violation {viol:.2e}")
    return Y


def _safe_utility(problem: Problem, X: np.ndarray) -> float:
    t = np.einsum("ij,ij->i", problem.efficiency, X)
    with np.errstate(invalid="ignore"):
        vals = np.asarray(utilities.evaluate(problem.utility, np.maximum(t, 0.0)))
    return float(vals.sum())


def _lp_primal_oracle(problem: Problem):
    """Exact maximizer for the piecewise-linear families via a single LP.

    Linear utility maximizes sum a_i.x_i directly. Target-priority introduces
    one shortfall variable per job: u_i = -w_i s_i with s_i >= td_i - a_i.x_i.
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
        obj = -A.ravel()
        A_ub = sparse.vstack([rows_time, cols], format="csr")
        b_ub = np.concatenate([np.ones(n), problem.limits])
    else:  # target_priority: extra columns hold the per-job shortfalls
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
    res = linprog(obj, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if not res.success:
        raise ProjectionNotConverged(f"reference LP failed: {res.message}")
    X = np.maximum(res.x[: n * m].reshape(n, m), 0.0)
    return X, _safe_utility(problem, X)


def primal_oracle(problem: Problem, iters: int = 600):
    """Reference solution of the full problem at desk scale (n <= ~50).

    Piecewise-linear families are solved exactly as a linear program; the
    strictly concave families use spectral projected gradient ascent.
    Returns a feasible allocation and its utility.
    """
    if problem.utility.family in ("linear", "target_priority"):
        return _lp_primal_oracle(problem)
    A = problem.efficiency
    n, m = A.shape
    # interior start: spread each job thinly, then force feasibility
    X = np.full((n, m), 0.5 / m)
    X = np.where(A > 0, X, 0.0)
    d = problem.demands_or_ones()
    r = d @ X
    scale = np.where(r > 0, np.minimum(1.0, problem.limits / r), 1.0)
    X = X * scale

    f_hist = [_safe_utility(problem, X)]
    lam = 1.0
    X_best, f_best = X.copy(), f_hist[0]
    stall = 0
    restarts = 0
    window = 10  # GLL nonmonotone window; shrinks to monotone after a restart
    for _ in range(iters):
        t = np.einsum("ij,ij->i", A, X)
        # derivatives of the concave families blow up at zero throughput even
        # when the value stays finite (e.g. alpha < 1); clamp for the gradient
        t = np.maximum(t, _GRAD_EPS)
        du = np.asarray(utilities.derivative(problem.utility, t))
        G = du[:, None] * A
        step = lam
        accepted = False
        f_ref = min(f_hist[-window:])  # GLL nonmonotone reference
        for _ in range(30):
            try:
                X_new = project_feasible(X + step * G, problem)
            except ProjectionNotConverged:
                # trial point too far out for the sweep budget: shrink
                step *= 0.5
                continue
            dX = X_new - X
            if float(np.abs(dX).max()) <= 1e-13 * (1 + float(np.abs(X).max())):
                # the projection collapsed the trial point back onto X;
                # accepting it would stall the ascent at the start point
                step *= 0.5
                continue
            gain = max(float((G * dX).sum()), 0.0)
            f_new = _safe_utility(problem, X_new)
            if np.isfinite(f_new) and f_new >= f_ref + 1e-4 * gain:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        # Barzilai-Borwein step for the next iterate
        t_new = np.maximum(np.einsum("ij,ij->i", A, X_new), _GRAD_EPS)
        G_new = np.asarray(utilities.derivative(problem.utility, t_new))[:, None] * A
        sTy = float((dX * (G - G_new)).sum())
        sTs = float((dX * dX).sum())
        lam = sTs / sTy if sTy > 1e-14 else 1.0
        lam = float(np.clip(lam, 1e-8, 1e4))
        X = X_new
        f_hist.append(f_new)
        if f_new > f_best + 1e-10 * (1 + abs(f_best)):
            stall = 0
        else:
            stall += 1
        if f_new > f_best:
            X_best, f_best = X.copy(), f_new
        if sTs < 1e-20:
            break
        if stall >= 30:
            # an oversized nonmonotone step can dip below the best point and
            # leave the ascent crawling back; resume from the best iterate
            # with a monotone search instead of giving up there
            if restarts >= 3:
                break
            restarts += 1
            window = 1
            X = X_best.copy()
            f_hist = [f_best]
            lam = 1.0
            stall = 0
    return X_best, f_best


@dataclass
class KktReport:
    primal_feasibility: float
    stationarity: float
    complementary_slackness: float
    passed: bool


def check_kkt(
    problem: Problem, X: np.ndarray, prices: np.ndarray, tol: float
) -> KktReport:
    """Certify (feasibility, per-job optimality at prices, comp. slackness)."""
    X = np.asarray(X, dtype=float)
    prices = np.asarray(prices, dtype=float)
    alloc = Allocation(X=X)
    R = problem.limits
    d = problem.demands_or_ones()
    r = resource_usage(problem, alloc)
    feas = max(
        float(np.maximum(-X, 0).max(initial=0.0)),
        float(np.maximum(X.sum(axis=1) - 1, 0).max(initial=0.0)),
        float(np.maximum(r - R, 0).max(initial=0.0)),
    )
    # per-job optimality of the net utility at the given prices
    _, opt_net = solve_all_subproblems(problem, prices)
    t = throughputs(problem, alloc)
    with np.errstate(invalid="ignore"):
        u = np.asarray(utilities.evaluate(problem.utility, t))
    net = u - (d * (X @ prices))
    stationarity = float(np.max(opt_net - net, initial=0.0))
    comp = float(np.max(np.abs(prices * (R - r)), initial=0.0))

    scale_feas = tol * (1 + float(R.max()))
    scale_comp = tol * (1 + float(np.linalg.norm(prices) * np.linalg.norm(R)))
    passed = (
        feas <= scale_feas and stationarity <= tol and comp <= scale_comp
    )
    return KktReport(
        primal_feasibility=feas,
        stationarity=stationarity,
        complementary_slackness=comp,
        passed=bool(passed),
    )
