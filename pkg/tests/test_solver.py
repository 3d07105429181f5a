"""Dual evaluation, price updates, and the end-to-end solve loop."""

import numpy as np
import pytest

from fungalloc.model import (
    Allocation,
    Problem,
    UtilitySpec,
    check_feasible,
    resource_usage,
    throughputs,
    total_utility,
)
from fungalloc.solver import (
    LbfgsHistory,
    SolveOptions,
    basic_milp_polish,
    evaluate_dual,
    initialize_prices,
    lbfgs_direction,
    make_feasible,
    solve,
    subgradient_step,
)

from helpers import random_problem


# ---------------------------------------------------------------- dual


def test_dual_empty_problem():
    prob = Problem(
        efficiency=np.zeros((0, 2)),
        limits=np.array([1.0, 2.0]),
        utility=UtilitySpec("linear"),
    )
    de = evaluate_dual(prob, np.array([0.5, 0.5]))
    assert de.dual_value == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)
    assert np.allclose(de.subgradient, [1.0, 2.0])


def test_dual_at_zero_prices_linear():
    rng = np.random.default_rng(7)
    prob = random_problem(rng, family="linear", n=8, m=3)
    de = evaluate_dual(prob, np.zeros(3))
    assert de.dual_value == pytest.approx(prob.efficiency.max(axis=1).sum())
    counts = np.zeros(3)
    for row in prob.efficiency:
        counts[row.argmax()] += 1
    assert np.allclose(de.subgradient, prob.limits - counts)


def test_weak_duality_against_random_feasible_points(rng):
    prob = random_problem(rng, family="log", n=3, m=2)
    prices = rng.uniform(0.0, 2.0, 2)
    de = evaluate_dual(prob, prices)
    for _ in range(100):
        X = rng.uniform(0.0, 1.0, (3, 2))
        X = X / np.maximum(X.sum(axis=1, keepdims=True), 1.0)
        r = X.sum(axis=0)
        X = X * np.minimum(1.0, prob.limits / np.maximum(r, 1e-12))
        t = np.maximum(np.einsum("ij,ij->i", prob.efficiency, X), 1e-9)
        assert total_utility(prob, t) <= de.dual_value + 1e-9


# -------------------------------------------------------- make_feasible


def test_make_feasible_noop_when_already_feasible():
    prob = Problem(
        efficiency=np.ones((2, 2)), limits=np.ones(2), utility=UtilitySpec("linear")
    )
    X = np.full((2, 2), 0.25)
    out = make_feasible(prob, Allocation(X=X))
    assert np.array_equal(out.X, X)


def test_make_feasible_halves_single_overused_job():
    prob = Problem(
        efficiency=np.array([[1.0]]),
        limits=np.array([1.0]),
        utility=UtilitySpec("linear"),
        demands=np.array([2.0]),
    )
    out = make_feasible(prob, Allocation(X=np.array([[1.0]])))
    assert out.X[0, 0] == pytest.approx(0.5)


def test_make_feasible_random_instances(rng):
    for _ in range(20):
        prob = random_problem(rng, family="linear")
        X = rng.uniform(0.0, 1.0, (prob.n, prob.m))
        X = X / np.maximum(X.sum(axis=1, keepdims=True), 1.0)
        out = make_feasible(prob, Allocation(X=X))
        assert check_feasible(prob, out)
        assert np.all(out.X.sum(axis=1) <= 1 + 1e-12)


# --------------------------------------------------- initialize_prices


def test_initial_prices_linear_are_column_means(rng):
    prob = random_problem(rng, family="linear", n=10, m=3)
    p1 = initialize_prices(prob)
    assert np.allclose(p1, prob.efficiency.mean(axis=0))


def test_initial_prices_single_job_example():
    prob = Problem(
        efficiency=np.array([[2.0]]), limits=np.array([0.5]), utility=UtilitySpec("log")
    )
    # x0 = 0.5, t = 1, u'(1) = 1, so p1 = 2
    assert initialize_prices(prob) == pytest.approx([2.0])


def test_initial_prices_rescales_overfull_uniform_point():
    prob = Problem(
        efficiency=np.array([[1.0, 1.0]]),
        limits=np.array([1.0, 1.0]),
        utility=UtilitySpec("log"),
    )
    # x0 = R/n = (1,1) sums to 2 > 1, so it is rescaled to (0.5, 0.5): t = 1
    assert np.allclose(initialize_prices(prob), [1.0, 1.0])


# --------------------------------------------------- price update rules


def test_subgradient_step_zero_subgradient_is_noop():
    p = np.array([1.0, 2.0])
    out = subgradient_step(p, np.zeros(2), iter=3, step0=1.0)
    assert np.array_equal(out, p)


def test_subgradient_step_projects_at_zero():
    out = subgradient_step(np.array([1.0]), np.array([2.0]), iter=1, step0=1.0)
    assert out[0] == 0.0


def test_subgradient_step_raises_price_of_overused_resource():
    # overused resource: usage above limit means q = R - r < 0
    out = subgradient_step(np.array([1.0]), np.array([-2.0]), iter=1, step0=0.1)
    assert out[0] > 1.0


def test_lbfgs_direction_empty_history_is_normalized_steepest_descent():
    grad = np.array([3.0, 4.0])
    d = lbfgs_direction(LbfgsHistory(), grad)
    assert np.allclose(d, -grad / 5.0)


def test_lbfgs_history_skips_degenerate_pair():
    hist = LbfgsHistory()
    hist.push(np.array([1.0, 0.0]), np.array([0.0, 0.0]))  # y = 0: skipped
    assert len(hist.s) == 0
    grad = np.array([1.0, 1.0])
    d = lbfgs_direction(hist, grad)
    assert np.allclose(d, -grad / np.linalg.norm(grad))


def test_lbfgs_minimizes_quadratic_quickly():
    p_star = np.array([3.0, -1.0, 2.0])
    H = np.diag([1.0, 4.0, 0.5])

    def g(p):
        return 0.5 * float((p - p_star) @ H @ (p - p_star))

    def grad(p):
        return H @ (p - p_star)

    hist = LbfgsHistory()
    p = np.zeros(3)
    prev = None
    for _ in range(30):
        gr = grad(p)
        if prev is not None:
            hist.push(p - prev[0], gr - prev[1])
        d = lbfgs_direction(hist, gr)
        step = 1.0
        while g(p + step * d) > g(p) + 1e-4 * step * float(gr @ d):
            step *= 0.5
        prev = (p.copy(), gr)
        p = p + step * d
        if np.linalg.norm(p - p_star) < 1e-6:
            break
    assert np.linalg.norm(p - p_star) < 1e-6


# --------------------------------------------------------------- solve


def test_solve_one_dimensional_kkt_instance():
    prob = Problem(
        efficiency=np.array([[1.0]]), limits=np.array([1.0]), utility=UtilitySpec("log")
    )
    res = solve(prob, SolveOptions(tolerance=1e-6, max_iters=200))
    assert res.converged
    assert res.throughputs[0] == pytest.approx(1.0, abs=1e-3)
    assert res.prices[0] == pytest.approx(1.0, abs=1e-2)
    assert res.gap <= 1e-6


def test_solve_abundant_resources_gives_max_throughput(rng):
    prob = random_problem(rng, family="log", n=10, m=3, scarcity=0.0)
    prob = Problem(
        efficiency=prob.efficiency,
        limits=np.full(3, 20.0),  # more than one unit of every resource per job
        utility=UtilitySpec("log"),
    )
    res = solve(prob)
    assert res.converged
    assert np.allclose(res.throughputs, prob.efficiency.max(axis=1), rtol=1e-6)
    assert np.all(res.prices <= 1e-6)


def test_duality_sandwich_on_every_iteration(rng):
    for fam, kw in [("log", {}), ("linear", {}), ("power", {"rho": -1.0})]:
        prob = random_problem(rng, family=fam, **kw)
        res = solve(prob, SolveOptions(max_iters=60))
        for rec in res.trace:
            assert rec.primal_utility <= rec.dual_value + 1e-9 * (
                1 + abs(rec.dual_value)
            )


def test_solve_returns_feasible_allocation(rng):
    for _ in range(10):
        prob = random_problem(rng)
        res = solve(prob, SolveOptions(max_iters=100))
        assert check_feasible(prob, res.X_feasible)
        assert np.all(resource_usage(prob, res.X_feasible) <= prob.limits * (1 + 1e-9))


def test_update_rules_agree(rng):
    prob = random_problem(rng, family="log", n=15, m=3)
    tol = 1e-3 * prob.n
    res_l = solve(prob, SolveOptions(tolerance=tol, max_iters=300, update_rule="lbfgs"))
    res_s = solve(
        prob, SolveOptions(tolerance=tol, max_iters=3000, update_rule="subgradient")
    )
    assert abs(res_l.primal_utility - res_s.primal_utility) <= 1e-3 * prob.n


def test_finite_difference_gradient_matches_subgradient(rng):
    # smooth region: strictly concave utility, generic prices
    checked = 0
    while checked < 50:
        prob = random_problem(rng, family="log", n=12, m=3)
        prices = rng.uniform(0.3, 2.0, 3)
        de = evaluate_dual(prob, prices)
        h = 1e-6
        fd = np.zeros(3)
        smooth = True
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            gp = evaluate_dual(prob, prices + e)
            gm = evaluate_dual(prob, prices - e)
            fd[j] = (gp.dual_value - gm.dual_value) / (2 * h)
            # skip points where the usage pattern changes across the stencil
            if not np.allclose(gp.subgradient, gm.subgradient, atol=1e-3):
                smooth = False
        if not smooth:
            continue
        assert np.allclose(fd, de.subgradient, rtol=1e-4, atol=1e-4)
        checked += 1


def test_trace_records_are_consistent(rng):
    prob = random_problem(rng, family="log", n=10, m=2)
    seen = []
    res = solve(prob, SolveOptions(max_iters=50), callback=seen.append)
    assert len(seen) == len(res.trace)
    for rec in res.trace:
        assert rec.gap == rec.dual_value - rec.primal_utility
        assert rec.prices.shape == (2,)
        assert rec.usage.shape == (2,)
    assert res.dual_value == min(r.dual_value for r in res.trace)


def test_basic_milp_polish_feasible_two_support(rng):
    for family, kwargs in [("log", {}), ("power", {"rho": 0.5}), ("linear", {})]:
        prob = random_problem(rng, family=family, n=8, m=3, **kwargs)
        alloc = basic_milp_polish(prob)
        assert alloc is not None
        assert check_feasible(prob, alloc)
        assert int((alloc.X > 1e-7).sum(axis=1).max(initial=0)) <= 2


def test_basic_milp_polish_dominates_basic_solve_result(rng):
    # the MILP optimizes over every allocation with <=2 supports per row, so
    # whenever the solver's own answer has that shape it cannot beat the MILP
    for _ in range(5):
        prob = random_problem(rng, family="log", n=6, m=3)
        res = solve(prob)
        if int((res.X_feasible.X > 1e-7).sum(axis=1).max(initial=0)) > 2:
            continue
        alloc = basic_milp_polish(prob)
        milp_utility = total_utility(prob, throughputs(prob, alloc))
        assert milp_utility >= res.primal_utility - 1e-4 * (1 + abs(res.primal_utility))


def test_basic_milp_polish_declines_oversized_instances():
    prob = Problem(
        efficiency=np.full((600, 2), 0.5),
        limits=np.array([10.0, 10.0]),
        utility=UtilitySpec("log"),
    )
    assert basic_milp_polish(prob) is None
