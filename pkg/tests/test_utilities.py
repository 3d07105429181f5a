"""Utility families: values, derivatives, and inverses."""

import numpy as np
import pytest

from fungalloc.errors import DomainViolation, NotStrictlyConcave
from fungalloc.model import UtilitySpec
from fungalloc.utilities import (
    derivative,
    evaluate,
    inverse_derivative,
    inverse_value,
)


def tp_spec(w, td, n=1):
    return UtilitySpec(
        "target_priority", weights=np.full(n, float(w)), targets=np.full(n, float(td))
    )


def test_linear_value():
    assert evaluate(UtilitySpec("linear"), 3.5) == pytest.approx(3.5)


def test_target_priority_zero_at_or_above_target():
    spec = tp_spec(2.0, 1.0)
    assert evaluate(spec, 1.5, job=0) == 0.0
    assert evaluate(spec, 1.0, job=0) == 0.0
    assert evaluate(spec, 0.5, job=0) == pytest.approx(-1.0)


def test_alpha_fair_value():
    spec = UtilitySpec("alpha_fair", alpha=2.0)
    assert evaluate(spec, 2.0) == pytest.approx(-0.5)


def test_alpha_one_is_log_and_alpha_zero_is_linear():
    assert evaluate(UtilitySpec("alpha_fair", alpha=1.0), 2.0) == pytest.approx(
        np.log(2.0)
    )
    assert evaluate(UtilitySpec("alpha_fair", alpha=0.0), 2.0) == pytest.approx(2.0)


def test_log_unbounded_below_returns_minus_inf():
    assert evaluate(UtilitySpec("log"), 0.0) == -np.inf


def test_negative_throughput_rejected():
    with pytest.raises(DomainViolation):
        evaluate(UtilitySpec("log"), -0.1)


def test_derivatives_match_reference_values():
    assert derivative(UtilitySpec("log"), 2.0) == pytest.approx(0.5)
    assert derivative(UtilitySpec("linear"), 17.0) == pytest.approx(1.0)
    assert derivative(UtilitySpec("power", rho=-1.0), 2.0) == pytest.approx(0.25)


def test_target_priority_derivative_cases():
    spec = tp_spec(2.0, 0.5)
    assert derivative(spec, 0.3, job=0) == pytest.approx(2.0)
    assert derivative(spec, 0.7, job=0) == pytest.approx(0.0)
    # supergradient midpoint at the kink
    assert derivative(spec, 0.5, job=0) == pytest.approx(1.0)


def test_derivative_nonincreasing(rng):
    specs = [
        UtilitySpec("log"),
        UtilitySpec("alpha_fair", alpha=0.5),
        UtilitySpec("alpha_fair", alpha=2.0),
        UtilitySpec("power", rho=0.5),
        UtilitySpec("power", rho=-1.0),
        UtilitySpec("linear"),
    ]
    t = np.sort(rng.uniform(0.01, 5.0, 100))
    for spec in specs:
        du = np.asarray(derivative(spec, t))
        assert np.all(np.diff(du) <= 1e-12), spec.family


def test_inverse_derivative_reference_values():
    assert inverse_derivative(UtilitySpec("log"), 0.5) == pytest.approx(2.0)
    assert inverse_derivative(UtilitySpec("alpha_fair", alpha=2.0), 4.0) == pytest.approx(0.5)
    assert inverse_derivative(UtilitySpec("power", rho=0.5), 1.0) == pytest.approx(0.25)


def test_inverse_derivative_power_matches_bisection(rng):
    spec = UtilitySpec("power", rho=0.5)
    for s in rng.uniform(0.2, 5.0, 20):
        t = inverse_derivative(spec, s)
        lo, hi = 1e-12, 1e12
        for _ in range(200):
            mid = np.sqrt(lo * hi)
            if derivative(spec, mid) > s:
                lo = mid
            else:
                hi = mid
        assert t == pytest.approx(lo, rel=1e-6)


def test_inverse_derivative_roundtrip(rng):
    for spec in [
        UtilitySpec("log"),
        UtilitySpec("alpha_fair", alpha=0.5),
        UtilitySpec("alpha_fair", alpha=2.0),
        UtilitySpec("power", rho=0.5),
        UtilitySpec("power", rho=-1.0),
    ]:
        s = rng.uniform(0.1, 4.0, 50)
        t = np.asarray(inverse_derivative(spec, s))
        assert np.allclose(np.asarray(derivative(spec, t)), s, rtol=1e-10)


def test_inverse_derivative_rejects_non_strictly_concave():
    with pytest.raises(NotStrictlyConcave):
        inverse_derivative(UtilitySpec("linear"), 1.0)
    with pytest.raises(NotStrictlyConcave):
        inverse_derivative(tp_spec(1.0, 1.0), 1.0)


def test_inverse_value_roundtrip(rng):
    for spec in [
        UtilitySpec("linear"),
        UtilitySpec("log"),
        UtilitySpec("alpha_fair", alpha=0.5),
        UtilitySpec("alpha_fair", alpha=2.0),
        UtilitySpec("power", rho=0.5),
        UtilitySpec("power", rho=-1.0),
    ]:
        for t in rng.uniform(0.1, 5.0, 20):
            y = evaluate(spec, t)
            assert inverse_value(spec, y) == pytest.approx(t, rel=1e-10)


def test_target_priority_job_aligned_arrays():
    spec = tp_spec(2.0, 0.5, n=3)
    t = np.array([0.2, 0.5, 0.9])
    vals = evaluate(spec, t)
    assert np.allclose(vals, [2.0 * (0.2 - 0.5), 0.0, 0.0])
    with pytest.raises(DomainViolation):
        evaluate(spec, np.array([0.2, 0.5]))  # neither job index nor aligned
