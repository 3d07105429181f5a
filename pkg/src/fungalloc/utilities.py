"""The five utility families: evaluation, derivatives, and inverses.

Every function accepts scalars or numpy arrays of throughputs. For the
target-priority family the per-job weight/target is selected either by an
explicit job index or, when ``job`` is None, by aligning the input with the
full job axis.
"""

from typing import Optional, Union

import numpy as np

from .errors import DomainViolation, NotStrictlyConcave, UnsupportedFamily
from .model import UtilitySpec

ArrayLike = Union[float, np.ndarray]


def _tp_params(spec: UtilitySpec, job: Optional[int], t: np.ndarray):
    if job is not None:
        return float(spec.weights[job]), float(spec.targets[job])
    if np.ndim(t) >= 1 and np.shape(t)[0] == spec.weights.shape[0]:
        w = spec.weights
        td = spec.targets
        # broadcast along trailing axes (e.g. a grid of t per job)
        extra = np.ndim(t) - 1
        if extra:
            w = w.reshape(w.shape + (1,) * extra)
            td = td.reshape(td.shape + (1,) * extra)
        return w, td
    raise DomainViolation("target_priority needs a job index or job-aligned input")


def evaluate(spec: UtilitySpec, t: ArrayLike, job: Optional[int] = None) -> ArrayLike:
    """u(t). Returns -inf (not an error) where u is unbounded below at t=0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainViolation("throughput must be nonnegative")
    fam = spec.family
    if fam == "linear":
        out = t.copy()
    elif fam == "log" or (fam == "alpha_fair" and spec.alpha == 1):
        with np.errstate(divide="ignore"):
            out = np.log(t)
    elif fam == "alpha_fair":
        a = spec.alpha
        if a == 0:
            out = t.copy()
        else:
            with np.errstate(divide="ignore"):
                out = t ** (1 - a) / (1 - a)
    elif fam == "power":
        rho = spec.rho
        if rho > 0:
            out = t**rho
        else:
            with np.errstate(divide="ignore"):
                out = -(t**rho)
    elif fam == "target_priority":
        w, td = _tp_params(spec, job, t)
        out = w * np.minimum(t - td, 0.0)
    else:  # pragma: no cover - rejected at construction
        raise UnsupportedFamily(fam)
    return out if out.ndim else float(out)


def derivative(spec: UtilitySpec, t: ArrayLike, job: Optional[int] = None) -> ArrayLike:
    """u'(t); the midpoint supergradient w/2 at the target-priority kink."""
    t = np.asarray(t, dtype=float)
    fam = spec.family
    if fam == "linear":
        out = np.ones_like(t)
    elif fam == "log" or (fam == "alpha_fair" and spec.alpha == 1):
        if np.any(t <= 0):
            raise DomainViolation("log derivative needs t > 0")
        out = 1.0 / t
    elif fam == "alpha_fair":
        a = spec.alpha
        if a == 0:
            out = np.ones_like(t)
        else:
            if np.any(t <= 0):
                raise DomainViolation("alpha_fair derivative needs t > 0")
            out = t ** (-a)
    elif fam == "power":
        rho = spec.rho
        if np.any(t <= 0) and rho != 1:
            raise DomainViolation("power derivative needs t > 0")
        out = abs(rho) * t ** (rho - 1)
    elif fam == "target_priority":
        w, td = _tp_params(spec, job, t)
        out = np.where(t < td, w, np.where(t > td, 0.0, w / 2.0)) + np.zeros_like(t)
    else:  # pragma: no cover
        raise UnsupportedFamily(fam)
    return out if out.ndim else float(out)


def inverse_derivative(
    spec: UtilitySpec, s: ArrayLike, job: Optional[int] = None
) -> ArrayLike:
    """The unique t with u'(t) = s, for strictly concave families."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise DomainViolation("marginal utility must be positive")
    fam = spec.family
    if fam == "log" or (fam == "alpha_fair" and spec.alpha == 1):
        out = 1.0 / s
    elif fam == "alpha_fair":
        if spec.alpha == 0:
            raise NotStrictlyConcave("alpha=0 is linear")
        out = s ** (-1.0 / spec.alpha)
    elif fam == "power":
        rho = spec.rho
        if rho == 1:
            raise NotStrictlyConcave("rho=1 is linear")
        out = (s / abs(rho)) ** (1.0 / (rho - 1.0))
    else:
        raise NotStrictlyConcave(f"{fam} has no invertible derivative")
    return out if out.ndim else float(out)


def inverse_value(spec: UtilitySpec, y: float) -> float:
    """u^{-1}(y) for families with identical, invertible u across jobs."""
    fam = spec.family
    if fam == "linear":
        return float(y)
    if fam == "log" or (fam == "alpha_fair" and spec.alpha == 1):
        return float(np.exp(y))
    if fam == "alpha_fair":
        a = spec.alpha
        if a == 0:
            return float(y)
        return float(((1 - a) * y) ** (1.0 / (1 - a)))
    if fam == "power":
        rho = spec.rho
        if rho > 0:
            if y < 0:
                raise DomainViolation("power utility with rho > 0 is nonnegative")
            return float(y ** (1.0 / rho))
        if y >= 0:
            raise DomainViolation("power utility with rho < 0 is negative")
        return float((-y) ** (1.0 / rho))
    raise DomainViolation(f"{fam} utility is not invertible")
