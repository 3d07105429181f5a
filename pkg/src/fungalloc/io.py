"""Problem file formats and synthetic instance generators.

A problem on disk is a small key-value manifest plus a matrix file. Matrices
are row-major little-endian float64 (``.f64``) for scale, or plain CSV for
human-sized instances. Generation uses the counter-based Philox generator so
the same seed produces byte-identical files on any platform.
"""

import os
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import DimensionMismatch, ParseError, UnsupportedFamily
from .model import Problem, UtilitySpec, validate

FORMAT_VERSION = 1

# Column distributions of the reference experiment family: four resources,
# the more efficient ones scarcer.
MEDIUM_RANGES = ((0.1, 0.3), (0.1, 0.5), (0.3, 0.8), (0.6, 1.0))
MEDIUM_LIMITS_PER_JOB = (0.8, 0.1, 0.01, 0.001)


def write_matrix(path: str, M: np.ndarray) -> None:
    M = np.ascontiguousarray(M, dtype="<f8")
    if path.endswith(".csv"):
        np.savetxt(path, M, delimiter=",", fmt="%.17g")
    else:
        M.tofile(path)


def read_matrix(path: str, n: int, m: int) -> np.ndarray:
    if path.endswith(".csv"):
        M = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
        if M.shape != (n, m):
            raise ParseError(f"{path}: expected shape ({n}, {m}), got {M.shape}")
        return M
    size = os.path.getsize(path)
    if size != n * m * 8:
        raise ParseError(
            f"{path}: expected {n * m * 8} bytes for a {n}x{m} float64 "
            f"matrix, found {size}"
        )
    return np.fromfile(path, dtype="<f8").reshape(n, m)


def read_vector(path: str, n: int) -> np.ndarray:
    v = read_matrix(path, n, 1) if not path.endswith(".csv") else None
    if v is None:
        v = np.loadtxt(path, delimiter=",", dtype=float, ndmin=1)
        if v.shape != (n,):
            raise ParseError(f"{path}: expected {n} values, got {v.shape}")
        return v
    return v.reshape(n)


@dataclass
class ProblemManifest:
    n: int
    m: int
    matrix_path: str
    limits: np.ndarray
    utility_family: str
    demands_path: Optional[str] = None
    alpha: Optional[float] = None
    rho: Optional[float] = None
    weights_path: Optional[str] = None
    targets_path: Optional[str] = None
    format_version: int = FORMAT_VERSION


def _parse_kv(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_manifest(path: str) -> ProblemManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            kv = _parse_kv(fh.read())
        version = int(kv.get("format_version", "0"))
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported format_version {version}")
        limits = np.array([float(x) for x in kv["limits"].split(",")])
        mani = ProblemManifest(
            n=int(kv["n"]),
            m=int(kv["m"]),
            matrix_path=kv["matrix"],
            limits=limits,
            utility_family=kv["utility"],
            demands_path=kv.get("demands"),
            alpha=float(kv["alpha"]) if "alpha" in kv else None,
            rho=float(kv["rho"]) if "rho" in kv else None,
            weights_path=kv.get("weights"),
            targets_path=kv.get("targets"),
            format_version=version,
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if mani.limits.shape != (mani.m,):
        raise DimensionMismatch(f"{path}: limits must have m={mani.m} entries")
    return mani


def load_problem(manifest_path: str) -> Problem:
    mani = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    A = read_matrix(resolve(mani.matrix_path), mani.n, mani.m)
    demands = (
        read_vector(resolve(mani.demands_path), mani.n) if mani.demands_path else None
    )
    kwargs = {}
    if mani.utility_family == "alpha_fair":
        kwargs["alpha"] = mani.alpha
    elif mani.utility_family == "power":
        kwargs["rho"] = mani.rho
    elif mani.utility_family == "target_priority":
        if not mani.weights_path or not mani.targets_path:
            raise ParseError("target_priority manifests need weights and targets")
        kwargs["weights"] = read_vector(resolve(mani.weights_path), mani.n)
        kwargs["targets"] = read_vector(resolve(mani.targets_path), mani.n)
    spec = UtilitySpec(family=mani.utility_family, **kwargs)
    problem = Problem(efficiency=A, limits=mani.limits, utility=spec, demands=demands)
    validate(problem)
    return problem


def save_problem(problem: Problem, directory: str, name: str = "problem") -> str:
    """Write manifest + data files; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    matrix_file = f"{name}_matrix.f64"
    write_matrix(os.path.join(directory, matrix_file), problem.efficiency)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"n = {problem.n}",
        f"m = {problem.m}",
        f"matrix = {matrix_file}",
        "limits = " + ",".join(f"{x:.17g}" for x in problem.limits),
        f"utility = {problem.utility.family}",
    ]
    if problem.demands is not None:
        demands_file = f"{name}_demands.f64"
        write_matrix(os.path.join(directory, demands_file), problem.demands)
        lines.append(f"demands = {demands_file}")
    spec = problem.utility
    if spec.family == "alpha_fair":
        lines.append(f"alpha = {spec.alpha:.17g}")
    elif spec.family == "power":
        lines.append(f"rho = {spec.rho:.17g}")
    elif spec.family == "target_priority":
        wfile, tfile = f"{name}_weights.f64", f"{name}_targets.f64"
        write_matrix(os.path.join(directory, wfile), spec.weights)
        write_matrix(os.path.join(directory, tfile), spec.targets)
        lines.append(f"weights = {wfile}")
        lines.append(f"targets = {tfile}")
    manifest_path = os.path.join(directory, f"{name}.manifest")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path


def generate(
    family: str,
    n: int,
    m: int,
    seed: int,
    utility: str = "log",
    alpha: Optional[float] = None,
    rho: Optional[float] = None,
    target: float = 0.2,
) -> Problem:
    """Deterministic synthetic instance.

    medium/large: the four fixed uniform column ranges with limits scaling
    linearly in n. scaling: m columns with increasing uniform ranges and
    geometrically tightening limits (first ~n, next n/1.5, then n/1.5^2, ...).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    if family in ("medium", "large"):
        if m != 4:
            raise UnsupportedFamily(f"{family} instances have m=4 resources")
        A = np.empty((n, 4))
        for j, (lo, hi) in enumerate(MEDIUM_RANGES):
            A[:, j] = rng.uniform(lo, hi, size=n)
        limits = n * np.asarray(MEDIUM_LIMITS_PER_JOB)
    elif family == "scaling":
        edges = np.linspace(0.1, 0.9, m + 1)
        A = np.empty((n, m))
        for j in range(m):
            A[:, j] = rng.uniform(edges[j], edges[j + 1], size=n)
        base = rng.uniform(0.1, 1.0, size=m)
        limits = base * n / 1.5 ** np.arange(m)
    else:
        raise UnsupportedFamily(f"unknown instance family {family!r}")

    kwargs = {}
    if utility == "alpha_fair":
        kwargs["alpha"] = alpha
    elif utility == "power":
        kwargs["rho"] = rho
    elif utility == "target_priority":
        kwargs["targets"] = np.full(n, target)
        kwargs["weights"] = np.where(rng.random(n) < 0.5, 2.0, 1.0)
    spec = UtilitySpec(family=utility, **kwargs)
    problem = Problem(efficiency=A, limits=limits, utility=spec)
    validate(problem)
    return problem
