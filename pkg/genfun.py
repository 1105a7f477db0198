"""
Generating functions of the weights W_n = w_0 w_1 ... w_{n-1}.

    w^{(i)}(z) = sum_{n >= 1, n = i mod k} V_n z^n,   V_n = W_n / (1 - beta_bar)^n

Two independent evaluations: truncated series from a simulated trajectory, and
the determinant (Cramer) formula built from A(z) and the moments of p_0. The
series start at n = 1, so the p_0 term for residue 0 is m^{(0)}(z) - 1.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from recursion import EnvironmentCycle, ModelInstance, iterate
from spectral import CriticalSolution, build_A, find_zc

logger = logging.getLogger(__name__)

# Periods used to estimate the geometric ratio of the series tail
RATIO_PERIODS = 3


class GenFunError(ValueError):
    """Raised for z outside [0, z_c) or malformed inputs."""


@dataclass(frozen=True, eq=False)
class WeightGenFun:
    z: float
    series: np.ndarray
    tail: np.ndarray
    closed: np.ndarray
    beta_bar: float
    c: np.ndarray
    m_gen: np.ndarray
    recurrence_residual: float


def beta_bar(cycle: EnvironmentCycle) -> float:
    """The beta with (1 - beta)^k = prod_i (1 - beta_i)."""
    return float(-np.expm1(np.mean(np.log1p(-np.array(cycle.betas)))))


def c_matrix(cycle: EnvironmentCycle) -> np.ndarray:
    """c_{i,j} = prod_{q<[i-j]} (1 - beta_{[i-q]}) / (1 - beta_bar)^{[i-j]}, with c_{i,i} = 1."""
    k = cycle.k
    log_keep = np.log1p(-np.array(cycle.betas))
    log_bar = np.mean(log_keep)
    c = np.ones((k, k))
    for i in range(k):
        for j in range(k):
            r = (i - j) % k
            if r:
                c[i, j] = np.exp(sum(log_keep[(i - q) % k] for q in range(r)) - r * log_bar)
    return c


def m_generating(model: ModelInstance, z: float) -> np.ndarray:
    """m^{(i)}(z) = int (zx)^i / (1 - (zx)^k) p_0(dx)."""
    k = model.k
    t = z * model.p0.locations
    if np.any(t >= 1.0):
        raise GenFunError("outside convergence disk")
    return np.array([np.dot(model.p0.masses, t ** i / (1.0 - t ** k)) for i in range(k)])


def _critical(model: ModelInstance, z: float, critical: Optional[CriticalSolution]) -> CriticalSolution:
    critical = critical or find_zc(model)
    if not 0.0 <= z < critical.z_c:
        raise GenFunError("outside convergence disk")
    return critical


def weight_series(model: ModelInstance, z: float, N: int,
                  critical: Optional[CriticalSolution] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Partial sums of w^{(i)}(z) up to n = N and a bound on each remainder.

    The remainder is bounded by last_term * r / (1 - r), with r the largest of
    the per-period ratios seen over the last periods and (z / z_c)^k, plus a
    rounding allowance proportional to the partial sum.

    Args:
        model: Model whose weights W_n are summed
        z: Evaluation point in [0, z_c)
        N: Last index of the partial sums
        critical: Critical solution of the model, computed when omitted

    Returns:
        Tuple of (partial sums, tail bounds), one entry per residue; a bound is
        inf while the series is not yet contracting at N
    """
    critical = _critical(model, z, critical)
    k = model.k
    if N < 1:
        raise GenFunError("N must be at least 1")
    if z == 0.0:
        return np.zeros(k), np.zeros(k)

    # Terms V_n z^n = W_n z^n / (1 - beta_bar)^n, built in log space
    trajectory = iterate(model, N)
    n = np.arange(1, N + 1)
    log_keep_bar = np.mean(np.log1p(-np.array(model.cycle.betas)))
    terms = np.exp(trajectory.log_W[1:] - n * log_keep_bar + n * np.log(z))

    values = np.zeros(k)
    tails = np.zeros(k)
    floor_ratio = (z / critical.z_c) ** k
    for i in range(k):
        block = terms[(n % k) == i]
        if block.size == 0:
            tails[i] = float("inf")
            continue
        values[i] = block.sum()
        # Geometric tail from the slowest recent ratio, never below (z / z_c)^k
        recent = block[-(RATIO_PERIODS + 1):]
        observed = float(np.max(recent[1:] / recent[:-1])) if recent.size > 1 else 0.0
        ratio = max(observed, floor_ratio)
        if ratio >= 1.0:
            logger.warning(f"Series for residue {i} not yet contracting at N={N} (ratio {ratio:.6g})")
            tails[i] = float("inf")
        else:
            tails[i] = block[-1] * ratio / (1.0 - ratio) + 4.0 * N * np.finfo(float).eps * values[i]
    return values, tails


def _inhomogeneous(model: ModelInstance, z: float) -> np.ndarray:
    m_tilde = m_generating(model, z)
    m_tilde[0] -= 1.0
    return m_tilde


def _keep_ratio(cycle: EnvironmentCycle) -> np.ndarray:
    """prod_{q=1..j} (1 - beta_q) / (1 - beta_bar)^j for every j, i.e. c_{j,0}."""
    return c_matrix(cycle)[:, 0]


def weight_closed_form(model: ModelInstance, z: float,
                       critical: Optional[CriticalSolution] = None) -> np.ndarray:
    """w^{(j)}(z) = c_{j,0} det((I - A, M~)_j) / det(I - A), with M~ = M - e_0."""
    _critical(model, z, critical)
    k = model.k
    A = build_A(model.cycle, z)
    I_minus_A = np.eye(k) - A.entries
    denominator = linalg.det(I_minus_A)
    if denominator <= 0.0:
        raise GenFunError("outside convergence disk")
    m_tilde = _inhomogeneous(model, z)
    scale = _keep_ratio(model.cycle)
    values = np.empty(k)
    # Cramer: replace column j by the inhomogeneous term
    for j in range(k):
        replaced = I_minus_A.copy()
        replaced[:, j] = m_tilde
        values[j] = scale[j] * linalg.det(replaced) / denominator
    return values


def _recurrence_residual(model: ModelInstance, z: float, W: np.ndarray) -> float:
    A = build_A(model.cycle, z).entries
    c = c_matrix(model.cycle)
    m_tilde = _inhomogeneous(model, z)
    # Right-hand side of the linear system the series satisfy
    predicted = (c * A) @ W + c[:, 0] * m_tilde
    return float(np.max(np.abs(W - predicted)))


def recurrence_check(model: ModelInstance, z: float, N: int,
                     critical: Optional[CriticalSolution] = None) -> float:
    """Residual of w^{(i)} = sum_j c_{i,j} A_{i,j} w^{(j)} + c_{i,0} m~^{(i)} on the truncated series."""
    critical = _critical(model, z, critical)
    values, _ = weight_series(model, z, N, critical)
    return _recurrence_residual(model, z, values)


def phi_residual(model: ModelInstance, z: float, critical: Optional[CriticalSolution] = None) -> float:
    """Residual of (C o (I - A)) W = C_0 o M~ at the closed-form W."""
    critical = _critical(model, z, critical)
    k = model.k
    W = weight_closed_form(model, z, critical)
    c = c_matrix(model.cycle)
    lhs = (c * (np.eye(k) - build_A(model.cycle, z).entries)) @ W
    return float(np.max(np.abs(lhs - c[:, 0] * _inhomogeneous(model, z))))


def hadamard_matrix(betas: Sequence[float]) -> np.ndarray:
    """B_{i,i} = 1, B_{i,j} = beta_j ... beta_{i-1} below the diagonal, reciprocals above."""
    betas = [float(b) for b in betas]
    if any(b == 0.0 for b in betas):
        raise GenFunError("betas must be non-null")
    k = len(betas) + 1
    B = np.ones((k, k))
    for i in range(k):
        for j in range(i):
            B[i, j] = np.prod(betas[j:i])
            B[j, i] = 1.0 / B[i, j]
    return B


def hadamard_check(betas: Sequence[float], trials: int = 100, seed: int = 0) -> float:
    """
    Largest |det(B o A) - det(A)| over random A with entries in [-1, 1],
    relative to the Hadamard bound of B o A (and at least 1).
    """
    B = hadamard_matrix(betas)
    k = B.shape[0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    # Compare determinants relative to the Hadamard bound of each product
    for _ in range(trials):
        A = rng.uniform(-1.0, 1.0, size=(k, k))
        product = B * A
        scale = max(1.0, float(np.prod(np.linalg.norm(product, axis=1))), float(np.prod(np.linalg.norm(A, axis=1))))
        worst = max(worst, abs(linalg.det(product) - linalg.det(A)) / scale)
    logger.debug(f"Hadamard identity over {trials} trials (k={k}): worst relative gap {worst:.3e}")
    return worst


def weight_generating_function(model: ModelInstance, z: float, N: int,
                               critical: Optional[CriticalSolution] = None) -> WeightGenFun:
    """Series, tail bounds, closed form and recurrence residual at one z."""
    critical = _critical(model, z, critical)
    series, tail = weight_series(model, z, N, critical)
    closed = weight_closed_form(model, z, critical)
    residual = _recurrence_residual(model, z, series)
    gap = np.abs(series - closed)
    if np.any(gap > tail + 1e-12 * np.maximum(1.0, np.abs(closed))):
        logger.warning(f"Series and closed form differ beyond the tail bound at z={z}: {gap.tolist()}")
    return WeightGenFun(z=float(z), series=series, tail=tail, closed=closed, beta_bar=beta_bar(model.cycle),
                        c=c_matrix(model.cycle), m_gen=m_generating(model, z), recurrence_residual=residual)
