"""
The moment matrix A(z) and the spectral criteria for condensation.

    mu_j^i(z) = int beta_j (zx)^i / (1 - (zx)^k) q_j(dx),   A(z)_{i,j} = mu_j^{[i-j]}(z)

z_c is the largest z <= 1/eta0 with rho(A(z)) <= 1. Below 1 at the top of the
interval the mass condenses at eta0 (alpha > 0); otherwise z_c solves rho = 1.
"""
import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from recursion import EnvironmentCycle, Environment, ModelInstance, ProgressCallback, SelectionCycle, make_cycle

logger = logging.getLogger(__name__)

NON_CONDENSATION = "non_condensation"
CONDENSATION = "condensation"
BOUNDARY = "boundary"

# zx within this distance of 1 is a pole; above it z is outside the domain
POLE_TOL = 1e-12
BOUNDARY_TOL = 1e-10
PERRON_TOL = 1e-14
PERRON_MAX_ITER = 100000
BISECT_XTOL = 1e-14
BISECT_MAX_ITER = 200
MINOR_TOL = 1e-13
IMAG_TOL = 1e-9
CENSUS_TOL = 1e-12


class SpectralError(ValueError):
    """Raised when z is outside the domain, at a pole, or a minor degenerates."""


@dataclass(frozen=True, eq=False)
class MomentMatrix:
    """A(z) with inf in divergent entries."""
    z: float
    entries: np.ndarray
    divergent: np.ndarray

    @property
    def k(self) -> int:
        return int(self.entries.shape[0])

    @property
    def finite(self) -> bool:
        return not bool(self.divergent.any())


@dataclass(frozen=True)
class SpectralResult:
    rho: float
    eigvec_R: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class CriticalSolution:
    z_c: float
    regime: str
    alpha: float
    U: np.ndarray
    z_max: float
    rho_at_max: float
    residual: float


RhoBounds = namedtuple("RhoBounds", ["min_rhoj", "rho", "max_rhoj", "mixed"])


def _column_factors(x: np.ndarray, z: float, k: int, s_values: Optional[np.ndarray], j: int
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per atom of q_j: the numerators for every residue r = 0..k-1, the
    denominators 1 - z^k S(x) and the pole flags.
    """
    if s_values is None:
        t = z * x
        per_period = t ** k
        numerators = np.vstack([t ** r for r in range(k)])
    else:
        per_period = z ** k * np.prod(s_values, axis=0)
        numerators = np.ones((k, x.size))
        for r in range(1, k):
            numerators[r] = numerators[r - 1] * z * s_values[(j + r) % k]
    # Past the pole the series defining mu diverges for every residue
    if np.any(per_period > 1.0 + POLE_TOL):
        raise SpectralError("z outside domain")
    pole = np.abs(1.0 - per_period) <= POLE_TOL
    return numerators, 1.0 - per_period, pole


def mu(env: Environment, i: int, z: float, k: int) -> float:
    """mu^i(z) of one environment; inf at a pole."""
    if z < 0.0:
        raise SpectralError("z outside domain")
    if not 0 <= i < k:
        raise SpectralError(f"residue {i} outside 0..{k - 1}")
    beta, q = env
    numerators, denominators, pole = _column_factors(q.locations, z, k, None, 0)
    if np.any(pole):
        return float("inf")
    return float(beta * np.dot(q.masses, numerators[i] / denominators))


def build_A(cycle: EnvironmentCycle, z: float, selection: Optional[SelectionCycle] = None) -> MomentMatrix:
    """
    A(z)_{i,j} = mu_j^{[i-j]}(z).

    With a selection cycle the factor (zx)^r is replaced by
    z^r s_{[j+1]}(x)...s_{[j+r]}(x) and (zx)^k by z^k s_0(x)...s_{k-1}(x).
    """
    if z < 0.0:
        raise SpectralError("z outside domain")
    k = cycle.k
    entries = np.zeros((k, k))
    divergent = np.zeros((k, k), dtype=bool)
    # Column j holds the moments of environment j
    for j in range(k):
        beta, q = cycle.env(j)
        s_values = selection.values(q.locations) if selection is not None else None
        numerators, denominators, pole = _column_factors(q.locations, z, k, s_values, j)
        for i in range(k):
            r = (i - j) % k
            # A pole on any atom makes the whole column divergent
            if np.any(pole):
                entries[i, j] = np.inf
                divergent[i, j] = True
            else:
                entries[i, j] = beta * np.dot(q.masses, numerators[r] / denominators)
    return MomentMatrix(float(z), entries, divergent)


def column_rhos(cycle: EnvironmentCycle, z: float) -> np.ndarray:
    """rho_j(z) = int beta_j q_j(dx) / (1 - zx), the column sums of A(z)."""
    rhos = np.empty(cycle.k)
    for j, (beta, q) in enumerate(cycle.envs()):
        t = z * q.locations
        if np.any(t > 1.0 + POLE_TOL):
            raise SpectralError("z outside domain")
        if np.any(np.abs(1.0 - t) <= POLE_TOL):
            rhos[j] = np.inf
        else:
            rhos[j] = beta * np.dot(q.masses, 1.0 / (1.0 - t))
    return rhos


def perron(A: MomentMatrix) -> SpectralResult:
    """
    Perron eigenvalue and sum-normalized eigenvector.

    The dominant eigenvector from numpy seeds a power iteration that runs until
    the eigenvalue estimate moves by less than PERRON_TOL (relative).
    """
    k = A.k
    if not A.finite:
        return SpectralResult(float("inf"), np.full(k, 1.0 / k), float("inf"), 0)
    M = A.entries
    # Diagonal matrices, including every k = 1 case, need no iteration
    off_diagonal = M - np.diag(np.diag(M))
    if k == 1 or not np.any(off_diagonal):
        top = int(np.argmax(np.diag(M)))
        R = np.zeros(k)
        R[top] = 1.0
        return SpectralResult(float(M[top, top]), R, 0.0, 0)

    # Seed with the dominant eigenvector, then polish with power iteration
    values, vectors = np.linalg.eig(M)
    top = int(np.argmax(values.real))
    R = np.abs(vectors[:, top].real)
    if R.sum() <= 0.0 or not np.all(R > 0.0):
        R = np.full(k, 1.0 / k)
    R = R / R.sum()
    rho = float(values[top].real)
    iterations = 0
    for iterations in range(1, PERRON_MAX_ITER + 1):
        y = M @ R
        rho_new = float(y.sum())
        R_new = y / rho_new
        done = abs(rho_new - rho) <= PERRON_TOL * max(rho_new, 1e-300) and np.max(np.abs(R_new - R)) <= PERRON_TOL
        rho, R = rho_new, R_new
        if done:
            break
    else:
        logger.warning(f"Power iteration hit {PERRON_MAX_ITER} iterations at z={A.z}")
    residual = float(np.max(np.abs(M @ R - rho * R)))
    return SpectralResult(rho, R, residual, iterations)


def rho(cycle: EnvironmentCycle, z: float, selection: Optional[SelectionCycle] = None) -> float:
    return perron(build_A(cycle, z, selection)).rho


def solve_critical(cycle: EnvironmentCycle, z_max: float,
                   selection: Optional[SelectionCycle] = None) -> CriticalSolution:
    """
    Locate z_c on [0, z_max] and solve A(z_c) U + alpha 1 = U with U_0 = 1.

    Args:
        cycle: The mutation environments
        z_max: Right end of the search interval, 1/eta0 for the plain model
        selection: Optional selection cycle, which turns A(z) into A^s(z)

    Returns:
        CriticalSolution with z_c, the regime, alpha, U and the residual of the
        critical equation
    """
    k = cycle.k
    A_top = build_A(cycle, z_max, selection)
    top = perron(A_top)
    ones = np.ones(k)

    if top.rho < 1.0 - BOUNDARY_TOL:
        # rho stays below 1 on the whole interval: z_c = z_max and the leftover mass is alpha
        Y = linalg.solve(np.eye(k) - A_top.entries, ones)
        U = Y / Y[0]
        alpha = 1.0 / Y[0]
        z_c, regime, A_c = z_max, CONDENSATION, A_top
    elif abs(top.rho - 1.0) <= BOUNDARY_TOL:
        # rho touches 1 exactly at the end of the interval
        U = top.eigvec_R / top.eigvec_R[0]
        alpha = 0.0
        z_c, regime, A_c = z_max, BOUNDARY, A_top
    else:
        # rho increases with z from max(beta_i) < 1 at z = 0 to above 1 (or divergent) at z_max
        z_c = optimize.bisect(lambda z: rho(cycle, z, selection) - 1.0, 0.0, z_max,
                              xtol=BISECT_XTOL, maxiter=BISECT_MAX_ITER)
        A_c = build_A(cycle, z_c, selection)
        R = perron(A_c).eigvec_R
        U = R / R[0]
        alpha = 0.0
        regime = NON_CONDENSATION

    residual = float(np.max(np.abs(A_c.entries @ U + alpha - U)))
    logger.info(f"Critical parameter z_c={z_c:.12g} ({regime}), alpha={alpha:.12g}, rho(A({z_max:.6g}))={top.rho:.12g}")
    return CriticalSolution(float(z_c), regime, float(alpha), U, float(z_max), float(top.rho), residual)


def find_zc(model: ModelInstance) -> CriticalSolution:
    """
    Critical parameter of a model.

    Args:
        model: Model whose eta0 bounds the search interval [0, 1/eta0]

    Returns:
        CriticalSolution of the plain recursion
    """
    return solve_critical(model.cycle, 1.0 / model.eta0)


def build_B(cycle: EnvironmentCycle, z: float) -> np.ndarray:
    """B(z) = A(z) - I - (1/k)(rho_j(z) - 1) in column j. Its columns sum to 0."""
    A = build_A(cycle, z)
    if not A.finite:
        raise SpectralError("B undefined at pole")
    rhos = column_rhos(cycle, z)
    k = cycle.k
    return A.entries - np.eye(k) - (rhos - 1.0)[None, :] / k


def minors_solution(cycle: EnvironmentCycle, z_c: float) -> Tuple[np.ndarray, float]:
    """
    (U, alpha) from the diagonal minors N_j of B(z_c):
    U_j = N_j / N_0 and alpha = (1/k) sum_j U_j (1 - rho_j(z_c)).
    """
    k = cycle.k
    B = build_B(cycle, z_c)
    # The empty minor of a 1x1 matrix is 1
    if k == 1:
        minors = np.ones(1)
    else:
        minors = np.array([linalg.det(np.delete(np.delete(B, j, axis=0), j, axis=1)) for j in range(k)])
    # Compare N_0 with the size of a typical (k-1)x(k-1) determinant of B
    scale = max(1.0, float(np.max(np.abs(B)))) ** (k - 1)
    if abs(minors[0]) < MINOR_TOL * scale:
        raise SpectralError("minor degenerate")
    U = minors / minors[0]
    alpha = float(np.mean(U * (1.0 - column_rhos(cycle, z_c))))
    return U, alpha


def psi(cycle: EnvironmentCycle, z: float, selection: Optional[SelectionCycle] = None) -> float:
    """Psi(z) = det(I - A(z)), same sign as 1 - rho(A(z))."""
    A = build_A(cycle, z, selection)
    if not A.finite:
        raise SpectralError("Ψ undefined at pole")
    return float(linalg.det(np.eye(cycle.k) - A.entries))


def gamma2(cycle: EnvironmentCycle, z: float) -> float:
    """Sum over the two environments of (1 - int beta q/(1 - zx)) / (1 - int beta q/(1 + zx))."""
    if cycle.k != 2:
        raise SpectralError("Γ₂ requires k = 2")
    rhos = column_rhos(cycle, z)
    if not np.all(np.isfinite(rhos)):
        raise SpectralError("Γ₂ undefined at pole")
    total = 0.0
    # Gamma_2 sums one term per environment
    for j, (beta, q) in enumerate(cycle.envs()):
        denominator = 1.0 - beta * np.dot(q.masses, 1.0 / (1.0 + z * q.locations))
        total += (1.0 - rhos[j]) / denominator
    return float(total)


def rho_bounds(cycle: EnvironmentCycle, z: float) -> RhoBounds:
    """min_j rho_j <= rho(A(z)) <= max_j rho_j, plus the mixture sum_i R_i rho_i."""
    A = build_A(cycle, z)
    result = perron(A)
    rhos = column_rhos(cycle, z)
    mixed = float(np.dot(result.eigvec_R, rhos)) if A.finite else float("inf")
    return RhoBounds(float(np.min(rhos)), result.rho, float(np.max(rhos)), mixed)


def collatz_wielandt(A: MomentMatrix, R: np.ndarray) -> Tuple[float, float]:
    """min_i and max_i of (A R)_i / R_i for a positive vector R."""
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise SpectralError("Collatz-Wielandt ratios need a positive vector")
    ratios = (A.entries @ R) / R
    return float(np.min(ratios)), float(np.max(ratios))


def _eigenvalues(A: MomentMatrix) -> np.ndarray:
    if not A.finite:
        raise SpectralError("Ψ undefined at pole")
    try:
        if A.k <= 4:
            return np.roots(np.poly(A.entries))
        return np.linalg.eigvals(A.entries)
    except np.linalg.LinAlgError as e:
        raise SpectralError(f"eigensolver failed: {e}")


def real_eigen_census(A: MomentMatrix) -> int:
    """Number of real eigenvalues >= 1; never more than one."""
    values = _eigenvalues(A)
    real = np.abs(values.imag) <= IMAG_TOL * np.maximum(1.0, np.abs(values))
    return int(np.count_nonzero(real & (values.real >= 1.0 - CENSUS_TOL)))


def eigenvectors_single_signed(A: MomentMatrix) -> bool:
    """True if every real eigenvalue >= 1 has an eigenvector without sign changes."""
    if not A.finite:
        raise SpectralError("Ψ undefined at pole")
    values, vectors = np.linalg.eig(A.entries)
    for idx, value in enumerate(values):
        if abs(value.imag) > IMAG_TOL * max(1.0, abs(value)) or value.real < 1.0 - CENSUS_TOL:
            continue
        v = vectors[:, idx].real
        tol = 1e-12 * np.max(np.abs(v))
        if not (np.all(v >= -tol) or np.all(v <= tol)):
            return False
    return True


def generic_structure_holds(A: MomentMatrix) -> bool:
    """
    Along each row i of the transpose, read cyclically from the diagonal, the
    entries decrease strictly and the last one exceeds max(diagonal - 1, 0).
    """
    if not A.finite:
        return False
    T = A.entries.T
    k = A.k
    for i in range(k):
        row = [T[i, (i + l) % k] for l in range(k)]
        if any(b >= a for a, b in zip(row, row[1:])):
            return False
        if row[-1] <= max(T[i, i] - 1.0, 0.0):
            return False
    return True


def rotate(cycle: EnvironmentCycle) -> EnvironmentCycle:
    """Environment i of the result is environment [i + 1] of the input."""
    envs = cycle.envs()
    return make_cycle(envs[1:] + envs[:1])


def _evaluate_point(cycle: EnvironmentCycle, z: float) -> Dict[str, Any]:
    A = build_A(cycle, z)
    rhos = column_rhos(cycle, z)
    row = {
        "z": float(z),
        "rho": perron(A).rho,
        "psi": float(linalg.det(np.eye(cycle.k) - A.entries)) if A.finite else float("nan"),
        "gamma2_if_k2": float("nan"),
        "min_rhoj": float(np.min(rhos)),
        "max_rhoj": float(np.max(rhos)),
    }
    if cycle.k == 2 and np.all(np.isfinite(rhos)):
        row["gamma2_if_k2"] = gamma2(cycle, z)
    return row


def sweep(cycle: EnvironmentCycle, z_grid: Sequence[float], workers: int = 4,
          progress_callback: Optional[ProgressCallback] = None) -> List[Dict[str, Any]]:
    """Spectral quantities over a grid of z, evaluated concurrently and returned sorted by z."""
    z_grid = [float(z) for z in z_grid]
    total = len(z_grid)
    rows: List[Dict[str, Any]] = []
    errors: List[str] = []
    logger.info(f"Sweeping {total} z values with {workers} workers")
    # Evaluate every z in parallel and collect failures instead of stopping at the first one
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(_evaluate_point, cycle, z): z for z in z_grid}
        for done, future in enumerate(as_completed(futures), 1):
            z = futures[future]
            try:
                rows.append(future.result())
            except SpectralError as e:
                errors.append(f"z={z}: {e}")
                logger.error(f"Evaluation failed at z={z}: {e}")
            if progress_callback:
                progress_callback(done, total, f"z={z:.6g}")
    if errors:
        raise SpectralError("; ".join(sorted(errors)))
    # Completion order is arbitrary
    rows.sort(key=lambda row: row["z"])
    return rows
