"""
The periodic Kingman recursion.

    p_{n+1}(dx) = beta_{[n+1]} q_{[n+1]}(dx) + (1 - beta_{[n+1]}) x p_n(dx) / w_n

All iteration runs on the union grid of the atoms of p_0 and the q_i, which the
recursion never leaves, so every step is a handful of vector operations.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from measures import (
    MERGE_TOL,
    PROBABILITY,
    SUB_PROBABILITY,
    Measure,
    MeasureError,
    Window,
    dirac,
    from_arrays,
    from_grid,
    grid_index,
    leq_eta,
    on_grid,
    size_bias,
    support_grid,
    support_max,
    window_mask,
)

logger = logging.getLogger(__name__)

# Tail convergence detector: change per period and number of quiet periods
CONVERGENCE_TOL = 1e-12
CONVERGENCE_PERIODS = 10

PROGRESS_EVERY = 1000

ProgressCallback = Callable[[int, int, str], None]

Environment = Tuple[float, Measure]


class ModelError(ValueError):
    """Raised for invalid cycles, models or selection maps and for degenerate steps."""


@dataclass(frozen=True, eq=False)
class EnvironmentCycle:
    """The k mutation environments (beta_i, q_i), visited cyclically."""
    betas: Tuple[float, ...]
    qs: Tuple[Measure, ...]

    def __post_init__(self):
        if len(self.betas) != len(self.qs) or not self.betas:
            raise ModelError("a cycle needs k >= 1 environments, each with a beta and a q")
        for i, (beta, q) in enumerate(zip(self.betas, self.qs)):
            if not 0.0 < beta < 1.0:
                raise ModelError(f"environment {i}: beta must lie strictly inside (0, 1), got {beta}")
            if q.kind != PROBABILITY:
                raise ModelError(f"environment {i}: q must be a probability measure")
            if support_max(q) <= 0.0:
                raise ModelError(f"environment {i}: q must put mass above 0")

    @property
    def k(self) -> int:
        return len(self.betas)

    @property
    def eta_qs(self) -> Tuple[float, ...]:
        return tuple(support_max(q) for q in self.qs)

    @property
    def eta_q(self) -> float:
        return max(self.eta_qs)

    def env(self, i: int) -> Environment:
        i %= self.k
        return self.betas[i], self.qs[i]

    def envs(self) -> List[Environment]:
        return [self.env(i) for i in range(self.k)]


def make_cycle(envs: Sequence[Environment]) -> EnvironmentCycle:
    envs = list(envs)
    return EnvironmentCycle(tuple(float(beta) for beta, _ in envs), tuple(q for _, q in envs))


@dataclass(frozen=True, eq=False)
class ModelInstance:
    cycle: EnvironmentCycle
    p0: Measure
    eta0: float = field(init=False)
    eta_q: float = field(init=False)

    def __post_init__(self):
        if self.p0.kind != PROBABILITY:
            raise ModelError("p0 must be a probability measure")
        eta0 = support_max(self.p0)
        eta_q = self.cycle.eta_q
        if eta0 <= 0.0:
            raise ModelError("p0 must put mass above 0")
        # Mutants may not land above the initial support
        if eta0 < eta_q - MERGE_TOL:
            raise ModelError("eta0 < eta_q")
        object.__setattr__(self, "eta0", eta0)
        object.__setattr__(self, "eta_q", eta_q)

    @property
    def k(self) -> int:
        return self.cycle.k


def make_model(cycle: EnvironmentCycle, p0: Measure) -> ModelInstance:
    return ModelInstance(cycle, p0)


# Selection maps for the periodic-selection variant
def _identity(x: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _power(x: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    return np.asarray(x, dtype=float) ** params["exponent"]


def _constant(x: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    return np.full(np.shape(x), params["value"], dtype=float)


def _exp(x: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    return np.exp(params["rate"] * np.asarray(x, dtype=float))


def _table(x: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    points = params["points"]
    return np.interp(np.asarray(x, dtype=float), [p[0] for p in points], [p[1] for p in points])


SELECTION_FAMILIES: Dict[str, Callable[[np.ndarray, Dict[str, Any]], np.ndarray]] = {
    "identity": _identity,
    "power": _power,
    "constant": _constant,
    "exp": _exp,
    "table": _table,
}


@dataclass(frozen=True, eq=False)
class SelectionMap:
    """A non-negative selection function s on [0, 1]."""
    name: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return SELECTION_FAMILIES[self.name](x, self.params)

    @property
    def is_identity(self) -> bool:
        return self.name == "identity" or (self.name == "power" and self.params.get("exponent") == 1.0)


def make_selection_map(spec: Dict[str, Any]) -> SelectionMap:
    name = spec.get("name")
    if name not in SELECTION_FAMILIES:
        raise ModelError(f"unknown selection family: {name!r}")
    params = {key: value for key, value in spec.items() if key != "name"}
    if name == "power":
        exponent = float(params.get("exponent", 1.0))
        if exponent <= 0.0:
            raise ModelError("power selection needs exponent > 0")
        params = {"exponent": exponent}
    elif name == "constant":
        value = float(params.get("value", 1.0))
        if value <= 0.0:
            raise ModelError("constant selection needs value > 0")
        params = {"value": value}
    elif name == "exp":
        params = {"rate": float(params.get("rate", 1.0))}
    elif name == "table":
        # Piecewise linear through the given points
        points = params.get("points")
        if not points or any(len(p) != 2 for p in points):
            raise ModelError("table selection needs a list of [x, s] points")
        xs = [float(p[0]) for p in points]
        values = [float(p[1]) for p in points]
        if any(b <= a for a, b in zip(xs, xs[1:])) or xs[0] < 0.0 or xs[-1] > 1.0:
            raise ModelError("table selection points must be strictly increasing in [0, 1]")
        if min(values) < 0.0 or max(values) <= 0.0:
            raise ModelError("table selection values must be non-negative and not all zero")
        params = {"points": [[x, s] for x, s in zip(xs, values)]}
    else:
        params = {}
    return SelectionMap(name, params)


@dataclass(frozen=True, eq=False)
class SelectionCycle:
    maps: Tuple[SelectionMap, ...]

    @property
    def k(self) -> int:
        return len(self.maps)

    def values(self, x: np.ndarray) -> np.ndarray:
        """k x len(x) array of s_l(x)."""
        return np.vstack([np.asarray(m(x), dtype=float) for m in self.maps])

    def combined(self, x: np.ndarray) -> np.ndarray:
        """Geometric mean (prod_l s_l(x))^(1/k)."""
        return np.prod(self.values(x), axis=0) ** (1.0 / self.k)


def make_selection(specs: Sequence[Dict[str, Any]], k: int) -> SelectionCycle:
    if len(specs) != k:
        raise ModelError(f"selection needs {k} maps, got {len(specs)}")
    return SelectionCycle(tuple(make_selection_map(spec) for spec in specs))


def identity_selection(k: int) -> SelectionCycle:
    return SelectionCycle(tuple(SelectionMap("identity") for _ in range(k)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Scalars for every step and full measures at checkpoints.

    w[n] is the mean of p_n, log_W[n] = sum_{j<n} log w_j (log_W[0] = 0), and
    mass_at_atom[n] = p_n({atom_location}), where atom_location defaults to eta0.
    tv[n, m] is the distance from p_n to the reference law of residue n mod k on
    windows[m], when references were supplied.
    """
    k: int
    eta0: float
    w: np.ndarray
    log_W: np.ndarray
    atom_location: float
    mass_at_atom: np.ndarray
    snapshots: Dict[int, Measure]
    windows: Tuple[Window, ...] = ()
    tv: Optional[np.ndarray] = None
    converged_at: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return int(self.w.size) - 1

    @property
    def W(self) -> np.ndarray:
        return np.exp(self.log_W)

    def measure(self, n: int) -> Measure:
        if n not in self.snapshots:
            raise ModelError(f"step {n} was not kept as a checkpoint")
        return self.snapshots[n]

    def last_index(self, residue: int) -> int:
        n = self.n_steps - ((self.n_steps - residue) % self.k)
        if n < 0:
            raise ModelError(f"trajectory too short for residue {residue}")
        return n

    def tail_means(self) -> np.ndarray:
        """Last recorded w_n for each residue, the simulation estimate of the limiting means."""
        return np.array([self.w[self.last_index(i)] for i in range(self.k)])


def default_checkpoints(n_steps: int, k: int) -> set:
    points = {0, n_steps}
    points.update(range(max(0, n_steps - 2 * k + 1), n_steps + 1))
    power = 1
    while power <= n_steps:
        points.add(power)
        power *= 2
    return points


def _run(model: ModelInstance, n_steps: int,
         selection: Optional[SelectionCycle] = None,
         truncation: Optional[float] = None,
         reference: Optional[Sequence[Measure]] = None,
         windows: Optional[Sequence[Window]] = None,
         checkpoints: Optional[Iterable[int]] = None,
         keep_all: bool = False,
         atom_location: Optional[float] = None,
         progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """Shared loop behind iterate, iterate_selective and iterate_truncated."""
    if n_steps < 0:
        raise ModelError("n_steps must be non-negative")
    cycle = model.cycle
    k = cycle.k
    if selection is not None and selection.k != k:
        raise ModelError(f"selection has {selection.k} maps for a cycle of {k} environments")
    if reference is not None and len(reference) != k:
        raise ModelError(f"need {k} reference laws, got {len(reference)}")
    atom_location = model.eta0 if atom_location is None else float(atom_location)

    # One grid for everything: p_0, the q_i, the reference laws and the tracked atom
    extra = [atom_location] + ([truncation] if truncation is not None else [])
    grid = support_grid([model.p0, *cycle.qs, *(reference or [])], extra=extra)
    atom_idx = int(grid_index(grid, [atom_location])[0])
    betas = np.array(cycle.betas)
    q_vectors = [on_grid(q, grid) for q in cycle.qs]
    s_values = None
    if selection is not None:
        # Selection values are fixed per grid point, so evaluate them once
        s_values = selection.values(grid)
        if np.any(s_values < 0.0) or not np.isfinite(s_values).all():
            raise ModelError("selection values must be finite and non-negative")

    above = None
    trunc_idx = None
    if truncation is not None:
        if not 0.0 < truncation <= model.eta0:
            raise ModelError(f"truncation level must lie in (0, eta0], got {truncation}")
        trunc_idx = int(grid_index(grid, [truncation])[0])
        above = grid >= grid[trunc_idx]

    def collapse(vector: np.ndarray) -> np.ndarray:
        # Collapse mass above the truncation level onto the level itself
        if above is None:
            return vector
        mass = vector[above].sum()
        vector[above] = 0.0
        vector[trunc_idx] = mass
        return vector

    # Distances to the reference laws are only recorded when both laws and windows are given
    ref_vectors = [on_grid(pi, grid) for pi in reference] if reference is not None else None
    windows = tuple(tuple(map(float, win)) for win in (windows or ()))
    masks = [window_mask(grid, win) for win in windows]
    tv = np.zeros((n_steps + 1, len(windows))) if ref_vectors is not None and windows else None

    keep = set(checkpoints or ()) | default_checkpoints(n_steps, k)
    w = np.empty(n_steps + 1)
    log_W = np.zeros(n_steps + 1)
    mass_at_atom = np.empty(n_steps + 1)
    snapshots: Dict[int, Measure] = {}
    converged_at = None
    quiet = 0

    p = collapse(on_grid(model.p0, grid))
    for n in range(n_steps + 1):
        # Record the scalars of p_n
        w_n = float(grid @ p)
        if not w_n > 0.0:
            raise ModelError("degenerate selection")
        w[n] = w_n
        if n < n_steps:
            log_W[n + 1] = log_W[n] + np.log(w_n)
        mass_at_atom[n] = p[atom_idx]
        if tv is not None:
            diff = np.abs(p - ref_vectors[n % k])
            for m, mask in enumerate(masks):
                tv[n, m] = diff[mask].sum()
        if keep_all or n in keep:
            snapshots[n] = from_grid(grid, p)

        # At the end of every period compare the last k means with the period before
        if n >= 2 * k - 1 and (n + 1) % k == 0:
            change = np.max(np.abs(w[n - k + 1:n + 1] - w[n - 2 * k + 1:n - k + 1]))
            quiet = quiet + 1 if change < CONVERGENCE_TOL else 0
            if quiet >= CONVERGENCE_PERIODS and converged_at is None:
                converged_at = n
                logger.debug(f"Mean fitness settled at step {n}")

        if progress_callback and n and n % PROGRESS_EVERY == 0:
            progress_callback(n, n_steps, f"step {n}")
        if n == n_steps:
            break

        # Step n + 1 uses environment (n + 1) mod k
        e = (n + 1) % k
        if s_values is None:
            biased = grid * p / w_n
        else:
            weights = s_values[e] * p
            total = weights.sum()
            if not total > 0.0:
                raise ModelError("selection annihilates support")
            biased = weights / total
        p = betas[e] * q_vectors[e] + (1.0 - betas[e]) * biased
        # Renormalize to keep rounding drift out of the total mass
        p = collapse(p / p.sum())

    if converged_at is None and n_steps >= 2 * k * CONVERGENCE_PERIODS:
        logger.warning(f"Mean fitness still moving after {n_steps} steps (detector did not trigger)")
    return Trajectory(k=k, eta0=model.eta0, w=w, log_W=log_W, atom_location=atom_location,
                      mass_at_atom=mass_at_atom, snapshots=snapshots, windows=windows, tv=tv,
                      converged_at=converged_at)


def step(p: Measure, env: Environment) -> Tuple[Measure, float]:
    """One Kingman step: (beta q + (1 - beta) x p(dx) / w, w)."""
    beta, q = env
    # Size-biasing fails on a measure with all its mass at 0
    try:
        biased, w = size_bias(p)
    except MeasureError:
        raise ModelError("degenerate selection")
    # Mix the mutant law with the selected population
    locations = np.concatenate((q.locations, biased.locations))
    masses = np.concatenate((beta * q.masses, (1.0 - beta) * biased.masses))
    return from_arrays(locations, masses, PROBABILITY, renormalize=True), w


def iterate(model: ModelInstance, n_steps: int,
            reference: Optional[Sequence[Measure]] = None,
            windows: Optional[Sequence[Window]] = None,
            checkpoints: Optional[Iterable[int]] = None,
            keep_all: bool = False,
            progress_callback: Optional[ProgressCallback] = None) -> Trajectory:
    """
    Run the recursion for n_steps steps from p_0; step n + 1 uses environment (n + 1) mod k.

    Args:
        model: The cycle and initial distribution to iterate
        n_steps: Number of steps; the trajectory holds n_steps + 1 records
        reference: Optional limit law for each residue, compared against p_n
        windows: Intervals on which the distance to the reference is measured
        checkpoints: Extra steps whose full measure is kept
        keep_all: Keep the measure of every step
        progress_callback: Called every 1000 steps with (done, total, message)

    Returns:
        Trajectory with w_n, log W_n and the mass at eta0 for every step, and
        the distance to the reference on each window when one was given
    """
    logger.debug(f"Iterating k={model.k} model for {n_steps} steps")
    return _run(model, n_steps, reference=reference, windows=windows, checkpoints=checkpoints,
                keep_all=keep_all, progress_callback=progress_callback)


def decompose(model: ModelInstance, n: int) -> Tuple[Measure, Measure]:
    """
    Split p_n into a_n, the part generated by mutations, and b_n, the part
    descended from p_0:

        b_n = prod_{m=1..n} (1 - beta_{[m]}) / w_{m-1} * x^n p_0(dx)
    """
    if n < 1:
        raise ModelError("decompose needs n >= 1")
    cycle = model.cycle
    # a_n follows the recursion started from 0, b_n is what is left of p_0
    grid = support_grid([model.p0, *cycle.qs])
    q_vectors = [on_grid(q, grid) for q in cycle.qs]
    p0 = on_grid(model.p0, grid)

    p = p0.copy()
    a = np.zeros(grid.size)
    log_factor = 0.0
    for m in range(n):
        w_m = float(grid @ p)
        if not w_m > 0.0:
            raise ModelError("degenerate selection")
        beta, e = cycle.betas[(m + 1) % cycle.k], (m + 1) % cycle.k
        a = beta * q_vectors[e] + (1.0 - beta) * grid * a / w_m
        p = beta * q_vectors[e] + (1.0 - beta) * grid * p / w_m
        log_factor += np.log1p(-beta) - np.log(w_m)

    # Each step multiplies the descended part by (1 - beta) x / w
    b = p0 * grid ** n * np.exp(log_factor)
    return from_grid(grid, a, SUB_PROBABILITY), from_grid(grid, b, SUB_PROBABILITY)


def step_selective(p: Measure, env: Environment,
                   s: Callable[[np.ndarray], np.ndarray]) -> Tuple[Measure, float]:
    """One step with selection function s: (beta q + (1 - beta) s(x) p(dx) / int s dp, int s dp)."""
    beta, q = env
    # s may be a function or its values on the atoms of p
    values = np.asarray(s(p.locations) if callable(s) else s, dtype=float)
    if values.shape != p.locations.shape or np.any(values < 0.0):
        raise ModelError("selection values must be non-negative, one per atom")
    weights = values * p.masses
    total = float(weights.sum())
    if not total > 0.0:
        raise ModelError("selection annihilates support")
    locations = np.concatenate((q.locations, p.locations))
    masses = np.concatenate((beta * q.masses, (1.0 - beta) * weights / total))
    return from_arrays(locations, masses, PROBABILITY, renormalize=True), total


def iterate_selective(model: ModelInstance, selection: SelectionCycle, n_steps: int,
                      reference: Optional[Sequence[Measure]] = None,
                      windows: Optional[Sequence[Window]] = None,
                      atom_location: Optional[float] = None) -> Trajectory:
    """Recursion with s_{[n+1]} in place of the identity at step n + 1."""
    return _run(model, n_steps, selection=selection, reference=reference, windows=windows,
                atom_location=atom_location)


def iterate_truncated(model: ModelInstance, epsilon: float, n_steps: int) -> Trajectory:
    """
    Recursion with every iterate (and p_0) truncated at eta0 - epsilon, keeping all steps.

    Truncation only moves mass down, so the truncated sequence dominates the
    original one for the order below eta0 - epsilon.
    """
    if not 0.0 < epsilon < model.eta0:
        raise ModelError(f"epsilon must lie in (0, eta0), got {epsilon}")
    return _run(model, n_steps, truncation=model.eta0 - epsilon, keep_all=True)


def monotone_scheme_check(model: ModelInstance, n_periods: int = 50, tol: float = 1e-12) -> Dict[str, Any]:
    """
    Start from a point mass at eta0 and check that each residue subsequence
    p_{kn+i} increases for the order below eta0 while its means decrease.
    """
    # The scheme is only monotone from a point mass at eta0
    start = make_model(model.cycle, dirac(model.eta0))
    k = model.k
    trajectory = _run(start, k * n_periods, keep_all=True)
    violations: List[str] = []
    ordered = True
    means_down = True
    # Compare every step with the same residue one period later
    for n in range(k * (n_periods - 1) + 1):
        if not leq_eta(trajectory.snapshots[n], trajectory.snapshots[n + k], model.eta0, tol):
            ordered = False
            violations.append(f"order broken between steps {n} and {n + k}")
        if trajectory.w[n + k] > trajectory.w[n] + tol:
            means_down = False
            violations.append(f"mean increased between steps {n} and {n + k}")
    if violations:
        logger.warning(f"Monotone scheme check found {len(violations)} violations")
    return {"ordered": ordered, "means_non_increasing": means_down, "violations": violations,
            "trajectory": trajectory}


def floor_inequality(trajectory: Trajectory, cycle: EnvironmentCycle) -> float:
    """eta0^k * prod_i (1 - beta_i) / wbar_i with wbar_i taken from the trajectory tail; at most 1."""
    wbars = trajectory.tail_means()
    return float(np.exp(cycle.k * np.log(trajectory.eta0) + np.sum(np.log1p(-np.array(cycle.betas)))
                        - np.sum(np.log(wbars))))


def atom_lower_bound(trajectory: Trajectory, cycle: EnvironmentCycle) -> np.ndarray:
    """prod_{j<n} (1 - beta_{[j+1]}) eta0 / w_j, which bounds p_n({eta0}) from below when p_0 = delta_eta0."""
    n = np.arange(1, trajectory.w.size)
    betas = np.array(cycle.betas)[n % cycle.k]
    logs = np.log1p(-betas) + np.log(trajectory.eta0) - np.log(trajectory.w[:-1])
    return np.exp(np.concatenate(([0.0], np.cumsum(logs))))
