"""
Finite atomic measures on [0, 1].

Every distribution handled by the toolkit (fitness distributions p_n, mutant
laws q_i, limit laws pi_i and the pieces of their decompositions) is a finite
list of atoms. Integrals become exact finite sums, so the only numerical error
left in the core is floating point rounding.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

PROBABILITY = "probability"
SUB_PROBABILITY = "sub-probability"
KINDS = (PROBABILITY, SUB_PROBABILITY)

# Locations closer than this are the same atom
MERGE_TOL = 1e-12
# Atoms lighter than this are dropped
MASS_FLOOR = 1e-15
# Accepted deviation of a probability measure's total mass from 1
MASS_TOL = 1e-9

DEFAULT_CELLS = 1024

Window = Tuple[float, float]


class MeasureError(ValueError):
    """Raised when a measure breaks its invariants or an operation is undefined on it."""


@dataclass(frozen=True, eq=False)
class Measure:
    """Atoms (locations strictly increasing, masses positive) and a kind flag."""
    locations: np.ndarray
    masses: np.ndarray
    kind: str = PROBABILITY

    def __post_init__(self):
        locations = np.asarray(self.locations, dtype=float).reshape(-1)
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.kind not in KINDS:
            raise MeasureError(f"unknown measure kind: {self.kind}")
        if locations.shape != masses.shape:
            raise MeasureError("locations and masses must have the same length")
        if locations.size:
            if not np.all(np.isfinite(locations)) or not np.all(np.isfinite(masses)):
                raise MeasureError("atoms must be finite")
            if locations[0] < -MERGE_TOL or locations[-1] > 1.0 + MERGE_TOL:
                raise MeasureError("atom locations must lie in [0, 1]")
            if np.any(np.diff(locations) <= 0.0):
                raise MeasureError("atom locations must be strictly increasing")
            if np.any(masses <= 0.0):
                raise MeasureError("atom masses must be positive")
        total = float(masses.sum())
        if self.kind == PROBABILITY:
            if locations.size == 0:
                raise MeasureError("empty support")
            if abs(total - 1.0) > MASS_TOL:
                raise MeasureError(f"probability measure has total mass {total!r}")
        elif total > 1.0 + MASS_TOL:
            raise MeasureError(f"sub-probability measure has total mass {total!r}")

        # Freeze the arrays so a measure never changes after validation
        locations.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "masses", masses)

    @property
    def size(self) -> int:
        return int(self.locations.size)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def atoms(self) -> List[Tuple[float, float]]:
        return [(float(x), float(m)) for x, m in zip(self.locations, self.masses)]

    def __repr__(self) -> str:
        shown = ", ".join(f"({x:.6g}, {m:.6g})" for x, m in self.atoms()[:6])
        more = f", ... {self.size - 6} more" if self.size > 6 else ""
        return f"Measure[{self.kind}]({shown}{more})"


def _canonical(locations: np.ndarray, masses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sort atoms, merge locations closer than MERGE_TOL and drop masses below MASS_FLOOR."""
    locations = np.asarray(locations, dtype=float).reshape(-1)
    masses = np.asarray(masses, dtype=float).reshape(-1)
    if locations.size == 0:
        return locations, masses
    order = np.argsort(locations, kind="stable")
    locations = locations[order]
    masses = masses[order]
    # Each run of nearly equal locations becomes one atom at its first location
    starts = np.flatnonzero(np.concatenate(([True], np.diff(locations) >= MERGE_TOL)))
    merged_locations = locations[starts]
    merged_masses = np.add.reduceat(masses, starts)
    keep = merged_masses >= MASS_FLOOR
    return np.clip(merged_locations[keep], 0.0, 1.0), merged_masses[keep]


def from_arrays(locations: Iterable[float], masses: Iterable[float],
                kind: str = PROBABILITY, renormalize: bool = False) -> Measure:
    """
    Build a measure from unsorted atoms, merging and flooring them first.

    With renormalize=True a probability measure is rescaled to total mass 1
    after the floor has been applied (its mass must already be within MASS_TOL).
    """
    locations = np.asarray(locations if isinstance(locations, np.ndarray) else list(locations), dtype=float)
    masses = np.asarray(masses if isinstance(masses, np.ndarray) else list(masses), dtype=float)
    if np.any(masses < 0.0):
        raise MeasureError("atom masses must be non-negative")
    locations, masses = _canonical(locations, masses)
    if renormalize and kind == PROBABILITY and masses.size:
        total = masses.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise MeasureError(f"probability measure has total mass {total!r}")
        masses = masses / total
    return Measure(locations, masses, kind)


def make_measure(atoms: Sequence[Sequence[float]], kind: str = PROBABILITY) -> Measure:
    """Build a measure from a list of (location, mass) pairs."""
    atoms = list(atoms)
    if not atoms:
        if kind == PROBABILITY:
            raise MeasureError("empty support")
        return Measure(np.empty(0), np.empty(0), kind)
    for atom in atoms:
        if len(atom) != 2:
            raise MeasureError(f"atom must be a [location, mass] pair, got {atom!r}")
    locations = np.array([float(a[0]) for a in atoms])
    masses = np.array([float(a[1]) for a in atoms])
    if np.any(masses <= 0.0):
        raise MeasureError("atom masses must be positive")
    if np.any(locations < 0.0) or np.any(locations > 1.0):
        raise MeasureError("atom locations must lie in [0, 1]")
    return from_arrays(locations, masses, kind, renormalize=True)


def dirac(location: float, mass: float = 1.0) -> Measure:
    kind = PROBABILITY if mass == 1.0 else SUB_PROBABILITY
    return make_measure([(location, mass)], kind)


def zero_measure() -> Measure:
    return Measure(np.empty(0), np.empty(0), SUB_PROBABILITY)


def support_max(m: Measure) -> float:
    """Largest atom location."""
    if m.size == 0:
        raise MeasureError("empty support")
    return float(m.locations[-1])


def moment(m: Measure, n: int) -> float:
    """Sum of mass * location**n."""
    if n < 0:
        raise MeasureError(f"moment order must be non-negative, got {n}")
    if m.size == 0:
        return 0.0
    return float(np.dot(m.masses, m.locations ** n))


def mass_at(m: Measure, location: float) -> float:
    if m.size == 0:
        return 0.0
    hit = np.abs(m.locations - location) < MERGE_TOL
    return float(m.masses[hit].sum())


def size_bias(m: Measure) -> Tuple[Measure, float]:
    """Return (x m(dx) / w, w) with w the mean of m."""
    w = moment(m, 1)
    if w <= 0.0:
        raise MeasureError("degenerate selection")
    return from_arrays(m.locations, m.locations * m.masses / w, PROBABILITY, renormalize=True), w


def scale(m: Measure, factor: float, kind: str = SUB_PROBABILITY) -> Measure:
    if factor < 0.0:
        raise MeasureError("scale factor must be non-negative")
    return from_arrays(m.locations, m.masses * factor, kind)


def add(a: Measure, b: Measure, kind: Optional[str] = None, renormalize: bool = False) -> Measure:
    """Sum of two measures on the union of their atoms."""
    if kind is None:
        kind = PROBABILITY if abs(a.total + b.total - 1.0) <= MASS_TOL else SUB_PROBABILITY
    return from_arrays(np.concatenate((a.locations, b.locations)),
                       np.concatenate((a.masses, b.masses)), kind, renormalize=renormalize)


def truncate(m: Measure, threshold: float) -> Measure:
    """Collapse all mass at locations >= threshold onto a single atom at threshold."""
    if not 0.0 < threshold <= 1.0:
        raise MeasureError(f"truncation threshold must lie in (0, 1], got {threshold}")
    # Collapse mass above the truncation level onto the level itself
    above = m.locations >= threshold
    if not np.any(above):
        return m
    locations = np.concatenate((m.locations[~above], [threshold]))
    masses = np.concatenate((m.masses[~above], [m.masses[above].sum()]))
    return from_arrays(locations, masses, m.kind)


def support_grid(measures: Iterable[Measure], extra: Iterable[float] = ()) -> np.ndarray:
    """Sorted union of atom locations, merged with MERGE_TOL."""
    parts = [m.locations for m in measures] + [np.asarray(list(extra), dtype=float)]
    locations = np.sort(np.concatenate(parts)) if parts else np.empty(0)
    if locations.size == 0:
        return locations
    starts = np.flatnonzero(np.concatenate(([True], np.diff(locations) >= MERGE_TOL)))
    return locations[starts]


def grid_index(grid: np.ndarray, locations: np.ndarray) -> np.ndarray:
    """Index of the grid point matching each location (within MERGE_TOL)."""
    locations = np.atleast_1d(np.asarray(locations, dtype=float))
    if grid.size == 0:
        if locations.size:
            raise MeasureError("atom off grid")
        return np.empty(0, dtype=int)
    # Nearest of the two neighbouring grid points
    right = np.clip(np.searchsorted(grid, locations), 0, grid.size - 1)
    left = np.clip(right - 1, 0, grid.size - 1)
    nearest = np.where(np.abs(grid[left] - locations) <= np.abs(grid[right] - locations), left, right)
    if np.any(np.abs(grid[nearest] - locations) > MERGE_TOL):
        raise MeasureError("atom off grid")
    return nearest


def on_grid(m: Measure, grid: np.ndarray) -> np.ndarray:
    """Mass vector of m on a grid that contains all of its atoms."""
    vector = np.zeros(grid.size)
    if m.size:
        np.add.at(vector, grid_index(grid, m.locations), m.masses)
    return vector


def from_grid(grid: np.ndarray, vector: np.ndarray, kind: str = PROBABILITY) -> Measure:
    keep = vector > 0.0
    return from_arrays(grid[keep], vector[keep], kind, renormalize=(kind == PROBABILITY))


def window_mask(grid: np.ndarray, window: Window, include_right: bool = True) -> np.ndarray:
    lo, hi = float(window[0]), float(window[1])
    if hi < lo:
        raise MeasureError(f"malformed window [{lo}, {hi}]")
    upper = grid <= hi + MERGE_TOL if include_right else grid < hi - MERGE_TOL
    return (grid >= lo - MERGE_TOL) & upper


def tv_distance(a: Measure, b: Measure, window: Window = (0.0, 1.0), include_right: bool = True) -> float:
    """
    Summed absolute mass difference over the atoms inside a closed window.

    With include_right=False the right end is excluded, which gives the
    distance on [lo, hi) used for bodies of limit laws.
    """
    grid = support_grid([a, b])
    if grid.size == 0:
        return 0.0
    mask = window_mask(grid, window, include_right)
    return float(np.abs(on_grid(a, grid) - on_grid(b, grid))[mask].sum())


def leq_eta(a: Measure, b: Measure, eta: float, tol: float = 0.0) -> bool:
    """True iff a puts no more mass than b on every atom strictly below eta."""
    if not 0.0 < eta <= 1.0:
        raise MeasureError(f"order level must lie in (0, 1], got {eta}")
    grid = support_grid([a, b])
    below = grid < eta - MERGE_TOL
    return bool(np.all(on_grid(a, grid)[below] <= on_grid(b, grid)[below] + tol))


# Density families accepted by the discretizer
def _density_values(density: Dict[str, Any], x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    name = density.get("name")
    if name == "uniform":
        return np.ones_like(x)
    if name == "beta":
        a, b = float(density.get("a", 1.0)), float(density.get("b", 1.0))
        if a <= 0.0 or b <= 0.0:
            raise MeasureError("beta density needs a > 0 and b > 0")
        return stats.beta(a, b, loc=lo, scale=hi - lo).pdf(x)
    if name == "power":
        exponent = float(density.get("exponent", 1.0))
        if exponent <= -1.0:
            raise MeasureError("power density needs exponent > -1")
        return x ** exponent
    if name == "triangular":
        mode = float(density.get("mode", (lo + hi) / 2.0))
        if not lo <= mode <= hi:
            raise MeasureError("triangular mode must lie in the support")
        return stats.triang((mode - lo) / (hi - lo), loc=lo, scale=hi - lo).pdf(x)
    raise MeasureError(f"unknown density family: {name!r}")


def discretize_density(density: Dict[str, Any], cells: int = DEFAULT_CELLS) -> Measure:
    """
    Midpoint-rule discretization of a density on [lo, hi] (default [0, 1]).

    The density is evaluated at the cell midpoints and the resulting weights are
    normalized to a probability measure.
    """
    if cells < 1:
        raise MeasureError("a density grid needs at least one cell")
    lo, hi = (float(v) for v in density.get("support", (0.0, 1.0)))
    if not 0.0 <= lo < hi <= 1.0:
        raise MeasureError(f"density support must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]")
    # Midpoint rule: weight = density at the cell midpoint times the cell width
    h = (hi - lo) / cells
    midpoints = lo + h * (np.arange(cells) + 0.5)
    weights = np.asarray(_density_values(density, midpoints, lo, hi), dtype=float) * h
    if np.any(weights < 0.0) or not np.isfinite(weights).all() or weights.sum() <= 0.0:
        raise MeasureError(f"density {density.get('name')!r} does not give positive finite weights")
    logger.debug(f"Discretized {density.get('name')} density on [{lo}, {hi}] with {cells} cells")
    return from_arrays(midpoints, weights / weights.sum(), PROBABILITY, renormalize=True)


def parse_measure_literal(literal: Union[List[Any], Dict[str, Any]]) -> Measure:
    """
    Read the config literal of a probability measure: either a list of
    [location, mass] pairs or {"grid": {"density": {...}, "cells": n}}.
    """
    # Density grid
    if isinstance(literal, dict):
        grid = literal.get("grid")
        if not isinstance(grid, dict) or not isinstance(grid.get("density"), dict):
            raise MeasureError("a measure object needs a 'grid' block with a 'density'")
        cells = grid.get("cells", DEFAULT_CELLS)
        if not isinstance(cells, int) or isinstance(cells, bool):
            raise MeasureError("grid 'cells' must be an integer")
        return discretize_density(grid["density"], cells)
    # Explicit atoms
    if isinstance(literal, list):
        for atom in literal:
            if not isinstance(atom, (list, tuple)) or len(atom) != 2 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in atom):
                raise MeasureError(f"atom must be a [location, mass] pair of numbers, got {atom!r}")
        return make_measure(literal, PROBABILITY)
    raise MeasureError("a measure must be a list of [location, mass] pairs or a grid object")


def to_literal(m: Measure) -> List[List[float]]:
    return [[x, w] for x, w in m.atoms()]
