"""
Named reference instances and a seeded generator of random ones.

    E1  k=1, beta=0.1, q=delta_0.5, p0=delta_1              condensation, alpha=0.8
    E2  k=1, beta=0.5, q=delta_0.5, p0=delta_1              boundary, rho(A(1))=1
    E3  k=1, beta=0.5, q=delta_0.8, p0=delta_1              no condensation, z_c=0.625
    E4  k=2, beta=(0.1, 0.1), q=(delta_0.5, delta_0.25)     condensation, alpha~0.839614
"""
import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from measures import dirac, from_arrays, PROBABILITY
from recursion import ModelError, ModelInstance, make_cycle, make_model

logger = logging.getLogger(__name__)


def e1() -> ModelInstance:
    return make_model(make_cycle([(0.1, dirac(0.5))]), dirac(1.0))


def e2() -> ModelInstance:
    return make_model(make_cycle([(0.5, dirac(0.5))]), dirac(1.0))


def e3() -> ModelInstance:
    return make_model(make_cycle([(0.5, dirac(0.8))]), dirac(1.0))


def e4() -> ModelInstance:
    return make_model(make_cycle([(0.1, dirac(0.5)), (0.1, dirac(0.25))]), dirac(1.0))


PRESETS: Dict[str, Callable[[], ModelInstance]] = {"E1": e1, "E2": e2, "E3": e3, "E4": e4}


def preset(name: str) -> ModelInstance:
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return PRESETS[name]()


def _random_atoms(rng: np.random.Generator, n_atoms: int, locations: np.ndarray):
    masses = rng.dirichlet(np.ones(n_atoms))
    return from_arrays(locations, masses, PROBABILITY, renormalize=True)


def random_model(rng: np.random.Generator, k: int, max_atoms: int = 3,
                 eta0_range: Tuple[float, float] = (0.5, 1.0),
                 beta_range: Tuple[float, float] = (0.02, 0.6),
                 q_fraction_range: Tuple[float, float] = (0.05, 0.95),
                 eta0: Optional[float] = None,
                 top_atom_probability: float = 0.0) -> ModelInstance:
    """
    A random instance: p0 has an atom at eta0 plus up to max_atoms - 1 atoms
    below it, each q_i has up to max_atoms atoms at eta0 * u with u drawn from
    q_fraction_range.

    With top_atom_probability > 0, each q_i independently moves its last atom
    to eta0 with that probability; A(1/eta0) then diverges and no mass can
    condense. With the default 0 every q stays strictly below eta0.
    """
    if k < 1:
        raise ModelError("k must be at least 1")
    eta0 = float(rng.uniform(*eta0_range)) if eta0 is None else float(eta0)
    envs = []
    for _ in range(k):
        n_atoms = int(rng.integers(1, max_atoms + 1))
        locations = eta0 * rng.uniform(*q_fraction_range, size=n_atoms)
        # No extra draw when top_atom_probability is 0
        if top_atom_probability > 0.0 and rng.uniform() < top_atom_probability:
            locations[-1] = eta0
        envs.append((float(rng.uniform(*beta_range)), _random_atoms(rng, n_atoms, locations)))
    n_below = int(rng.integers(0, max_atoms))
    p0_locations = np.concatenate(([eta0], eta0 * rng.uniform(0.05, 0.95, size=n_below)))
    p0 = _random_atoms(rng, n_below + 1, p0_locations)
    return make_model(make_cycle(envs), p0)


def random_z(rng: np.random.Generator, model: ModelInstance) -> float:
    """A z in [0, 1/eta_q), where A(z) is finite."""
    return float(rng.uniform(0.0, 1.0 / model.eta_q) * (1.0 - 1e-9))
