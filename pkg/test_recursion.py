#!/usr/bin/env python3
import numpy as np
import pytest

from measures import PROBABILITY, add, dirac, from_arrays, leq_eta, make_measure, mass_at, support_max, tv_distance
from model_catalog import e1, e3, e4, random_model
from recursion import (
    ModelError,
    SelectionMap,
    atom_lower_bound,
    decompose,
    floor_inequality,
    identity_selection,
    iterate,
    iterate_selective,
    iterate_truncated,
    make_cycle,
    make_model,
    make_selection,
    make_selection_map,
    monotone_scheme_check,
    step,
    step_selective,
)


def test_step_fixed_point():
    p, w = step(dirac(0.5), (0.5, dirac(0.5)))
    assert w == 0.5
    assert p.atoms() == [(0.5, 1.0)]


def test_step_by_hand():
    p, w = step(dirac(1.0), (0.1, dirac(0.5)))
    assert w == 1.0
    assert np.array(p.atoms()) == pytest.approx(np.array([(0.5, 0.1), (1.0, 0.9)]))


def test_step_degenerate():
    with pytest.raises(ModelError, match="degenerate selection"):
        step(dirac(0.0), (0.1, dirac(0.5)))


def test_step_preserves_order():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        locations = np.concatenate((rng.uniform(0.05, 0.95, n), [1.0]))
        upper = from_arrays(locations, rng.dirichlet(np.ones(n + 1)), PROBABILITY, renormalize=True)
        masses = upper.masses.copy()
        moved = masses[-1] * rng.uniform(0.0, 1.0)
        masses[:-1] += moved * rng.dirichlet(np.ones(masses.size - 1))
        masses[-1] -= moved
        lower = from_arrays(upper.locations, masses, PROBABILITY, renormalize=True)
        env = (float(rng.uniform(0.05, 0.6)), make_measure([(float(rng.uniform(0.1, 0.9)), 1.0)]))
        assert leq_eta(upper, lower, 1.0, 1e-15)
        assert leq_eta(step(upper, env)[0], step(lower, env)[0], 1.0, 1e-14)


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
def test_cycle_rejects_closed_interval_betas(beta):
    with pytest.raises(ModelError):
        make_cycle([(beta, dirac(0.5))])


def test_model_rejects_eta0_below_eta_q():
    with pytest.raises(ModelError, match="eta0 < eta_q"):
        make_model(make_cycle([(0.5, dirac(0.8))]), dirac(0.5))


def test_model_derived_fields():
    model = e4()
    assert model.k == 2
    assert model.eta0 == 1.0
    assert model.eta_q == 0.5


def test_iterate_zero_steps():
    trajectory = iterate(e1(), 0)
    assert trajectory.n_steps == 0
    assert trajectory.w.tolist() == [1.0]
    assert trajectory.W.tolist() == [1.0]
    assert trajectory.measure(0).atoms() == [(1.0, 1.0)]


def test_iterate_e1_mean_fitness():
    trajectory = iterate(e1(), 2000)
    assert trajectory.w[-1] == pytest.approx(0.9, abs=1e-8)
    assert trajectory.converged_at is not None


def test_iterate_e4_mean_fitness_by_residue():
    trajectory = iterate(e4(), 4000)
    assert trajectory.w[4000] == pytest.approx(0.913044, abs=1e-6)
    assert trajectory.w[3999] == pytest.approx(0.887143, abs=1e-6)
    assert trajectory.tail_means() == pytest.approx([0.913044, 0.887143], abs=1e-6)


def test_progress_callback():
    calls = []
    iterate(e1(), 2500, progress_callback=lambda done, total, msg: calls.append((done, total, msg)))
    assert calls == [(1000, 2500, "step 1000"), (2000, 2500, "step 2000")]


def test_cumulative_weights():
    trajectory = iterate(e4(), 50)
    for n in (1, 7, 50):
        assert trajectory.log_W[n] == pytest.approx(np.sum(np.log(trajectory.w[:n])), abs=1e-12)
    assert trajectory.W[0] == 1.0


def test_iterate_matches_measure_steps():
    model = e4()
    trajectory = iterate(model, 12, keep_all=True)
    p = model.p0
    for n in range(1, 13):
        p, _ = step(p, model.cycle.env(n))
        assert tv_distance(p, trajectory.measure(n)) < 1e-12


def test_probability_and_support_ceiling_on_random_models():
    rng = np.random.default_rng(3)
    for _ in range(20):
        model = random_model(rng, int(rng.integers(1, 5)))
        trajectory = iterate(model, 200)
        for n, p in trajectory.snapshots.items():
            assert p.total == pytest.approx(1.0, abs=1e-12)
            assert support_max(p) <= model.eta0


def test_default_checkpoints_keep_last_two_periods():
    trajectory = iterate(e4(), 100)
    for n in (0, 1, 2, 4, 64, 97, 98, 99, 100):
        assert n in trajectory.snapshots
    with pytest.raises(ModelError):
        trajectory.measure(77)


def test_decompose_single_step():
    a, b = decompose(e1(), 1)
    assert np.array(a.atoms()) == pytest.approx(np.array([(0.5, 0.1)]))
    assert np.array(b.atoms()) == pytest.approx(np.array([(1.0, 0.9)]))


def test_decompose_sums_to_iterate():
    rng = np.random.default_rng(5)
    models = [e1(), e4()] + [random_model(rng, int(rng.integers(1, 5))) for _ in range(48)]
    for model in models:
        k = model.k
        trajectory = iterate(model, 20 * k, checkpoints=(1, k, 5 * k, 20 * k))
        for n in sorted({1, k, 5 * k, 20 * k}):
            a, b = decompose(model, n)
            assert tv_distance(add(a, b), trajectory.measure(n)) < 1e-12


def test_descended_mass_decreases_on_e1():
    masses = [decompose(e1(), n)[1].total for n in range(1, 30)]
    assert all(later <= earlier + 1e-15 for earlier, later in zip(masses, masses[1:]))


def test_decompose_needs_positive_n():
    with pytest.raises(ModelError):
        decompose(e1(), 0)


def test_step_selective_identity_matches_step():
    p = make_measure([(0.5, 0.5), (1.0, 0.5)])
    env = (0.1, dirac(0.5))
    selected, total = step_selective(p, env, lambda x: x)
    plain, w = step(p, env)
    assert total == pytest.approx(w)
    assert tv_distance(selected, plain) < 1e-15


def test_step_selective_without_selection_mixes():
    p = make_measure([(0.5, 0.5), (1.0, 0.5)])
    selected, total = step_selective(p, (0.2, dirac(0.25)), lambda x: np.ones_like(x))
    assert total == pytest.approx(1.0)
    assert np.array(selected.atoms()) == pytest.approx(np.array([(0.25, 0.2), (0.5, 0.4), (1.0, 0.4)]))


def test_step_selective_square():
    p = make_measure([(0.5, 0.5), (1.0, 0.5)])
    selected, total = step_selective(p, (0.1, dirac(0.5)), lambda x: x ** 2)
    assert total == pytest.approx(0.625)
    assert np.array(selected.atoms()) == pytest.approx(np.array([(0.5, 0.28), (1.0, 0.72)]))


def test_step_selective_annihilated():
    with pytest.raises(ModelError, match="selection annihilates support"):
        step_selective(dirac(0.5), (0.1, dirac(0.5)), lambda x: np.zeros_like(x))


def test_iterate_selective_identity_matches_iterate():
    model = e4()
    plain = iterate(model, 300)
    selected = iterate_selective(model, identity_selection(2), 300)
    assert selected.w == pytest.approx(plain.w, abs=1e-14)


def test_selection_maps():
    x = np.array([0.0, 0.5, 1.0])
    assert make_selection_map({"name": "power", "exponent": 2})(x).tolist() == [0.0, 0.25, 1.0]
    assert make_selection_map({"name": "constant", "value": 3})(x).tolist() == [3.0, 3.0, 3.0]
    table = make_selection_map({"name": "table", "points": [[0.0, 1.0], [1.0, 0.0]]})
    assert table(x).tolist() == pytest.approx([1.0, 0.5, 0.0])
    assert SelectionMap("identity").is_identity
    cycle = make_selection([{"name": "identity"}, {"name": "power", "exponent": 3.0}], 2)
    assert cycle.combined(np.array([0.5])) == pytest.approx([0.25])


@pytest.mark.parametrize("spec", [
    {"name": "sigmoid"},
    {"name": "power", "exponent": 0.0},
    {"name": "constant", "value": -1.0},
    {"name": "table", "points": [[0.5, 1.0], [0.2, 1.0]]},
    {"name": "table", "points": [[0.0, 0.0], [1.0, 0.0]]},
])
def test_selection_map_validation(spec):
    with pytest.raises(ModelError):
        make_selection_map(spec)


def test_selection_length_must_match_k():
    with pytest.raises(ModelError):
        make_selection([{"name": "identity"}], 2)


def test_monotone_scheme_from_top_atom():
    rng = np.random.default_rng(17)
    for model in [e1(), e3(), e4()] + [random_model(rng, int(rng.integers(1, 4))) for _ in range(8)]:
        result = monotone_scheme_check(model, n_periods=40)
        assert result["ordered"], result["violations"][:3]
        assert result["means_non_increasing"], result["violations"][:3]


def test_floor_inequality():
    for model in (e1(), e3(), e4()):
        trajectory = iterate(model, 2000)
        assert floor_inequality(trajectory, model.cycle) <= 1.0 + 1e-9
    assert floor_inequality(iterate(e1(), 2000), e1().cycle) == pytest.approx(1.0, abs=1e-8)


def test_floor_inequality_on_random_models():
    rng = np.random.default_rng(19)
    for _ in range(30):
        model = random_model(rng, int(rng.integers(1, 5)))
        # From a point mass at eta0 the means of each residue decrease to their limits
        start = make_model(model.cycle, dirac(model.eta0))
        trajectory = iterate(start, 400 * model.k)
        assert floor_inequality(trajectory, model.cycle) <= 1.0 + 1e-9


def test_atom_lower_bound():
    model = e4()
    trajectory = iterate(model, 200)
    bound = atom_lower_bound(trajectory, model.cycle)
    assert bound[0] == 1.0
    assert np.all(bound <= trajectory.mass_at_atom + 1e-12)


def test_truncated_recursion_dominates():
    model = e4()
    epsilon = 0.2
    level = model.eta0 - epsilon
    plain = iterate(model, 60, keep_all=True)
    truncated = iterate_truncated(model, epsilon, 60)
    for n in range(61):
        assert leq_eta(plain.measure(n), truncated.measure(n), level, 1e-12)
        assert truncated.w[n] <= plain.w[n] + 1e-12
        assert support_max(truncated.measure(n)) <= level + 1e-12
    assert mass_at(truncated.measure(0), level) == pytest.approx(1.0)


def test_truncated_recursion_rejects_bad_epsilon():
    with pytest.raises(ModelError):
        iterate_truncated(e4(), 1.0, 10)


if __name__ == "__main__":
    pytest.main([__file__])
