#!/usr/bin/env python3
import numpy as np
import pytest

from measures import make_measure, mass_at, moment, tv_distance
from model_catalog import e1, e2, e3, e4, random_model
from recursion import ModelError, identity_selection, iterate, make_model, make_selection
from spectral import BOUNDARY, CONDENSATION, NON_CONDENSATION, rotate
from limits import (
    CONJECTURE_LABEL,
    PropertyViolation,
    conjecture_experiment,
    default_windows,
    check_windows,
    eigen_check,
    eigen_consistency,
    fixed_point_check,
    floor_value,
    limit_laws,
    run_checks,
    verify_convergence,
)


def test_limit_law_e1():
    report = limit_laws(e1())
    assert report.critical.regime == CONDENSATION
    (pi,) = report.pis
    assert np.array(pi.atoms()) == pytest.approx(np.array([(0.5, 0.2), (1.0, 0.8)]), abs=1e-12)
    assert report.wbars == pytest.approx([0.9], abs=1e-12)
    assert report.atom_masses() == pytest.approx([0.8], abs=1e-12)


def test_limit_law_e2_boundary():
    report = limit_laws(e2())
    assert report.critical.regime == BOUNDARY
    assert mass_at(report.pis[0], 0.5) == pytest.approx(1.0, abs=1e-12)
    assert report.zbar_check == pytest.approx(1.0, abs=1e-9)


def test_limit_law_e3():
    report = limit_laws(e3())
    assert report.critical.regime == NON_CONDENSATION
    assert np.array(report.pis[0].atoms()) == pytest.approx(np.array([(0.8, 1.0)]), abs=1e-10)
    assert report.zbar_check == pytest.approx(0.625, abs=1e-9)


def test_limit_laws_e4():
    report = limit_laws(e4())
    pi0, pi1 = report.pis
    assert np.array(pi0.atoms()) == pytest.approx(
        np.array([(0.25, 0.027053), (0.5, 0.133333), (1.0, 0.839614)]), abs=1e-6)
    assert np.array(pi1.atoms()) == pytest.approx(
        np.array([(0.25, 0.106667), (0.5, 0.065714), (1.0, 0.827619)]), abs=1e-6)
    assert report.wbars == pytest.approx([0.913044, 0.887143], abs=1e-6)
    assert report.zbar == pytest.approx(1.0, abs=1e-12)
    assert floor_value(e4(), report) == pytest.approx(1.0, abs=1e-12)


def test_run_checks_on_catalog():
    for model in (e1(), e2(), e3(), e4()):
        checks = run_checks(model, limit_laws(model), strict=True)
        failed = [name for name, check in checks.items() if not check["pass"]]
        assert not failed


def test_run_checks_on_random_models():
    rng = np.random.default_rng(23)
    for _ in range(20):
        model = random_model(rng, int(rng.integers(1, 5)))
        report = limit_laws(model)
        checks = run_checks(model, report)
        assert all(check["pass"] for check in checks.values()), checks
        assert report.zbar_check <= 1.0 + 1e-12
        for pi in report.pis:
            assert pi.total == pytest.approx(1.0, abs=1e-10)


def test_run_checks_strict_raises():
    model = e4()
    report = limit_laws(model)
    broken = type(report)(critical=report.critical, pis=report.pis, wbars=report.wbars, zs=report.zs,
                          zbar=report.zbar + 0.1, zbar_check=report.zbar_check, eta0=report.eta0,
                          atom_location=report.atom_location)
    with pytest.raises(PropertyViolation, match="zbar_matches_zc"):
        run_checks(model, broken, strict=True)


def test_default_windows():
    assert default_windows(e1(), limit_laws(e1()))[0][1] < 1.0
    assert default_windows(e3(), limit_laws(e3())) == [(0.0, 1.0)]


def test_verify_e1():
    result = verify_convergence(e1(), 2000)
    assert result["pass"]
    (residue,) = result["residues"]
    assert residue["windows"][0]["final_tv"] < 1e-8
    assert residue["atom_gap"] < 1e-6
    assert residue["wbar_simulated"] == pytest.approx(0.9, abs=1e-8)


def test_verify_e3_full_window():
    result = verify_convergence(e3(), 2000, windows=[(0.0, 1.0)])
    assert result["pass"]
    assert result["regime"] == NON_CONDENSATION
    assert result["residues"][0]["windows"][0]["final_tv"] < 1e-8


def test_verify_e4_every_residue():
    result = verify_convergence(e4(), 4000)
    assert [r["residue"] for r in result["residues"]] == [0, 1]
    assert result["pass"]
    for residue in result["residues"]:
        assert residue["atom_gap"] < 1e-6


def test_verify_rejects_horizon_off_period():
    with pytest.raises(ModelError):
        verify_convergence(e4(), 4001)


def test_verify_rejects_windows_reaching_eta0_under_condensation():
    with pytest.raises(ModelError, match="under condensation"):
        verify_convergence(e1(), 2000, windows=[(0.0, 1.0)])
    with pytest.raises(ModelError, match="under condensation"):
        verify_convergence(e4(), 200, windows=[(0.0, 0.5), (0.2, 1.0 - 1e-13)])
    result = verify_convergence(e1(), 2000, windows=[(0.0, 0.9), (0.4, 0.6)])
    assert result["pass"]
    (residue,) = result["residues"]
    assert [w["window"] for w in residue["windows"]] == [[0.0, 0.9], [0.4, 0.6]]
    assert residue["atom_gap"] < 1e-6


def test_check_windows_leaves_other_regimes_alone():
    assert check_windows(e3(), limit_laws(e3()), [(0, 1)]) == [(0.0, 1.0)]
    assert check_windows(e2(), limit_laws(e2()), [(0.0, 1.0)]) == [(0.0, 1.0)]


def test_eigen_consistency():
    model = e4()
    report = limit_laws(model)
    trajectory = iterate(model, 10000)
    assert eigen_consistency(report, trajectory.tail_means(), model.cycle.betas) < 1e-6


def test_eigen_check():
    model = e4()
    check = eigen_check(model, limit_laws(model))
    assert check["pass"]
    assert check["value"] < 1e-6
    assert check["horizon"] == 10000
    boundary = eigen_check(e2(), limit_laws(e2()), horizon=200)
    assert boundary["pass"]
    assert boundary["gated"] is False


def test_floor_saturates_exactly_under_condensation():
    rng = np.random.default_rng(31)
    regimes = set()
    for _ in range(50):
        model = random_model(rng, int(rng.integers(1, 5)))
        report = limit_laws(model)
        critical = report.critical
        regimes.add(critical.regime)
        value = floor_value(model, report)
        assert value <= 1.0 + 1e-9
        if critical.regime == CONDENSATION:
            assert value == pytest.approx(1.0, abs=1e-9)
        else:
            assert value == pytest.approx((critical.z_c * model.eta0) ** model.k, abs=1e-8)
            assert value < 1.0
    assert {CONDENSATION, NON_CONDENSATION} <= regimes


def test_fixed_point():
    for model in (e1(), e3(), e4()):
        fixed = fixed_point_check(model, limit_laws(model))
        assert fixed["body_tv"] < 1e-9
        assert fixed["atom_gap"] < 1e-9


def test_rotation_shifts_limit_laws():
    model = random_model(np.random.default_rng(29), 3)
    report = limit_laws(model)
    shifted = limit_laws(make_model(rotate(model.cycle), model.p0))
    for i in range(3):
        assert tv_distance(shifted.pis[i], report.pis[(i + 1) % 3]) < 1e-9


def test_conjecture_identity_matches_limit_laws():
    model = e4()
    result = conjecture_experiment(model, identity_selection(2), 400)
    assert result["label"] == CONJECTURE_LABEL
    assert result["x0"] == 1.0
    assert result["points_at_max"] == 1
    plain = limit_laws(model)
    for ours, theirs in zip(result["report"].pis, plain.pis):
        assert tv_distance(ours, theirs) < 1e-12
    for residue in result["residues"]:
        assert residue["atom_mass_simulated"] == pytest.approx(residue["atom_mass_predicted"], abs=1e-6)


def test_conjecture_with_power_selection():
    selection = make_selection([{"name": "identity"}, {"name": "power", "exponent": 2.0}], 2)
    result = conjecture_experiment(e4(), selection, 400)
    assert result["x0"] == 1.0
    assert result["selection_at_x0"] == pytest.approx(1.0)
    for pi in result["report"].pis:
        assert pi.total == pytest.approx(1.0, abs=1e-10)
        assert moment(pi, 1) <= 1.0
    assert len(result["residues"]) == 2


def test_conjecture_hypotheses_unmet():
    model = make_model(e4().cycle, make_measure([(0.5, 0.5), (1.0, 0.5)]))
    flat = make_selection([{"name": "constant", "value": 1.0}] * 2, 2)
    with pytest.raises(ModelError, match="conjecture hypotheses unmet"):
        conjecture_experiment(model, flat, 100)


def test_atom_mass_matches_closed_form():
    report = limit_laws(e4())
    U = report.critical.U
    for i, pi in enumerate(report.pis):
        assert mass_at(pi, 1.0) == pytest.approx(report.critical.alpha * U[0] / U[i], abs=1e-12)


if __name__ == "__main__":
    pytest.main([__file__])
