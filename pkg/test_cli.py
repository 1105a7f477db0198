#!/usr/bin/env python3
import csv
import json
import os

import pytest

from kingman_cli import (
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    config_hash,
    load_config,
    main,
    z_grid,
)
from measures import to_literal

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


def write_config(tmp_path, document, name='config.json'):
    path = tmp_path / name
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f)
    return str(path)


def read_csv(path):
    with open(path, 'r', newline='', encoding='utf-8') as csvfile:
        return list(csv.DictReader(csvfile))


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def model_document(beta=0.1, q=((0.5, 1.0),), p0=((1.0, 1.0),)):
    return {
        "schema": 1,
        "model": {
            "environments": [{"beta": beta, "q": [list(atom) for atom in q]}],
            "p0": [list(atom) for atom in p0],
        },
    }


def test_analyze_e1(tmp_path):
    out = tmp_path / 'out'
    assert main(['analyze', '--config', os.path.join(DATA, 'e1.json'), '--out', str(out)]) == EXIT_OK
    report = read_json(out / 'report.json')
    assert report["regime"] == "condensation"
    assert report["alpha"] == pytest.approx(0.8, abs=1e-9)
    assert report["wbar"] == pytest.approx([0.9], abs=1e-9)
    assert all(check["pass"] for check in report["checks"].values())
    assert read_json(out / 'run.json')["files"] == ['report.json']


def test_analyze_e4(tmp_path):
    out = tmp_path / 'out'
    assert main(['analyze', '-c', os.path.join(DATA, 'e4.json'), '-o', str(out)]) == EXIT_OK
    report = read_json(out / 'report.json')
    assert report["alpha"] == pytest.approx(869 / 1035, abs=1e-12)
    assert report["U"] == pytest.approx([1.0, 1050 / 1035], abs=1e-12)
    assert report["checks"]["criterion_equivalence"]["value"] == 0
    eigen = report["checks"]["eigen_consistency"]
    assert eigen["pass"]
    assert eigen["value"] < 1e-6
    assert eigen["horizon"] == 10000


def test_minimal_config_round_trips(tmp_path):
    config = load_config(write_config(tmp_path, model_document()))
    assert config.model.k == 1
    assert to_literal(config.model.p0) == [[1.0, 1.0]]
    assert to_literal(config.model.cycle.qs[0]) == config.raw["model"]["environments"][0]["q"]
    assert config.params["horizon"] == 2000
    assert config.selection is None


def test_beta_outside_open_interval_is_rejected(tmp_path):
    path = write_config(tmp_path, model_document(beta=1.0))
    assert main(['analyze', '--config', path, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG
    with pytest.raises(ConfigError, match=r"model\.environments\[0\]\.beta"):
        load_config(path)


def test_eta0_below_eta_q_is_rejected(tmp_path):
    path = write_config(tmp_path, model_document(q=((0.8, 1.0),), p0=((0.5, 1.0),)))
    assert main(['analyze', '--config', path, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG
    with pytest.raises(ConfigError, match="eta0 < eta_q"):
        load_config(path)


def test_unknown_fields_are_rejected(tmp_path):
    document = model_document()
    document["params"] = {"horizn": 10}
    with pytest.raises(ConfigError, match=r"params\.horizn"):
        load_config(write_config(tmp_path, document))
    document = model_document()
    document["schema"] = 2
    with pytest.raises(ConfigError, match="schema"):
        load_config(write_config(tmp_path, document))


def test_missing_config_file(tmp_path):
    assert main(['analyze', '--config', str(tmp_path / 'nope.json'), '--out', str(tmp_path / 'out')]) == EXIT_CONFIG


def test_sweep_e4(tmp_path):
    out = tmp_path / 'out'
    assert main(['sweep', '--config', os.path.join(DATA, 'e4.json'), '--out', str(out)]) == EXIT_OK
    rows = read_csv(out / 'sweep.csv')
    assert len(rows) == 101
    assert all(float(row["psi"]) > 0.0 for row in rows)
    rhos = [float(row["rho"]) for row in rows]
    assert all(b > a for a, b in zip(rhos, rhos[1:]))
    assert float(rows[-1]["rho"]) == pytest.approx(0.164222, abs=1e-6)


def test_z_grid_defaults_to_one_over_eta0(tmp_path):
    config = load_config(write_config(tmp_path, model_document()))
    grid = z_grid(config)
    assert grid[0] == 0.0
    assert grid[-1] == pytest.approx(1.0)
    assert len(grid) == 101


def test_verify_e3(tmp_path):
    out = tmp_path / 'out'
    assert main(['verify', '--config', os.path.join(DATA, 'e3.json'), '--out', str(out)]) == EXIT_OK
    result = read_json(out / 'verify.json')
    assert result["pass"]
    assert result["residues"][0]["windows"][0]["final_tv"] < 1e-8
    rows = read_csv(out / 'tv_gaps.csv')
    assert len(rows) == 2001
    assert float(rows[-1]["tv"]) < 1e-8


def test_verify_rejects_horizon_off_period(tmp_path):
    args = ['verify', '--config', os.path.join(DATA, 'e4.json'), '--out', str(tmp_path / 'out'), '--horizon', '101']
    assert main(args) == EXIT_CONFIG


def test_verify_rejects_window_through_condensed_atom(tmp_path):
    document = model_document()
    document["params"] = {"windows": [[0.0, 1.0]]}
    path = write_config(tmp_path, document)
    assert main(['verify', '--config', path, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG
    document["params"] = {"windows": [[0.0, 0.9]]}
    path = write_config(tmp_path, document)
    assert main(['verify', '--config', path, '--out', str(tmp_path / 'ok')]) == EXIT_OK


def test_simulate_writes_every_step(tmp_path):
    out = tmp_path / 'out'
    args = ['simulate', '--config', os.path.join(DATA, 'e4.json'), '--out', str(out), '--horizon', '200']
    assert main(args) == EXIT_OK
    rows = read_csv(out / 'trajectory.csv')
    assert [int(row["n"]) for row in rows] == list(range(201))
    assert rows[0]["w_n"] == '1'
    assert [int(row["i"]) for row in rows[:4]] == [0, 1, 0, 1]


def test_genfun_e4(tmp_path):
    out = tmp_path / 'out'
    assert main(['genfun', '--config', os.path.join(DATA, 'e4.json'), '--out', str(out)]) == EXIT_OK
    rows = read_csv(out / 'genfun.csv')
    assert len(rows) == 6
    for row in rows:
        gap = abs(float(row["series_value"]) - float(row["closed_value"]))
        assert gap <= float(row["tail_bound"]) + 1e-12 * max(1.0, abs(float(row["closed_value"])))


def test_conjecture_needs_selection(tmp_path):
    assert main(['conjecture', '--config', os.path.join(DATA, 'e4.json'), '--out', str(tmp_path / 'out')]) == EXIT_CONFIG


def test_conjecture_e4_selection(tmp_path):
    out = tmp_path / 'out'
    args = ['conjecture', '--config', os.path.join(DATA, 'e4_selection.json'), '--out', str(out), '--horizon', '400']
    assert main(args) == EXIT_OK
    document = read_json(out / 'conjecture.json')
    assert document["label"] == "conjectural, no convergence guarantee"
    assert document["x0"] == 1.0


def test_outputs_are_deterministic(tmp_path):
    path = os.path.join(DATA, 'e4.json')
    for name in ('first', 'second'):
        assert main(['analyze', '--config', path, '--out', str(tmp_path / name)]) == EXIT_OK
        assert main(['sweep', '--config', path, '--out', str(tmp_path / name)]) == EXIT_OK
    for name in ('report.json', 'sweep.csv', 'run.json'):
        with open(tmp_path / 'first' / name, 'rb') as a, open(tmp_path / 'second' / name, 'rb') as b:
            assert a.read() == b.read()


def test_config_hash_is_embedded(tmp_path):
    path = os.path.join(DATA, 'e1.json')
    out = tmp_path / 'out'
    assert main(['analyze', '--config', path, '--out', str(out)]) == EXIT_OK
    expected = config_hash(read_json(path))
    assert read_json(out / 'report.json')["config_hash"] == expected
    assert read_json(out / 'run.json')["config_hash"] == expected


def test_density_config_loads():
    config = load_config(os.path.join(DATA, 'densities.json'))
    assert config.model.k == 3
    assert config.model.cycle.qs[0].size == 256
    assert config.params["seed"] == 7


if __name__ == "__main__":
    pytest.main([__file__])
