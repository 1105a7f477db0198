#!/usr/bin/env python3
"""
Command-line entry point: load a JSON model config, run one analysis and write
machine-readable results.

    python3 kingman_cli.py analyze --config data/e4.json --out outputs
"""
import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from genfun import GenFunError, weight_generating_function
from limits import (
    CONJECTURE_LABEL,
    PropertyViolation,
    check_windows,
    conjecture_experiment,
    default_windows,
    eigen_check,
    limit_laws,
    run_checks,
    verify_convergence,
)
from measures import Measure, MeasureError, parse_measure_literal, to_literal
from model_catalog import preset
from recursion import (
    ModelError,
    ModelInstance,
    SelectionCycle,
    iterate,
    make_cycle,
    make_model,
    make_selection,
)
from spectral import (
    SpectralError,
    build_A,
    find_zc,
    gamma2,
    perron,
    psi,
    real_eigen_census,
    sweep,
)

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0.0"
SCHEMA_VERSION = 1
OUTPUT_FOLDER = 'outputs'
CRITERION_SAMPLES = 200
# Samples this close to rho = 1 are not sign-tested
CRITERION_TIE = 1e-9

DEFAULT_PARAMS: Dict[str, Any] = {
    "horizon": 2000,
    "windows": None,
    "z_grid": None,
    "z_fractions": [0.25, 0.5, 0.9],
    "N": 400,
    "seed": 0,
    "tolerance": 1e-8,
    "workers": 4,
}

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_PROPERTY = 3


class ConfigError(ValueError):
    """Invalid config; `path` is the dotted location of the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True, eq=False)
class RunConfig:
    path: str
    raw: Dict[str, Any]
    model: ModelInstance
    selection: Optional[SelectionCycle]
    params: Dict[str, Any]
    config_hash: str


def config_hash(raw: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode('utf-8')).hexdigest()


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _load_measure(literal: Any, path: str) -> Measure:
    try:
        return parse_measure_literal(literal)
    except MeasureError as e:
        raise ConfigError(path, str(e))


def _load_model(spec: Any) -> ModelInstance:
    if not isinstance(spec, dict):
        raise ConfigError("model", "must be an object")
    if "preset" in spec:
        try:
            return preset(spec["preset"])
        except ModelError as e:
            raise ConfigError("model.preset", str(e))

    environments = spec.get("environments")
    if not isinstance(environments, list) or not environments:
        raise ConfigError("model.environments", "must be a non-empty list")
    if "k" in spec and (not _is_int(spec["k"]) or spec["k"] != len(environments)):
        raise ConfigError("model.k", f"must equal the number of environments ({len(environments)})")

    envs = []
    for i, env in enumerate(environments):
        path = f"model.environments[{i}]"
        if not isinstance(env, dict):
            raise ConfigError(path, "must be an object with 'beta' and 'q'")
        beta = env.get("beta")
        if not _is_number(beta) or not 0.0 < beta < 1.0:
            raise ConfigError(f"{path}.beta", f"must lie strictly inside (0, 1), got {beta!r}")
        if "q" not in env:
            raise ConfigError(f"{path}.q", "missing")
        envs.append((float(beta), _load_measure(env["q"], f"{path}.q")))

    if "p0" not in spec:
        raise ConfigError("model.p0", "missing")
    p0 = _load_measure(spec["p0"], "model.p0")
    try:
        cycle = make_cycle(envs)
    except ModelError as e:
        raise ConfigError("model.environments", str(e))
    try:
        return make_model(cycle, p0)
    except ModelError as e:
        raise ConfigError("model.p0", str(e))


def _load_selection(spec: Any, k: int) -> Optional[SelectionCycle]:
    if spec is None:
        return None
    if not isinstance(spec, list) or not all(isinstance(s, dict) for s in spec):
        raise ConfigError("selection", "must be a list of selection map objects")
    try:
        return make_selection(spec, k)
    except ModelError as e:
        raise ConfigError("selection", str(e))


def _load_params(spec: Any, overrides: Dict[str, Any]) -> Dict[str, Any]:
    if spec is None:
        spec = {}
    if not isinstance(spec, dict):
        raise ConfigError("params", "must be an object")
    unknown = sorted(set(spec) - set(DEFAULT_PARAMS))
    if unknown:
        raise ConfigError(f"params.{unknown[0]}", "unknown parameter")
    params = dict(DEFAULT_PARAMS)
    params.update(spec)
    # Command-line flags win over the file
    params.update({key: value for key, value in overrides.items() if value is not None})

    for key in ("horizon", "seed"):
        if not _is_int(params[key]) or params[key] < 0:
            raise ConfigError(f"params.{key}", "must be a non-negative integer")
    for key in ("N", "workers"):
        if not _is_int(params[key]) or params[key] < 1:
            raise ConfigError(f"params.{key}", "must be a positive integer")
    if not _is_number(params["tolerance"]) or params["tolerance"] <= 0.0:
        raise ConfigError("params.tolerance", "must be a positive number")

    windows = params["windows"]
    if windows is not None:
        if not isinstance(windows, list) or not windows:
            raise ConfigError("params.windows", "must be a non-empty list of [lo, hi] intervals")
        for i, window in enumerate(windows):
            if (not isinstance(window, list) or len(window) != 2 or not all(_is_number(v) for v in window)
                    or not 0.0 <= window[0] <= window[1] <= 1.0):
                raise ConfigError(f"params.windows[{i}]", "must be [lo, hi] with 0 <= lo <= hi <= 1")

    fractions = params["z_fractions"]
    if not isinstance(fractions, list) or not fractions or not all(_is_number(f) and 0.0 <= f < 1.0 for f in fractions):
        raise ConfigError("params.z_fractions", "must be a non-empty list of numbers in [0, 1)")

    grid = params["z_grid"]
    if grid is not None:
        if isinstance(grid, list):
            if not grid or not all(_is_number(z) and z >= 0.0 for z in grid):
                raise ConfigError("params.z_grid", "must list non-negative numbers")
        elif isinstance(grid, dict):
            if set(grid) - {"start", "stop", "step"} or not all(_is_number(v) for v in grid.values()):
                raise ConfigError("params.z_grid", "accepts numeric 'start', 'stop' and 'step' only")
            if grid.get("step", 0.01) <= 0.0:
                raise ConfigError("params.z_grid.step", "must be positive")
        else:
            raise ConfigError("params.z_grid", "must be a list or a {start, stop, step} object")
    return params


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read and validate a JSON config; densities are discretized here.

    Args:
        path: Path to the JSON config file
        overrides: Command-line values replacing the matching params (None entries are ignored)

    Returns:
        RunConfig with the validated model, selection, params and config hash

    Raises:
        ConfigError: naming the dotted path of the first offending field
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    # Check the envelope before the model
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError("schema", f"expected {SCHEMA_VERSION}, got {raw.get('schema')!r}")
    unknown = sorted(set(raw) - {"schema", "model", "selection", "params"})
    if unknown:
        raise ConfigError(unknown[0], "unknown field")

    model = _load_model(raw.get("model"))
    selection = _load_selection(raw.get("selection"), model.k)
    params = _load_params(raw.get("params"), overrides or {})
    # The hash covers the file as written, before defaults are filled in
    digest = config_hash(raw)
    logger.info(f"Loaded config {path} (k={model.k}, eta0={model.eta0}, sha256 {digest[:12]})")
    return RunConfig(path=path, raw=raw, model=model, selection=selection, params=params, config_hash=digest)


def _format(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return ''
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return '%.17g' % value
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, Measure):
        return to_literal(value)
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def write_csv(path: str, header: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=list(header), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(row.get(key)) for key in header})
    logger.info(f"Wrote {len(rows)} rows to {path}")


def write_json(path: str, document: Dict[str, Any]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_jsonable(document), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote {path}")


def _envelope(config: RunConfig, command: str) -> Dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "artifact_version": ARTIFACT_VERSION,
        "config_hash": config.config_hash,
        "command": command,
        "params": config.params,
    }


def _write_manifest(config: RunConfig, out_dir: str, command: str, files: List[str]) -> None:
    document = _envelope(config, command)
    document["files"] = sorted(files)
    write_json(os.path.join(out_dir, 'run.json'), document)


def _windows(config: RunConfig) -> Optional[List[tuple]]:
    windows = config.params["windows"]
    return [tuple(w) for w in windows] if windows else None


def _criterion_sample(model: ModelInstance, seed: int, samples: int = CRITERION_SAMPLES) -> Dict[str, Any]:
    """Sign agreement of 1 - rho, Psi (and Gamma_2 for k = 2) at random z in [0, 1/eta_q)."""
    rng = np.random.default_rng(seed)
    tested = 0
    disagreements = 0
    for _ in range(samples):
        z = float(rng.uniform(0.0, 1.0 / model.eta_q) * (1.0 - 1e-9))
        A = build_A(model.cycle, z)
        if not A.finite:
            continue
        gap = 1.0 - perron(A).rho
        if abs(gap) < CRITERION_TIE:
            continue
        tested += 1
        signs = {np.sign(gap), np.sign(psi(model.cycle, z))}
        if model.k == 2:
            signs.add(np.sign(gamma2(model.cycle, z)))
        if len(signs) != 1:
            disagreements += 1
    return {"value": disagreements, "tolerance": 0, "samples": tested, "seed": seed, "pass": disagreements == 0}


def cmd_analyze(config: RunConfig, out_dir: str) -> int:
    model = config.model
    report = limit_laws(model)
    critical = report.critical
    # Closed-form checks, then the randomized and simulation-based ones
    checks = run_checks(model, report)
    checks["criterion_equivalence"] = _criterion_sample(model, config.params["seed"])
    checks["eigen_consistency"] = eigen_check(model, report)
    census = real_eigen_census(build_A(model.cycle, critical.z_c))
    checks["real_eigen_census"] = {"value": census, "tolerance": 1, "pass": census <= 1}

    document = _envelope(config, "analyze")
    document.update({
        "k": model.k,
        "eta0": model.eta0,
        "z_c": critical.z_c,
        "regime": critical.regime,
        "alpha": critical.alpha,
        "U": critical.U,
        "wbar": report.wbars,
        "zs": report.zs,
        "zbar": report.zbar,
        "zbar_eta0": report.zbar_check,
        "pi": list(report.pis),
        "checks": checks,
    })
    write_json(os.path.join(out_dir, 'report.json'), document)
    _write_manifest(config, out_dir, "analyze", ['report.json'])

    failed = sorted(name for name, check in checks.items() if not check["pass"])
    # Print summary
    print(f"\nAnalysis Summary:")
    print(f"Regime: {critical.regime}")
    print(f"z_c: {critical.z_c:.12g}")
    print(f"alpha: {critical.alpha:.12g}")
    print(f"Limiting mean fitness: {', '.join(f'{w:.9g}' for w in report.wbars)}")
    print(f"Checks passed: {len(checks) - len(failed)}/{len(checks)}")
    if failed:
        print(f"Failed checks: {', '.join(failed)}")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_simulate(config: RunConfig, out_dir: str) -> int:
    model = config.model
    horizon = config.params["horizon"]
    report = limit_laws(model)
    windows = _windows(config) or default_windows(model, report)
    trajectory = iterate(model, horizon, reference=report.pis, windows=windows[:1])

    header = ["n", "i", "w_n", "log_W_n", "mass_at_eta0", "tv_to_limit"]
    rows = [{
        "n": n,
        "i": n % model.k,
        "w_n": trajectory.w[n],
        "log_W_n": trajectory.log_W[n],
        "mass_at_eta0": trajectory.mass_at_atom[n],
        "tv_to_limit": trajectory.tv[n, 0],
    } for n in range(horizon + 1)]
    write_csv(os.path.join(out_dir, 'trajectory.csv'), header, rows)
    _write_manifest(config, out_dir, "simulate", ['trajectory.csv'])

    print(f"\nSimulation Summary:")
    print(f"Steps: {horizon}")
    print(f"Final mean fitness: {trajectory.w[-1]:.12g}")
    print(f"Settled at step: {trajectory.converged_at if trajectory.converged_at is not None else 'not detected'}")
    return EXIT_OK


def cmd_verify(config: RunConfig, out_dir: str) -> int:
    model = config.model
    horizon = config.params["horizon"]
    if horizon % model.k:
        raise ConfigError("params.horizon", f"must be a multiple of k={model.k}")
    report = limit_laws(model)
    windows = _windows(config)
    if windows:
        try:
            windows = check_windows(model, report, windows)
        except ModelError as e:
            raise ConfigError("params.windows", str(e))
    result = verify_convergence(model, horizon, windows=windows, report=report,
                                tolerance=config.params["tolerance"], workers=config.params["workers"])
    trajectory = result.pop("trajectory")

    # One row per step and window
    header = ["n", "i", "window_lo", "window_hi", "tv", "mass_at_eta0"]
    rows = []
    for n in range(horizon + 1):
        for m, (lo, hi) in enumerate(trajectory.windows):
            rows.append({"n": n, "i": n % model.k, "window_lo": lo, "window_hi": hi,
                         "tv": trajectory.tv[n, m], "mass_at_eta0": trajectory.mass_at_atom[n]})
    write_csv(os.path.join(out_dir, 'tv_gaps.csv'), header, rows)

    document = _envelope(config, "verify")
    document.update(result)
    write_json(os.path.join(out_dir, 'verify.json'), document)
    _write_manifest(config, out_dir, "verify", ['tv_gaps.csv', 'verify.json'])

    print(f"\nVerification Summary:")
    for residue in result["residues"]:
        gaps = ', '.join(f"{w['final_tv']:.3e}" for w in residue["windows"])
        print(f"Residue {residue['residue']}: final TV {gaps}, atom gap {residue['atom_gap']:.3e}")
    print(f"Result: {'pass' if result['pass'] else 'FAIL'}")
    return EXIT_OK if result["pass"] else EXIT_PROPERTY


def z_grid(config: RunConfig) -> List[float]:
    grid = config.params["z_grid"]
    if isinstance(grid, list):
        return sorted(float(z) for z in grid)
    grid = grid or {}
    # Default grid runs from 0 to 1/eta0 in steps of 0.01
    start = float(grid.get("start", 0.0))
    stop = float(grid.get("stop", 1.0 / config.model.eta0))
    step = float(grid.get("step", 0.01))
    if stop < start:
        raise ConfigError("params.z_grid", "stop must not be below start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [min(start + step * i, stop) for i in range(count)]


def cmd_sweep(config: RunConfig, out_dir: str) -> int:
    model = config.model
    limit = 1.0 / model.eta_q
    grid = z_grid(config)
    if grid and grid[-1] > limit * (1.0 + 1e-12):
        raise ConfigError("params.z_grid", f"z must not exceed 1/eta_q = {limit}")
    rows = sweep(model.cycle, grid, workers=config.params["workers"])
    header = ["z", "rho", "psi", "gamma2_if_k2", "min_rhoj", "max_rhoj"]
    write_csv(os.path.join(out_dir, 'sweep.csv'), header, rows)
    _write_manifest(config, out_dir, "sweep", ['sweep.csv'])

    print(f"\nSweep Summary:")
    print(f"Points: {len(rows)} on [{grid[0]:.6g}, {grid[-1]:.6g}]")
    below = [row["z"] for row in rows if row["rho"] <= 1.0]
    print(f"Largest evaluated z with rho <= 1: {max(below):.6g}" if below else "No point with rho <= 1")
    return EXIT_OK


def cmd_genfun(config: RunConfig, out_dir: str) -> int:
    model = config.model
    critical = find_zc(model)
    N = config.params["N"]
    header = ["z", "residue", "series_value", "closed_value", "tail_bound", "recurrence_residual"]
    rows = []
    # Evaluate at fixed fractions of z_c, inside the convergence disk
    for fraction in config.params["z_fractions"]:
        z = fraction * critical.z_c
        result = weight_generating_function(model, z, N, critical)
        for i in range(model.k):
            rows.append({"z": z, "residue": i, "series_value": result.series[i], "closed_value": result.closed[i],
                         "tail_bound": result.tail[i], "recurrence_residual": result.recurrence_residual})
    write_csv(os.path.join(out_dir, 'genfun.csv'), header, rows)
    _write_manifest(config, out_dir, "genfun", ['genfun.csv'])

    print(f"\nGenerating Function Summary:")
    print(f"z_c: {critical.z_c:.12g}, N: {N}")
    print(f"Worst recurrence residual: {max(row['recurrence_residual'] for row in rows):.3e}")
    return EXIT_OK


def cmd_conjecture(config: RunConfig, out_dir: str) -> int:
    if config.selection is None:
        raise ConfigError("selection", "required for the conjecture experiment")
    model = config.model
    result = conjecture_experiment(model, config.selection, config.params["horizon"], windows=_windows(config))
    report = result["report"]
    critical = report.critical

    document = _envelope(config, "conjecture")
    document.update({
        "label": CONJECTURE_LABEL,
        "x0": result["x0"],
        "selection_at_x0": result["selection_at_x0"],
        "points_at_max": result["points_at_max"],
        "z_c": critical.z_c,
        "regime": critical.regime,
        "alpha": critical.alpha,
        "U": critical.U,
        "wbar": report.wbars,
        "pi": list(report.pis),
        "windows": result["windows"],
        "residues": result["residues"],
    })
    write_json(os.path.join(out_dir, 'conjecture.json'), document)
    _write_manifest(config, out_dir, "conjecture", ['conjecture.json'])

    print(f"\nConjecture Experiment Summary ({CONJECTURE_LABEL}):")
    print(f"x0: {result['x0']:.12g}, z_c: {critical.z_c:.12g}, regime: {critical.regime}")
    for residue in result["residues"]:
        print(f"Residue {residue['residue']}: final TV {residue['final_tv']}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, str], int]] = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "genfun": cmd_genfun,
    "conjecture": cmd_conjecture,
}

NUMERIC_ERRORS = (MeasureError, ModelError, SpectralError, GenFunError, FloatingPointError, np.linalg.LinAlgError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Periodic Kingman mutation-selection model: simulation and condensation analysis')
    parser.add_argument('command', choices=sorted(COMMANDS), help='Analysis to run')
    parser.add_argument('--config', '-c', required=True, help='JSON model config (see data/*.json)')
    parser.add_argument('--out', '-o', default=OUTPUT_FOLDER, help='Output directory')
    parser.add_argument('--horizon', type=int, default=None, help='Number of steps (overrides params.horizon)')
    parser.add_argument('--seed', type=int, default=None, help='Seed for randomized checks (overrides params.seed)')
    parser.add_argument('--workers', '-w', type=int, default=None, help='Number of worker threads')
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        # Load config, then dispatch; every failure maps to an exit code
        config = load_config(args.config, {"horizon": args.horizon, "seed": args.seed, "workers": args.workers})
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](config, args.out)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        print(f"Error: {e}")
        return EXIT_CONFIG
    except PropertyViolation as e:
        logger.error(f"Property violation: {e}")
        print(f"Error: {e}")
        return EXIT_PROPERTY
    except NUMERIC_ERRORS as e:
        logger.error(f"Numeric failure: {e}")
        print(f"Error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
