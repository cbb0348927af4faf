"""
Command-line front end.

    stochflow SUBCOMMAND --config run.toml [--seed N] [--threads N] [--out DIR]

Subcommands: simulate, validate-basis, rate, laplace, match, posterior-check.
Configs are TOML (or JSON, e.g. the ``resolved_config.json`` every run
writes).  Every run writes machine-readable files plus ``summary.txt`` into
``--out`` and echoes the summary on stdout.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(blow-up or weight underflow), 4 non-convergence (results still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import imaging
from .control_flow import ControlPath
from .errors import (BlowUpError, ConfigurationError, IntegrityError, StochFlowError,
                     UnderflowError)
from .flow_sim import NoisePath, simulate_flow
from .kernels import basis_from_config, lattice, validate_basis
from .ldp_lab import functional_from_config, ldp_convergence_report
from .rate_fn import EndpointProblem, endpoint_rate, rate_lower_bound_scan

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4
MAX_SEED = 2**64

REQUIRED = object()

SECTIONS = {
    "simulate": {
        "points": REQUIRED, "t1": REQUIRED, "dt": REQUIRED, "t0": 0.0, "eps": 0.0,
        "with_jacobians": False, "control": None, "noise_path": 0,
    },
    "validate_basis": {"box": None, "per_axis": None, "times": None},
    "rate": {
        "starts": REQUIRED, "targets": REQUIRED, "T": 1.0, "n_steps": 20,
        "penalty_schedule": [1e1, 1e2, 1e3, 1e4], "multistart": 5, "tol": 1e-6,
        "tol_endpoint": 1e-3, "init_scale": 0.5, "maxiter": 2000, "scan_levels": None,
    },
    "laplace": {
        "eps_list": REQUIRED, "n_samples": REQUIRED, "points": REQUIRED,
        "functional": REQUIRED, "T": 1.0, "dt": 0.01, "n_control_steps": 20,
        "variational": None,
    },
    "imaging": {
        "template": REQUIRED, "cells": REQUIRED, "n_steps": 20, "convention": "integral",
        "data": None, "synthesize": None,
    },
    "match": {"multistart": 5, "tol": 1e-10, "maxiter": 1000, "init_scale": 0.5,
              "lattice_size": 21},
    "posterior_check": {
        "eps_list": REQUIRED, "n_samples": REQUIRED, "functional": {"kind": "zero"},
        "prior_dt": None, "multistart": 3, "tol": 1e-10, "maxiter": 1000,
    },
}

COMMAND_SECTIONS = {
    "simulate": ("basis", "simulate"),
    "validate-basis": ("basis", "validate_basis"),
    "rate": ("basis", "rate"),
    "laplace": ("basis", "laplace"),
    "match": ("basis", "imaging", "match"),
    "posterior-check": ("basis", "imaging", "posterior_check"),
}

TOP_LEVEL = {"schema_version", "seed", "command"} | set(SECTIONS) | {"basis"}


# --------------------------------------------------------------------------- config

def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigurationError(str(exc), key="--config") from exc
    try:
        if str(path).endswith(".json"):
            return json.loads(raw.decode())
        return tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot parse: {exc}", key="--config") from exc


def _section(cfg, name):
    table = cfg.get(name)
    if not isinstance(table, dict):
        raise ConfigurationError("missing table", key=name)
    spec = SECTIONS[name]
    unknown = sorted(set(table) - set(spec))
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown}", key=name)
    out = {}
    for key, default in spec.items():
        value = table.get(key)
        if value is None:
            if default is REQUIRED:
                raise ConfigurationError("required key is missing", key=f"{name}.{key}")
            value = default
        out[key] = value
    return out


def resolve_config(cfg, command, seed=None):
    """Validate ``cfg`` for ``command`` and return it with every default filled in."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a table", key="config")
    unknown = sorted(set(cfg) - TOP_LEVEL)
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown}", key="config")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"expected {SCHEMA_VERSION}, got {version!r}",
                                 key="schema_version")
    if cfg.get("command", command) != command:
        raise ConfigurationError(f"config was resolved for {cfg['command']!r}", key="command")
    seed = cfg.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < MAX_SEED:
        raise ConfigurationError("seed must be an integer in [0, 2^64)", key="seed")
    out = {"schema_version": SCHEMA_VERSION, "seed": seed, "command": command}
    for name in COMMAND_SECTIONS[command]:
        if name == "basis":
            if not isinstance(cfg.get("basis"), dict):
                raise ConfigurationError("missing table", key="basis")
            out["basis"] = dict(cfg["basis"])
        else:
            out[name] = _section(cfg, name)
    return out


def _build_basis(rcfg):
    try:
        return basis_from_config(rcfg["basis"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StochFlowError):
            raise ConfigurationError(str(exc), key="basis") from exc
        raise ConfigurationError(f"invalid basis: {exc!r}", key="basis") from exc


def _points(value, dim, key):
    try:
        pts = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("points must be numeric", key=key) from exc
    if pts.ndim == 1 and dim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != dim or pts.shape[0] == 0:
        raise ConfigurationError(f"expected a nonempty list of {dim}-vectors", key=key)
    return pts


def _control(spec, n_modes, n_steps, dt, key):
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigurationError("control must be a table", key=key)
    unknown = sorted(set(spec) - {"levels", "values", "csv"})
    if unknown or len(spec) != 1:
        raise ConfigurationError("give exactly one of levels, values, csv", key=key)
    if "levels" in spec:
        levels = np.atleast_1d(np.asarray(spec["levels"], dtype=float))
        u = ControlPath.constant(levels, n_steps, dt)
    elif "values" in spec:
        u = ControlPath(np.asarray(spec["values"], dtype=float), dt)
    else:
        u = ControlPath.from_csv(spec["csv"], dt)
    if u.n_modes != n_modes:
        raise ConfigurationError(f"control has {u.n_modes} modes, basis has {n_modes}", key=key)
    return u


# --------------------------------------------------------------------------- output

def _fmt(x):
    return repr(float(x))


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", newline="\n") as fh:
        fh.write(text)


def _write_bytes(out_dir, name, data):
    with open(os.path.join(out_dir, name), "wb") as fh:
        fh.write(data)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _table_csv(columns, rows):
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _finish(out_dir, rcfg, result, summary_lines):
    _write(out_dir, "resolved_config.json", _dump(rcfg))
    _write(out_dir, "report.json", _dump({"config": rcfg, "result": result}))
    summary = "\n".join(summary_lines) + "\n"
    _write(out_dir, "summary.txt", summary)
    sys.stdout.write(summary)


# --------------------------------------------------------------------------- commands

def cmd_simulate(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    c = rcfg["simulate"]
    dt, t0, t1 = float(c["dt"]), float(c["t0"]), float(c["t1"])
    pts = _points(c["points"], basis.dim, "simulate.points")
    n_total = int(round(t1 / dt))
    control = _control(c["control"], basis.n_modes, n_total, dt, "simulate.control")
    noise = NoisePath.generate(basis.n_modes, n_total, dt, rcfg["seed"], int(c["noise_path"]))
    traj = simulate_flow(basis, control, float(c["eps"]), pts, t0, t1, noise,
                         with_jacobians=bool(c["with_jacobians"]))
    traj.meta["seed"] = rcfg["seed"]
    _write(out_dir, "trajectory.csv", traj.to_csv())
    _write_bytes(out_dir, "trajectory.bin", traj.to_bytes())
    end = traj.endpoint
    disp = float(np.max(np.linalg.norm(end - pts, axis=-1)))
    result = {"n_points": traj.n_points, "n_steps": traj.n_steps, "endpoint": end,
              "max_displacement": disp}
    if traj.jacobians is not None:
        result["min_det_jacobian"] = float(np.min(np.linalg.det(traj.jacobians)))
    _finish(out_dir, rcfg, result, [
        "simulate",
        f"  points={traj.n_points} steps={traj.n_steps} eps={c['eps']}",
        f"  max displacement {disp:.6g}",
    ])
    return EXIT_OK


def cmd_validate_basis(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    c = rcfg["validate_basis"]
    box = c["box"]
    if box is None:
        box = (basis.support_box.tolist() if basis.support_box is not None
               else [[-1.0, 1.0]] * basis.dim)
        c["box"] = box
    if c["per_axis"] is None:
        c["per_axis"] = 20 if basis.dim == 1 else 5
    if c["times"] is None:
        c["times"] = [0.0, 0.5 * basis.T, basis.T]
    grid = lattice(np.asarray(box, dtype=float).reshape(basis.dim, 2), int(c["per_axis"]))
    report = validate_basis(basis, grid, c["times"])
    result = report.to_dict()
    result["psd_ok"] = report.psd_ok
    _finish(out_dir, rcfg, result, [
        "validate-basis",
        f"  modes={basis.n_modes} grid points={grid.shape[0]}",
        f"  gram eigenvalues [{report.gram_min_eig:.6g}, {report.gram_max_eig:.6g}] "
        f"psd={'yes' if report.psd_ok else 'NO'}",
        f"  sup trace {report.trace_sup:.6g}",
    ])
    return EXIT_OK


def cmd_rate(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    c = rcfg["rate"]
    problem = EndpointProblem(
        basis, _points(c["starts"], basis.dim, "rate.starts"),
        _points(c["targets"], basis.dim, "rate.targets"), float(c["T"]), int(c["n_steps"]),
        tuple(float(w) for w in c["penalty_schedule"]), int(c["multistart"]), float(c["tol"]),
        float(c["tol_endpoint"]), rcfg["seed"], float(c["init_scale"]), int(c["maxiter"]))
    res = endpoint_rate(problem, threads=threads)
    _write(out_dir, "u_star.csv", res.u_star.to_csv())
    result = res.to_dict()
    lines = ["rate", f"  value {res.value:.10g}  residual {res.residual:.3g}",
             f"  converged={res.converged} reachable={res.reachable}"]
    if c["scan_levels"] is not None:
        scan = rate_lower_bound_scan(problem, c["scan_levels"])
        cols = [f"u_{l + 1}" for l in range(basis.n_modes)] + ["cost", "residual"]
        _write(out_dir, "scan.csv", _table_csv(cols, [dict(zip(cols, r)) for r in scan.table]))
        result["scan"] = {"best_value": scan.best_value, "best_u": scan.best_u,
                          "best_residual": scan.best_residual, "feasible": scan.feasible}
        lines.append(f"  lattice scan best {scan.best_value:.6g} (feasible={scan.feasible})")
    _finish(out_dir, rcfg, result, lines)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_laplace(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    c = rcfg["laplace"]
    F = functional_from_config(c["functional"])
    pts = _points(c["points"], basis.dim, "laplace.points")
    if not c["eps_list"]:
        raise ConfigurationError("eps_list is empty", key="laplace.eps_list")
    report = ldp_convergence_report(basis, F, c["eps_list"], int(c["n_samples"]), rcfg["seed"],
                                    pts, float(c["T"]), float(c["dt"]), threads=threads,
                                    variational=c["variational"],
                                    n_control_steps=int(c["n_control_steps"]))
    _write(out_dir, "convergence.csv", report.to_csv())
    _write(out_dir, "series.json", report.series_json() + "\n")
    lines = ["laplace", f"  variational value {report.variational:.8g}"]
    lines += [f"  eps={r['eps']:<8g} estimate {r['estimate']:.6f} +- {r['stderr']:.2g}"
              f"  gap {r['gap']:.4g}" for r in report.rows]
    _finish(out_dir, rcfg, {"variational": report.variational, "rows": report.rows}, lines)
    return EXIT_OK


def _imaging_problem(rcfg, basis):
    c = rcfg["imaging"]
    try:
        template = imaging.template_from_config(c["template"])
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"invalid template: {exc!r}", key="imaging.template") from exc
    except StochFlowError as exc:
        raise ConfigurationError(str(exc), key="imaging.template") from exc
    try:
        partition = imaging.CellPartition.uniform(c["cells"])
    except StochFlowError as exc:
        raise ConfigurationError(str(exc), key="imaging.cells") from exc
    n_steps = int(c["n_steps"])
    problem = imaging.MatchProblem(template, partition, None, basis, n_steps=n_steps,
                                   convention=c["convention"])
    if (c["data"] is None) == (c["synthesize"] is None):
        raise ConfigurationError("give exactly one of data, synthesize", key="imaging")
    if c["data"] is not None:
        return problem.with_data(c["data"]), None
    syn = c["synthesize"]
    unknown = sorted(set(syn) - {"u_true", "eps", "prior_draw"})
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown}", key="imaging.synthesize")
    u_true = _control({"levels": syn["u_true"]} if "u_true" in syn else None,
                      basis.n_modes, n_steps, problem.dt, "imaging.synthesize.u_true")
    data = imaging.synthesize_data(problem, u_true, float(syn.get("eps", 0.0)), rcfg["seed"],
                                   prior_draw=bool(syn.get("prior_draw", False)))
    return problem.with_data(data), u_true


def cmd_match(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    problem, u_true = _imaging_problem(rcfg, basis)
    c = rcfg["match"]
    res = imaging.solve_match(problem, int(c["multistart"]), rcfg["seed"], float(c["tol"]),
                              int(c["maxiter"]), float(c["init_scale"]), int(c["lattice_size"]))
    _write(out_dir, "u_star.csv", res.u_star.to_csv())
    _write(out_dir, "h_map.csv", res.h_map_csv())
    result = res.to_dict()
    result["data"] = problem.data
    lines = ["match", f"  J_d {res.objective:.10g} = reg {res.reg_term:.6g} + data "
             f"{res.data_term:.6g}", f"  converged={res.converged}"]
    if u_true is not None:
        jt = imaging.objective_Jd(problem, u_true)[0]
        result["objective_u_true"] = jt
        lines.append(f"  J_d(u_true) {jt:.10g}")
    _finish(out_dir, rcfg, result, lines)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def _posterior_functional(spec, dim):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "lattice_distance":
        unknown = sorted(set(spec) - {"per_axis", "weight", "box"})
        if unknown:
            raise ConfigurationError(f"unknown keys {unknown}", key="posterior_check.functional")
        box = np.asarray(spec.get("box", [[0.1, 0.9]] * dim), dtype=float).reshape(dim, 2)
        pts = lattice(box, int(spec.get("per_axis", 9)))
        return imaging.LatticeDistanceFunctional(pts, float(spec.get("weight", 1.0))), pts
    if kind in ("zero", "constant"):
        return functional_from_config({"kind": kind, **spec}), None
    raise ConfigurationError(f"unsupported functional {kind!r}",
                             key="posterior_check.functional.kind")


def cmd_posterior_check(rcfg, out_dir, threads):
    basis = _build_basis(rcfg)
    problem, _ = _imaging_problem(rcfg, basis)
    c = rcfg["posterior_check"]
    F, pts = _posterior_functional(c["functional"], basis.dim)
    rows = imaging.posterior_laplace_check(
        problem, F, pts, c["eps_list"], int(c["n_samples"]), rcfg["seed"],
        prior_dt=c["prior_dt"], threads=threads, multistart=int(c["multistart"]),
        tol=float(c["tol"]), maxiter=int(c["maxiter"]))
    cols = ["eps", "estimate", "term1", "term2", "stderr", "ess", "target", "gap",
            "target_cells", "gap_cells"]
    _write(out_dir, "table.csv", _table_csv(cols, rows))
    _write(out_dir, "series.json", _dump({"x": [r["eps"] for r in rows],
                                          "y": [r["gap"] for r in rows],
                                          "x_label": "eps", "y_label": "gap"}))
    lines = ["posterior-check", f"  target {rows[0]['target']:.8g}"]
    lines += [f"  eps={r['eps']:<8g} estimate {r['estimate']:.6f} +- {r['stderr']:.2g}"
              f"  gap {r['gap']:.4g}" for r in rows]
    _finish(out_dir, rcfg, {"rows": rows}, lines)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "validate-basis": cmd_validate_basis,
    "rate": cmd_rate,
    "laplace": cmd_laplace,
    "match": cmd_match,
    "posterior-check": cmd_posterior_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="stochflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML or JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker cap (results do not depend on it)")
    parser.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigurationError("must be at least 1", key="--threads")
        rcfg = resolve_config(load_config(args.config), args.command, args.seed)
        os.makedirs(args.out, exist_ok=True)
        try:
            return COMMANDS[args.command](rcfg, args.out, args.threads)
        except ConfigurationError as exc:
            # name the config table the offending key lives in
            section = COMMAND_SECTIONS[args.command][-1]
            if exc.key is not None and "." not in exc.key and not exc.key.startswith("-"):
                raise ConfigurationError(str(exc).split(": ", 1)[-1],
                                         key=f"{section}.{exc.key}") from exc
            raise
    except (BlowUpError, UnderflowError, IntegrityError) as exc:
        print(f"stochflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StochFlowError, KeyError, TypeError, ValueError) as exc:
        print(f"stochflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
