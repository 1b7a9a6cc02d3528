"""Experiment front end.

Profiles bundle a full problem definition (grid, material, sensors,
excitation, truth field, noise, solver settings); a YAML config can override
any subset.  Subcommands assemble operators, build ground truth, generate
synthetic measurements, run the full-order and surrogate-driven solvers on
identical data, and emit tables plus field dumps for external plotting.
"""

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import yaml

from .irgnm import IrgnmConfig, irgnm_run, write_ledger
from .model import (
    ConfigError,
    Grid,
    LoadSignal,
    MaterialSpec,
    assemble_load,
    assemble_observation,
    assemble_operators,
)
from .objective import FomModel
from .rom import EnrichmentError
from .timestep import SolverError
from .tr import TrustRegionConfig, tr_irgnm, write_tr_ledger

# material constants are SI; time_scale (s per time unit) and length_scale
# (m per length unit) carry the nondimensionalization of the wave equation
PROFILES = {
    "desk2d": {
        "profile": "desk2d",
        "grid": {
            "extents": [[-15.0, 15.0], [-15.0, 15.0]],
            "cells": [30, 30],
            "dirichlet": ["xmin", "xmax", "ymin", "ymax"],
        },
        "material": {
            "lam": 2.18e10,
            "mu": 1.12e10,
            "rho": 2.70e3,
            "time_scale": 533.0e-6 / 16.0,
            "length_scale": 1.0 / 30.0,
            "parameter": "all",
        },
        "time": {"horizon": 16.0, "steps": 32, "zeta": 0.5},
        "observation": {
            "kind": "sensors",
            "layout": {"kind": "edge", "margin": 1, "stride": 1, "components": [0, 1]},
        },
        "excitation": {
            "amplitude": 100.0,
            "frequency": 0.5,
            "t_center": 2.0,
            "t_width": 1.0,
            "center": [0.0, 0.0],
            "width": 4.0,
        },
        "truth": {
            "background": 1.0,
            "defects": [
                {"type": "point", "value": 3.0, "center": [5.0, 0.0]},
                {"type": "point", "value": 2.0, "center": [-9.0, -1.0]},
            ],
        },
        "noise": {"level": 0.01, "seed": 20},
        "solver": {
            "tau": 2.0,
            "theta": 0.4,
            "big_theta": 1.95,
            "alpha_init": 1.0e-5,
            "max_outer": 60,
            "lower": 1.0e-20,
            "upper": 1.0e20,
            "tr": {
                "eta0": 0.5,
                "eta_max": 2.0,
                "beta2": 0.75,
                "beta3": 0.5,
                "max_rejections": 15,
                "eps_pod": 1.0e-10,
                "log_estimators": True,
            },
        },
    },
    "desk3d": {
        "profile": "desk3d",
        "grid": {
            "extents": [[-0.1, 0.1], [-15.0, 15.0], [-15.0, 15.0]],
            "cells": [2, 16, 16],
            "dirichlet": ["ymin", "ymax", "zmin", "zmax"],
        },
        "material": {
            "lam": 2.18e10,
            "mu": 1.12e10,
            "rho": 2.70e3,
            "time_scale": 533.0e-6 / 16.0,
            "length_scale": 1.0 / 30.0,
            "parameter": ["layer", 0, 0],
        },
        "time": {"horizon": 16.0, "steps": 16, "zeta": 0.5},
        "observation": {
            "kind": "sensors",
            "layout": {"kind": "edge", "margin": 1, "stride": 1, "components": [0]},
        },
        "excitation": {
            "amplitude": 100.0,
            "frequency": 0.5,
            "t_center": 2.0,
            "t_width": 1.0,
            "center": [0.0, 0.0, 0.0],
            "width": [0.25, 4.0, 4.0],
        },
        "truth": {
            "background": 1.0,
            "defects": [
                {"type": "point", "value": 3.0, "center": [5.625, 0.0]},
                {"type": "point", "value": 2.0, "center": [-9.375, -1.875]},
            ],
        },
        "noise": {"level": 0.01, "seed": 20},
        "solver": {
            "tau": 2.0,
            "theta": 0.4,
            "big_theta": 1.95,
            "alpha_init": 1.0e-5,
            "max_outer": 60,
            "lower": 1.0e-20,
            "upper": 1.0e20,
            "tr": {
                "eta0": 0.5,
                "eta_max": 2.0,
                "beta2": 0.75,
                "beta3": 0.5,
                "max_rejections": 15,
                "eps_pod": 1.0e-10,
                "log_estimators": True,
            },
        },
    },
    # full-size configuration; hours of runtime, deliberately not exercised in CI
    "paper3d": {
        "profile": "paper3d",
        "grid": {
            "extents": [[-0.1, 0.1], [-15.0, 15.0], [-15.0, 15.0]],
            "cells": [4, 60, 60],
            "dirichlet": ["ymin", "ymax", "zmin", "zmax"],
        },
        "material": {
            "lam": 2.18e10,
            "mu": 1.12e10,
            "rho": 2.70e3,
            "time_scale": 533.0e-6 / 16.0,
            "length_scale": 1.0 / 30.0,
            "parameter": ["layer", 0, 0],
        },
        "time": {"horizon": 16.0, "steps": 64, "zeta": 0.5},
        "observation": {
            "kind": "sensors",
            "layout": {"kind": "edge", "margin": 2, "stride": 2, "components": [0]},
        },
        "excitation": {
            "amplitude": 100.0,
            "frequency": 0.5,
            "t_center": 2.0,
            "t_width": 1.0,
            "center": [0.0, 0.0, 0.0],
            "width": [0.25, 4.0, 4.0],
        },
        "truth": {
            "background": 1.0,
            "defects": [
                {"type": "point", "value": 3.0, "center": [5.0, 0.0]},
                {"type": "point", "value": 2.0, "center": [-9.0, -1.0]},
            ],
        },
        "noise": {"level": 0.01, "seed": 20},
        "solver": {
            "tau": 1.1,
            "theta": 0.4,
            "big_theta": 1.95,
            "alpha_init": 1.0e-5,
            "max_outer": 100,
            "lower": 1.0e-20,
            "upper": 1.0e20,
            "tr": {
                "eta0": 0.5,
                "eta_max": 2.0,
                "beta2": 0.75,
                "beta3": 0.5,
                "max_rejections": 15,
                "eps_pod": 1.0e-10,
                "log_estimators": True,
            },
        },
    },
}


def deep_merge(base, override):
    """Nested dict merge; override wins, non-dict values replace wholesale."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(profile="desk2d", config_path=None, seed=None):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = copy.deepcopy(PROFILES[profile])
    if config_path is not None:
        try:
            with open(config_path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping at top level")
        if "profile" in user and user["profile"] != profile:
            if user["profile"] not in PROFILES:
                raise ConfigError(f"unknown profile {user['profile']!r}")
            cfg = copy.deepcopy(PROFILES[user["profile"]])
        cfg = deep_merge(cfg, user)
    if seed is not None:
        cfg["noise"]["seed"] = int(seed)
    return cfg


def scale_material(section):
    """Effective grid-unit Lame constants from SI values and the two scales.

    The wave equation rho u_tt = div(sigma) keeps its form when time and
    length are rescaled, with the stiffness multiplied by (t_scale/l_scale)^2
    and the density kept; omit the scales to pass constants through.
    """
    lam, mu, rho = section["lam"], section["mu"], section["rho"]
    ts = section.get("time_scale")
    ls = section.get("length_scale")
    if ts is None and ls is None:
        return lam, mu, rho
    if ts is None or ls is None:
        raise ConfigError("time_scale and length_scale must be given together")
    factor = (float(ts) / float(ls)) ** 2
    return lam * factor, mu * factor, rho


def _parameter_selector(raw):
    if raw == "all":
        return "all"
    if isinstance(raw, (list, tuple)) and raw:
        kind = raw[0]
        if kind == "layer":
            return ("layer", int(raw[1]), int(raw[2]))
        if kind == "nodes":
            return ("nodes", tuple(int(i) for i in raw[1]))
    raise ConfigError(f"unknown parameter selector {raw!r}")


def build_problem(cfg):
    """Assemble grid, operator family, observation, and load from a config."""
    g = cfg["grid"]
    grid = Grid(
        tuple(tuple(e) for e in g["extents"]),
        tuple(int(c) for c in g["cells"]),
        tuple(g.get("dirichlet", ())),
    )
    m = cfg["material"]
    lam, mu, rho = scale_material(m)
    material = MaterialSpec(
        lam, mu, rho, _parameter_selector(m.get("parameter", "all")),
        coefficient_stride=int(m.get("stride", 1)),
    )
    family = assemble_operators(grid, material)

    o = cfg["observation"]
    obs = assemble_observation(
        grid, family, o.get("kind", "full"), o.get("layout"), o.get("face")
    )

    t = cfg["time"]
    horizon, steps = float(t["horizon"]), int(t["steps"])
    if steps < 1:
        raise ConfigError("need at least one time step")
    dt = horizon / steps
    times = dt * np.arange(steps + 1)
    e = cfg["excitation"]
    signal = LoadSignal(
        amplitude=float(e.get("amplitude", 1.0)),
        direction=e.get("direction"),
        frequency=float(e.get("frequency", 0.5)),
        t_center=float(e.get("t_center", 2.0)),
        t_width=float(e.get("t_width", 1.0)),
        center=e.get("center"),
        width=e.get("width"),
    )
    load = assemble_load(grid, family, signal, times)
    return {
        "grid": grid,
        "family": family,
        "obs": obs,
        "load": load,
        "times": times,
        "dt": dt,
        "zeta": float(t.get("zeta", 0.5)),
    }


# -- ground truth --------------------------------------------------------------


def _param_plane(grid, family):
    """In-plane axes, logical shape, and node coordinates of the coefficient lattice."""
    selector = family.material.parameter
    if selector == "all":
        axes = list(range(grid.dim))
    elif selector[0] == "layer":
        axes = [a for a in range(grid.dim) if a != selector[1]]
    else:
        raise ConfigError("point/rect defects need an 'all' or 'layer' parameter set")
    shape = family.material.parameter_grid_shape(grid)
    coords = [
        np.linspace(grid.extents[a][0], grid.extents[a][1], n)
        for a, n in zip(axes, shape)
    ]
    return axes, shape, coords


def _locate(grid, axes, coords, center):
    """Nearest coefficient-lattice multi-index; center must lie inside the extents."""
    if len(center) != len(axes):
        raise ConfigError(
            f"defect center needs {len(axes)} coordinates, got {len(center)}"
        )
    idx = []
    for a, axis_coords, c in zip(axes, coords, center):
        lo, hi = grid.extents[a]
        pad = 1e-9 * (hi - lo)
        if not (lo - pad <= c <= hi + pad):
            raise ConfigError(f"defect center coordinate {c} outside extent ({lo}, {hi})")
        idx.append(int(np.argmin(np.abs(axis_coords - c))))
    return tuple(idx)


def build_truth(cfg, grid, family):
    """Coefficient field: background plus rectangles and smoothed point defects."""
    t = cfg.get("truth", {})
    q = np.full(family.n_params, float(t.get("background", 1.0)))
    defects = t.get("defects", [])
    if not defects:
        return q
    axes, shape, coords = _param_plane(grid, family)
    field = q.reshape(shape)
    background = float(t.get("background", 1.0))

    for spec in defects:
        kind = spec.get("type")
        value = float(spec["value"])
        if kind == "rect":
            extent = spec["extent"]
            if len(extent) != len(axes):
                raise ConfigError("rectangle extent rank does not match the layer")
            masks = []
            for axis_coords, (lo, hi) in zip(coords, extent):
                if not hi > lo:
                    raise ConfigError(f"degenerate rectangle side ({lo}, {hi})")
                masks.append((axis_coords >= lo) & (axis_coords <= hi))
            region = np.ones(shape, dtype=bool)
            for d, mask in enumerate(masks):
                region &= mask.reshape([-1 if i == d else 1 for i in range(len(shape))])
            if not region.any():
                raise ConfigError("rectangular inclusion misses every coefficient node")
            field[region] = value
        elif kind == "point":
            idx = _locate(grid, axes, coords, spec["center"])
            for n, i in zip(shape, idx):
                if i == 0 or i == n - 1:
                    raise ConfigError(
                        "point defect support leaves the coefficient layer"
                    )
            halfway = 0.5 * (value + background)
            for off in np.ndindex(*(3,) * len(idx)):
                pos = tuple(i + o - 1 for i, o in zip(idx, off))
                field[pos] = value if pos == idx else max(field[pos], halfway)
        else:
            raise ConfigError(f"unknown defect type {spec.get('type')!r}")
    return field.ravel()


# -- synthetic measurements ----------------------------------------------------


def generate_data(obs, dt, clean, level, seed):
    """Noisy observation trajectory with exact relative perturbation size.

    The perturbation is uniform componentwise, rescaled so its trajectory
    norm equals delta = level * ||clean||; the initial column stays exact
    since it never enters the objective.
    """
    if level < 0:
        raise ConfigError("noise level must be nonnegative")
    data = np.array(clean, dtype=float)
    if level == 0.0:
        return data, 0.0
    rng = np.random.default_rng(int(seed))
    xi = rng.uniform(-1.0, 1.0, size=(clean.shape[0], clean.shape[1] - 1))
    xi_norm = float(np.sqrt(dt * obs.obs_norm_sq_columns(xi).sum()))
    clean_norm = float(np.sqrt(dt * obs.obs_norm_sq_columns(clean[:, 1:]).sum()))
    delta = level * clean_norm
    data[:, 1:] = clean[:, 1:] + delta * xi / xi_norm
    return data, delta


def data_digest(data):
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()


def make_model(parts, data, solver):
    return FomModel(
        family=parts["family"],
        obs=parts["obs"],
        load=parts["load"],
        data=data,
        dt=parts["dt"],
        zeta=parts["zeta"],
        q_center=np.ones(parts["family"].n_params),
        lower=float(solver.get("lower", 1e-20)),
        upper=float(solver.get("upper", 1e20)),
    )


def irgnm_config(solver):
    return IrgnmConfig(
        tau=float(solver.get("tau", 1.1)),
        theta=float(solver.get("theta", 0.4)),
        big_theta=float(solver.get("big_theta", 1.95)),
        alpha_init=float(solver.get("alpha_init", 1e-5)),
        max_outer=int(solver.get("max_outer", 60)),
        max_seconds=solver.get("max_seconds"),
    ).validate()


def tr_config(solver):
    t = solver.get("tr", {})
    return TrustRegionConfig(
        eta0=float(t.get("eta0", 0.5)),
        eta_max=float(t.get("eta_max", 2.0)),
        beta2=float(t.get("beta2", 0.75)),
        beta3=float(t.get("beta3", 0.5)),
        max_outer=int(t.get("max_outer", solver.get("max_outer", 60))),
        max_rejections=int(t.get("max_rejections", 15)),
        eps_pod=float(t.get("eps_pod", 1e-10)),
        consistency_tol=float(t.get("consistency_tol", 1e-8)),
        log_estimators=bool(t.get("log_estimators", True)),
    ).validate()


# -- comparison runs -----------------------------------------------------------


def run_comparison(cfg, methods=("fom", "tr"), progress=print):
    """Run the requested solvers on one shared noisy data set.

    Returns a results dict; a solver failure in one method is recorded in its
    report (failed flag + error message) without discarding the other run.
    """
    parts = build_problem(cfg)
    family, obs = parts["family"], parts["obs"]
    q_truth = build_truth(cfg, parts["grid"], family)
    solver = cfg.get("solver", {})

    probe = make_model(parts, np.zeros((obs.n_obs, parts["load"].shape[1])), solver)
    truth_state = probe.solve_primal(q_truth)
    clean = np.asarray(obs.apply(truth_state.u), dtype=float)
    noise = cfg.get("noise", {})
    data, delta = generate_data(
        obs, parts["dt"], clean, float(noise.get("level", 0.0)), noise.get("seed", 0)
    )
    digest = data_digest(data)
    progress(
        f"[data] n_obs={obs.n_obs} K={parts['load'].shape[1] - 1} "
        f"delta={delta:.6e} sha256={digest[:12]}"
    )

    cfg_i = irgnm_config(solver)
    cfg_t = tr_config(solver)
    q0 = np.ones(family.n_params)
    results = {
        "profile": cfg.get("profile", "custom"),
        "delta": float(delta),
        "noise_level": float(noise.get("level", 0.0)),
        "seed": int(noise.get("seed", 0)),
        "data_sha256": digest,
        "n_parameters": int(family.n_params),
        "n_dofs": int(family.n_dofs),
        "q_truth": q_truth,
        "reports": {},
        "_family": family,
    }

    for method in methods:
        assert data_digest(data) == digest, "shared data mutated between runs"
        model = make_model(parts, data, solver)
        report = {"method": method, "failed": False, "error": None}
        t0 = time.perf_counter()
        try:
            if method == "fom":
                res = irgnm_run(model, q0, delta, cfg_i)
                report.update(
                    n_Q=int(family.n_params),
                    n_V=int(family.n_dofs),
                    outer_iters=res.iterations,
                    inner_iters=int(sum(r.inner_iters for r in res.records)),
                    records=res.records,
                )
            elif method == "tr":
                res = tr_irgnm(model, q0, delta, cfg_i, cfg_t)
                report.update(
                    n_Q=res.n_q,
                    n_V=res.n_v,
                    outer_iters=res.iterations,
                    inner_iters=int(
                        sum(row["subproblem_iters"] for row in res.ledger)
                    ),
                    ledger=res.ledger,
                )
            else:
                raise ConfigError(f"unknown method {method!r}")
            report.update(
                converged=bool(res.converged),
                stop_reason=res.stop_reason,
                objective=float(res.objective),
                q=np.asarray(res.q, dtype=float),
                rel_err_truth=float(
                    np.linalg.norm(res.q - q_truth) / np.linalg.norm(q_truth)
                ),
                fom_solves=int(model.fom_solve_count()),
            )
        except (SolverError, EnrichmentError) as exc:
            report.update(
                failed=True, error=f"{type(exc).__name__}: {exc}",
                converged=False, stop_reason="error",
                fom_solves=int(model.fom_solve_count()),
            )
        report["seconds"] = time.perf_counter() - t0
        results["reports"][method] = report
        msg = report["error"] if report["failed"] else (
            f"converged={report['converged']} J={report['objective']:.4e} "
            f"rel_err={report['rel_err_truth']:.4f} solves={report['fom_solves']} "
            f"{report['seconds']:.1f}s"
        )
        progress(f"[{method}] {msg}")

    fom_rep = results["reports"].get("fom")
    tr_rep = results["reports"].get("tr")
    if fom_rep and tr_rep and not (fom_rep["failed"] or tr_rep["failed"]):
        tr_rep["rel_err_vs_fom"] = float(
            np.linalg.norm(tr_rep["q"] - fom_rep["q"]) / np.linalg.norm(fom_rep["q"])
        )
        tr_rep["speedup_vs_fom"] = fom_rep["seconds"] / tr_rep["seconds"]
        tr_rep["solve_fraction"] = tr_rep["fom_solves"] / fom_rep["fom_solves"]
    return results


CSV_COLUMNS = [
    "method", "converged", "stop_reason", "objective", "rel_err_truth",
    "rel_err_vs_fom", "seconds", "speedup_vs_fom", "fom_solves",
    "solve_fraction", "n_Q", "n_V", "outer_iters", "inner_iters",
]


def emit_results(out_dir, results):
    """Write the comparison table, ledgers, and parameter-field dumps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    table = out / "comparison.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for method, rep in results["reports"].items():
            row = []
            for col in CSV_COLUMNS:
                val = rep.get(col, "")
                if isinstance(val, (float, np.floating)):
                    val = repr(float(val))
                row.append(val)
            writer.writerow(row)
    written.append(table)

    family = results["_family"]
    summary = {
        key: results[key]
        for key in (
            "profile", "delta", "noise_level", "seed", "data_sha256",
            "n_parameters", "n_dofs",
        )
    }
    summary["reports"] = {}
    for method, rep in results["reports"].items():
        summary["reports"][method] = {
            k: v for k, v in rep.items()
            if k not in ("q", "records", "ledger")
        }
    with open(out / "results.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    written.append(out / "results.json")

    np.save(out / "field_truth.npy", family.field_on_param_grid(results["q_truth"]))
    written.append(out / "field_truth.npy")
    for method, rep in results["reports"].items():
        if "q" in rep:
            np.save(out / f"q_{method}.npy", rep["q"])
            np.save(
                out / f"field_{method}.npy", family.field_on_param_grid(rep["q"])
            )
            written.extend([out / f"q_{method}.npy", out / f"field_{method}.npy"])
        if method == "fom" and "records" in rep:
            write_ledger(out / "fom_ledger.csv", rep["records"])
            written.append(out / "fom_ledger.csv")
        if method == "tr" and "ledger" in rep:
            payload = {
                "stop_reason": rep["stop_reason"],
                "objective": rep.get("objective"),
                "seconds": rep["seconds"],
                "n_v": rep.get("n_V"),
                "n_q": rep.get("n_Q"),
                "iterations": rep["ledger"],
            }
            with open(out / "tr_ledger.json", "w") as fh:
                json.dump(payload, fh, indent=1)
            written.append(out / "tr_ledger.json")
    return written


def report_text(summary):
    lines = []
    lines.append(
        f"profile {summary['profile']}  "
        f"N_Q={summary['n_parameters']} N_V={summary['n_dofs']}  "
        f"noise={summary['noise_level']:.3g} delta={summary['delta']:.4e}"
    )
    header = (
        f"{'method':8s} {'conv':5s} {'J_final':>12s} {'rel_err':>8s} "
        f"{'vs_fom':>8s} {'solves':>7s} {'n_Q':>5s} {'n_V':>6s} "
        f"{'outer':>6s} {'sec':>8s} {'speedup':>8s}"
    )
    lines.append(header)
    lines.append("-" * len(header))
    for method, rep in summary["reports"].items():
        if rep.get("failed"):
            lines.append(f"{method:8s} FAILED  {rep['error']}")
            continue
        lines.append(
            f"{method:8s} {str(rep['converged']):5s} {rep['objective']:12.4e} "
            f"{rep['rel_err_truth']:8.4f} "
            f"{rep.get('rel_err_vs_fom', float('nan')):8.4f} "
            f"{rep['fom_solves']:7d} {rep['n_Q']:5d} {rep['n_V']:6d} "
            f"{rep['outer_iters']:6d} {rep['seconds']:8.1f} "
            f"{rep.get('speedup_vs_fom', float('nan')):8.2f}"
        )
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------------


def cmd_assemble(args):
    cfg = load_config(args.profile, args.config, args.seed)
    parts = build_problem(cfg)
    family = parts["family"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = family.evaluate(np.ones(family.n_params))
    sp.save_npz(out / "stiffness_background.npz", base.tocsr())
    np.save(out / "mass_diag.npy", family.mass_diag)
    np.save(out / "load.npy", parts["load"])
    manifest = {
        "profile": cfg.get("profile"),
        "n_dofs": int(family.n_dofs),
        "n_parameters": int(family.n_params),
        "n_obs": int(parts["obs"].n_obs),
        "steps": int(parts["load"].shape[1] - 1),
        "dt": float(parts["dt"]),
        "zeta": parts["zeta"],
        "stiffness_nnz": int(base.nnz),
        "obs_norm_bound": float(parts["obs"].norm_bound),
    }
    with open(out / "operators.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"assembled {manifest['n_dofs']} dofs, {manifest['n_parameters']} parameters "
          f"-> {out}")
    return 0


def cmd_truth(args):
    cfg = load_config(args.profile, args.config, args.seed)
    parts = build_problem(cfg)
    q = build_truth(cfg, parts["grid"], parts["family"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "truth.npy", q)
    np.save(out / "field_truth.npy", parts["family"].field_on_param_grid(q))
    print(f"truth field: {q.size} coefficients, "
          f"range [{q.min():.3f}, {q.max():.3f}] -> {out}")
    return 0


def cmd_data(args):
    cfg = load_config(args.profile, args.config, args.seed)
    parts = build_problem(cfg)
    family, obs = parts["family"], parts["obs"]
    q = build_truth(cfg, parts["grid"], family)
    solver = cfg.get("solver", {})
    probe = make_model(parts, np.zeros((obs.n_obs, parts["load"].shape[1])), solver)
    clean = np.asarray(obs.apply(probe.solve_primal(q).u), dtype=float)
    noise = cfg.get("noise", {})
    data, delta = generate_data(
        obs, parts["dt"], clean, float(noise.get("level", 0.0)), noise.get("seed", 0)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "data.npy", data)
    meta = {
        "delta": float(delta),
        "noise_level": float(noise.get("level", 0.0)),
        "seed": int(noise.get("seed", 0)),
        "sha256": data_digest(data),
        "n_obs": int(obs.n_obs),
        "steps": int(data.shape[1] - 1),
    }
    with open(out / "data_meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    print(f"data: {data.shape} delta={delta:.6e} sha256={meta['sha256'][:12]} -> {out}")
    return 0


def cmd_run(args):
    cfg = load_config(args.profile, args.config, args.seed)
    methods = ("fom", "tr") if args.method == "both" else (args.method,)
    results = run_comparison(cfg, methods)
    emit_results(args.out, results)
    print(report_text(json.loads((Path(args.out) / "results.json").read_text())))
    if any(rep["failed"] for rep in results["reports"].values()):
        return 3
    return 0


def cmd_report(args):
    path = Path(args.out) / "results.json"
    if not path.exists():
        raise ConfigError(f"no results.json under {args.out!r}; run a comparison first")
    print(report_text(json.loads(path.read_text())))
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="plateid",
        description="Stiffness-field identification on elastic plates: "
                    "full-order and surrogate-accelerated Gauss-Newton runs.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML overrides for the profile")
    common.add_argument("--profile", default="desk2d", choices=sorted(PROFILES))
    common.add_argument("--seed", type=int, default=None, help="noise RNG seed override")
    common.add_argument("--out", default="results", help="output directory")

    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("assemble", parents=[common],
                   help="assemble and cache operators").set_defaults(fn=cmd_assemble)
    sub.add_parser("truth", parents=[common],
                   help="build the ground-truth field").set_defaults(fn=cmd_truth)
    sub.add_parser("data", parents=[common],
                   help="generate synthetic measurements").set_defaults(fn=cmd_data)
    run_p = sub.add_parser("run", parents=[common], help="run solvers and emit results")
    run_p.add_argument("--method", choices=("fom", "tr", "both"), default="both")
    run_p.set_defaults(fn=cmd_run)
    sub.add_parser("report", parents=[common],
                   help="print the table for an existing run").set_defaults(fn=cmd_report)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, EnrichmentError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
