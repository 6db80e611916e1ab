"""
Experiment runner.

    kdl <command> --config path.json [--set key=value]... [--threads N] [--out dir]

Each command reads one JSON document (missing keys take the defaults below),
validates every parameter before computing, and writes its CSV/JSON
artifacts plus manifest.json into the output directory.

Exit status: 0 success, 2 invalid configuration or unwritable output,
3 numerical divergence, 1 any other library error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .errors import DivergenceError, KdlError, ResolutionError, ValidationError

log = logging.getLogger("kdl")

DEFAULTS = {
    "deflation": {
        "params": {},
        "n_times": 5,
        "norm": None,
    },
    "collision-check": {
        "kernel": {"gamma": -0.5, "b": "abs_cos"},
        "grid": {"d": 2, "L_x": 1.0, "n_x": 8, "L_v": 4.0, "n_v": 32},
        "temperature": 1.0,
    },
    "inequality-suite": {
        "kinds": ["HLS", "EndpointHLS", "QGainLr", "QLossLr", "QGainL1", "QGainHalfHalf",
                  "FracLeibniz", "Strichartz"],
        "trials": 100,
        "inputs": {},
    },
    "wellposed": {
        "kernel": {"gamma": -0.5, "b": "abs_cos"},
        "grid": {"d": 2, "L_x": 2.0, "n_x": 8, "L_v": 4.0, "n_v": 32},
        "eps": 1e-2,
        "modulation": 0.0,
        "T": 0.1,
        "n_steps": 4,
        "tol": 1e-30,
        "max_iter": 25,
        "mode": "direct",
    },
    "correction": {
        "params": {"M": 2.0, "N2": 2.0, "N1": 2.0},
        "grid": {"L_x": 6.0, "n_x": 32, "L_v": 3.0, "n_v": 16},
        "window": 0.125,
        "steps": 4,
        "n_sub": 4,
        "tol": 1e-10,
        "max_iter": 25,
    },
}
COMMANDS = tuple(DEFAULTS)


# ---------------------------------------------------------------- config handling

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and k not in ("seed", "command"):
            raise ValidationError(f"unknown configuration key {path + k!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and base.get(k):
            out[k] = _merge(base[k], v, path + k + ".") if k not in ("params", "inputs", "kernel", "grid") \
                else {**base[k], **v}
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, sets) -> dict:
    """--set a.b.c=value; the value is read as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in sets or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"--set path {key!r} passes through a non-object")
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(command: str, path: str | None, sets=None) -> dict:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError("config must be a JSON object")
    raw = apply_overrides(raw, sets)
    if raw.get("command", command) != command:
        raise ValidationError(f"config is for command {raw['command']!r}, not {command!r}")
    cfg = _merge(DEFAULTS[command], raw)
    cfg["command"] = command
    seed = cfg.setdefault("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    return cfg


# ---------------------------------------------------------------- commands

def _kernel(cfg: dict, d: int):
    from .collision import CollisionKernel

    k = CollisionKernel.from_dict(cfg)
    k.validate(d)
    return k


def _grid(cfg: dict, d: int | None = None):
    from .field import Grid

    c = dict(cfg)
    dd = int(c.pop("d", d if d is not None else 2))
    extra = set(c) - {"L_x", "n_x", "L_v", "n_v"}
    if extra:
        raise ValidationError(f"unknown grid keys {sorted(extra)}")
    return Grid(dd, float(c["L_x"]), int(c["n_x"]), float(c["L_v"]), int(c["n_v"]))


def _params(cfg: dict):
    from .deflation import DeflationParams

    try:
        return DeflationParams(**cfg)
    except TypeError as exc:
        raise ValidationError(f"invalid deflation parameters: {exc}") from None


def run_deflation(cfg: dict, out: str) -> dict:
    from .deflation import deflation_experiment, sphere_points
    from .norms import NormSpec

    p = _params(cfg["params"])
    norm = NormSpec(**cfg["norm"]) if cfg["norm"] else None
    n = int(cfg["n_times"])
    if n < 2:
        raise ValidationError("n_times must be >= 2")
    fam = sphere_points(p.d, p.J)
    log.info("deflation: d=%d M=%g N2=%g N1=%g J=%d", p.d, p.M, p.N2, p.N1, p.J)
    rep = deflation_experiment(p, fam, norm, n)
    _write(out, "deflation.csv", rep.to_csv())
    summary = rep.summary()
    summary["min_angle"] = fam.min_angle
    return {"deflation.json": summary}


def run_collision_check(cfg: dict, out: str) -> dict:
    from .collision import collision_invariants, q_gain_direct, q_loss_direct
    from .field import Dense

    grid = _grid(cfg["grid"])
    k = _kernel(cfg["kernel"], grid.d)
    T = float(cfg["temperature"])
    if not T > 0:
        raise ValidationError("temperature must be positive")
    v = grid.v_points()
    mx = np.exp(-np.sum(v * v, axis=1) / T)
    f = Dense(grid, np.broadcast_to(mx, (grid.n_x ** grid.d, mx.size)))
    log.info("collision-check: Maxwellian on n_v=%d, gamma=%g", grid.n_v, k.gamma)
    gain = q_gain_direct(f, f, k, grid).flat()[0]
    loss = q_loss_direct(f, f, k, grid).flat()[0]
    mass, mom, en = collision_invariants(f, k, grid)
    summary = {
        "kernel": k.to_dict(), "grid": grid.to_dict(),
        "detailed_balance": float(np.max(np.abs(gain - loss)) / np.max(np.abs(gain))),
        "mass_residual": mass, "momentum_residual": mom, "energy_residual": en,
    }
    return {"collision.json": summary}


def run_inequality_suite(cfg: dict, out: str) -> dict:
    from .inequalities import INEQUALITIES, check_inequality

    kinds = list(cfg["kinds"])
    bad = [k for k in kinds if k not in INEQUALITIES]
    if bad:
        raise ValidationError(f"unknown inequalities {bad}; choose from {sorted(INEQUALITIES)}")
    trials = int(cfg["trials"])
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    inputs = cfg["inputs"]
    # construct every check first so bad exponents fail before any trial runs
    for k in kinds:
        INEQUALITIES[k](dict(inputs.get(k, {})))
    reports = []
    rows = ["kind,trials,worst_ratio"]
    for k in kinds:
        log.info("inequality %s: %d trials", k, trials)
        r = check_inequality(k, inputs.get(k), trials, cfg["seed"])
        reports.append(r.to_dict())
        rows.append(f"{k},{trials},{format(r.worst_ratio, '.17g')}")
    _write(out, "inequalities.csv", "\n".join(rows) + "\n")
    return {"inequalities.json": {"seed": cfg["seed"], "reports": reports}}


def run_wellposed(cfg: dict, out: str) -> dict:
    from .field import Dense
    from .solver import history_csv, picard_local_solve

    grid = _grid(cfg["grid"])
    k = _kernel(cfg["kernel"], grid.d)
    eps, T = float(cfg["eps"]), float(cfg["T"])
    a = float(cfg["modulation"])
    if not 0 <= a < 1:
        raise ValidationError("modulation must lie in [0, 1)")
    x, v = grid.x_points(), grid.v_points()
    rho = 1.0 + a * np.cos(np.pi * x[:, 0] / grid.L_x)
    f0 = Dense(grid, eps * rho[:, None] * np.exp(-np.sum(v * v, axis=1))[None, :])
    log.info("wellposed: eps=%g T=%g n_steps=%d", eps, T, cfg["n_steps"])
    traj, hist = picard_local_solve(f0, k, T, int(cfg["n_steps"]), float(cfg["tol"]),
                                    int(cfg["max_iter"]), cfg["mode"])
    _write(out, "picard_history.csv", history_csv(hist))
    ratios = hist[1:] / np.where(hist[:-1] > 0, hist[:-1], np.inf)
    return {"wellposed.json": {
        "history": hist, "ratios": ratios, "iterations": int(hist.size),
        "min_value": float(traj.stacked().min()), "kernel": k.to_dict(), "grid": grid.to_dict(),
    }}


def run_correction(cfg: dict, out: str) -> dict:
    from .deflation import build_fa, check_resolution, sphere_points
    from .norms import z_norm
    from .solver import history_csv, solve_correction

    p = _params(cfg["params"])
    grid = _grid(cfg["grid"], p.d)
    steps, n_sub = int(cfg["steps"]), int(cfg["n_sub"])
    if steps < n_sub or steps % n_sub:
        raise ValidationError("steps must be a positive multiple of n_sub")
    window = float(cfg["window"])
    if not 0.0 < window <= 1.0:
        raise ValidationError(f"window must lie in (0, 1], got {window}")
    check_resolution(p, grid)
    fam = sphere_points(p.d, p.J)
    # solve on [window * T_star, 0]
    times = np.linspace(window * p.T_star, 0.0, steps + 1)
    log.info("correction: %d steps over %d subintervals", steps, n_sub)
    traj, z = solve_correction(p, fam, grid, times, float(cfg["tol"]), n_sub, int(cfg["max_iter"]))
    za = [z_norm(build_fa(p, fam, t).sample(grid), p.M, p.N2, p.gamma, p.r0) for t in times]
    _write(out, "correction_z.csv", history_csv(z, "subinterval"))
    return {"correction.json": {
        "z_history": z, "max_z_fc": float(np.max(z)), "min_z_fa": float(np.min(za)),
        "subordination": float(np.max(z) / np.min(za)), "growth": (z[1:] / z[:-1]).tolist(),
        "t_start": float(times[0]), "params": p.to_dict(), "grid": grid.to_dict(),
    }}


RUNNERS = {
    "deflation": run_deflation,
    "collision-check": run_collision_check,
    "inequality-suite": run_inequality_suite,
    "wellposed": run_wellposed,
    "correction": run_correction,
}


# ---------------------------------------------------------------- artifacts

def _write(out: str, name: str, text: str) -> None:
    with open(os.path.join(out, name), "w") as fh:
        fh.write(text)


def _versions() -> dict:
    import numba
    import scipy

    return {"kdl": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _prepare_out(out: str) -> None:
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".kdl-write-test")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise ValidationError(f"output directory {out!r} is not writable: {exc}") from None


def run(cfg: dict, out: str) -> list:
    """Execute one validated config; returns the artifact names written."""
    from .jsonio import dumps

    _prepare_out(out)
    t0 = time.perf_counter()
    jsons = RUNNERS[cfg["command"]](cfg, out)
    names = sorted(n for n in os.listdir(out) if n.endswith(".csv"))
    for name, obj in jsons.items():
        _write(out, name, dumps(obj) + "\n")
        names.append(name)
    manifest = {"command": cfg["command"], "config": cfg, "versions": _versions(),
                "wall_time_s": time.perf_counter() - t0, "artifacts": sorted(names)}
    _write(out, "manifest.json", dumps(manifest) + "\n")
    return sorted(names)


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdl", description="Run a kinetic-equation experiment.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry (dotted path, JSON value)")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    ap.add_argument("--out", default="kdl-out", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="kdl: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.command, args.config, args.set)
        _set_threads(args.threads)
        names = run(cfg, args.out)
    except (ValidationError, ResolutionError) as exc:
        print(f"kdl: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        where = f" (subinterval {exc.subinterval})" if exc.subinterval is not None else ""
        print(f"kdl: divergence{where}: {exc}", file=sys.stderr)
        return 3
    except KdlError as exc:
        print(f"kdl: error: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %s to %s", ", ".join(names), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
