"""Batch entry point: ``wholebody {check,identify,simulate,estimate}``.

Exit codes: 0 success, 1 domain failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
import warnings
from dataclasses import replace
from typing import Optional

import numpy as np
import yaml

from . import fixture_path
from .dynamics import ContactSet, SpatialWrench
from .estimation import (
    EstimationError,
    estimate,
    load_sensor_config,
    synthesize_ft_reading,
    write_ft_csv,
)
from .model import ModelParseError, ModelValidationError, load_model, neutral_state, parse_model, validate_model
from .motor import DatasetError, IdentificationError, identify, read_dataset_csv
from .sim import (
    BalanceController,
    PostureHold,
    Script,
    SimConfig,
    SimulationError,
    run_scenario,
    standing_state,
)
from .wbc import ControllerConfig, PosturalTask

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# -- file helpers ------------------------------------------------------------------------


def _resolve(path: str, base: Optional[str] = None) -> str:
    """Existing path, else relative to ``base``, else a bundled fixture of that name."""
    candidates = [path]
    if base and not os.path.isabs(path):
        candidates.append(os.path.join(base, path))
    candidates.append(fixture_path(os.path.basename(path)))
    for c in candidates:
        if os.path.isfile(c):
            return c
    raise UsageError(f"{path}: no such file")


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None


def _yaml(path: str) -> dict:
    try:
        data = yaml.safe_load(_read(path)) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping at top level")
    return data


def _load_model(path: str):
    path = _resolve(path)
    try:
        return load_model(_read(path))
    except ModelParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except ModelValidationError as exc:
        raise DomainError(f"{path}: invalid model: {exc}") from None


def _write(out_dir: str, name: str, text: str) -> str:
    try:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"{out_dir}: {exc.strerror}") from None
    return path


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _json(data: dict) -> str:
    clean = {k: (_finite(v) if not isinstance(v, dict) else {a: _finite(b) for a, b in v.items()}) for k, v in data.items()}
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"


def _digest(*texts: str) -> str:
    h = hashlib.sha256()
    for t in texts:
        h.update(t.encode("utf-8"))
    return h.hexdigest()


# -- scenario assembly ---------------------------------------------------------------------


def _sim_config(section: dict, args) -> SimConfig:
    try:
        cfg = SimConfig(**(section or {}))
    except TypeError as exc:
        raise UsageError(f"sim section: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"sim section: {exc}") from None
    if args.dt is not None:
        cfg = replace(cfg, dt=args.dt)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _script(data: dict, args, base: str) -> Script:
    source = data.get("script")
    if args.script is not None:
        source = _yaml(_resolve(args.script))
    elif isinstance(source, str):
        source = _yaml(_resolve(source, base))
    try:
        script = Script.from_dict((source or {}).get("script", source))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"script: {exc}") from None
    if args.duration is not None:
        script.duration = args.duration
    return script


def _contacts(model, data: dict) -> ContactSet:
    names = data.get("contacts")
    if names is None:
        return ContactSet(model)
    known = {c.name for c in model.contacts}
    for n in names:
        if n not in known:
            raise DomainError(f"unknown contact frame '{n}'")
    return ContactSet(model, list(names))


def _initial_state(model, data: dict, contacts: ContactSet):
    init = data.get("initial", "standing")
    if init == "standing":
        return standing_state(model, contacts)
    state = neutral_state(model)
    if isinstance(init, dict) and "q" in init:
        q = np.asarray(init["q"], dtype=float)
        if q.size != model.n:
            raise UsageError(f"initial q has {q.size} entries, model has {model.n} joints")
        state.q[:] = q
    elif init != "neutral" and not isinstance(init, dict):
        raise UsageError(f"unknown initial state {init!r}")
    return state


def _controller(model, data: dict, state, fixed_base: bool):
    section = dict(data.get("controller") or {})
    kind = section.pop("type", "balance")
    if kind == "none":
        return None
    if kind == "hold":
        return PostureHold(model, state.q, float(section.get("kp", 100.0)), float(section.get("kd", 20.0)))
    if kind != "balance":
        raise UsageError(f"unknown controller type {kind!r}")
    section.setdefault("fixed_base", fixed_base)
    try:
        cfg = ControllerConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"controller section: {exc}") from None
    task = PosturalTask(state.q.copy(), cfg.posture_kp, cfg.posture_kd)
    return BalanceController(model, task, cfg)


def _scenario(args):
    if args.config is None:
        raise UsageError("--config is required")
    cfg_path = _resolve(args.config)
    data = _yaml(cfg_path)
    base = os.path.dirname(cfg_path)
    model_ref = args.model or data.get("model")
    if model_ref is None:
        raise UsageError("no model given (--model or 'model' in the config)")
    model = _load_model(_resolve(model_ref, base) if args.model is None else model_ref)
    sim_cfg = _sim_config(data.get("sim"), args)
    script = _script(data, args, base)
    contacts = _contacts(model, data)
    try:
        script.check(model, contacts)
    except KeyError as exc:
        raise DomainError(f"scenario references unknown frame '{exc.args[0]}'") from None
    state = _initial_state(model, data, contacts)
    controller = _controller(model, data, state, sim_cfg.fixed_base)
    return model, data, sim_cfg, script, contacts, state, controller


def _run(model, controller, script, sim_cfg, state, contacts):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return run_scenario(model, controller, script, sim_cfg, state, contacts)
    except SimulationError as exc:
        raise DomainError(f"simulation failed at t = {exc.time}: {exc}") from None


# -- commands ------------------------------------------------------------------------------


def cmd_check(args) -> int:
    path = args.model_path or args.model
    if path is None:
        raise UsageError("a model path is required")
    text = _read(_resolve(path))
    try:
        model = parse_model(text)
    except ModelParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    diags = validate_model(model)
    for d in diags:
        print(d)
    return EXIT_DOMAIN if any(d.severity == "error" for d in diags) else EXIT_OK


def cmd_identify(args) -> int:
    path = args.dataset
    text = _read(_resolve(path))
    try:
        data = read_dataset_csv(text)
        params, report = identify(data)
    except DatasetError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except IdentificationError as exc:
        raise DomainError(f"rank-deficient dataset: {exc}") from None
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    out = _write(args.out, "fit_report.csv", report.to_text())
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, data, sim_cfg, script, contacts, state, controller = _scenario(args)
    t0 = time.perf_counter()
    traj = _run(model, controller, script, sim_cfg, state, contacts)
    wall = time.perf_counter() - t0
    traj_csv = traj.to_csv()
    diag_csv = traj.diagnostics_csv()
    com = np.array(traj.com).reshape(-1, 3)
    dev = float(np.max(np.linalg.norm(com[:, :2] - com[0, :2], axis=1))) if len(com) else 0.0
    diags = [d for d in traj.diagnostics if d is not None]
    summary = {
        "steps": len(traj),
        "dt": sim_cfg.dt,
        "seed": sim_cfg.seed,
        "max_com_deviation": dev,
        "min_cone_margin": float(min(traj.cone_margin, default=math.inf)),
        "qp_failures": sum(1 for d in diags if d.force_status != "optimal"),
        "fallbacks": sum(1 for d in diags if d.fallback),
        "wall_time": wall,
        "checksum": _digest(traj_csv, diag_csv),
    }
    _write(args.out, "trajectory.csv", traj_csv)
    _write(args.out, "diagnostics.csv", diag_csv)
    _write(args.out, "summary.json", _json(summary))
    print(_json(summary), end="")
    return EXIT_OK


def cmd_estimate(args) -> int:
    model, data, sim_cfg, script, contacts, state, controller = _scenario(args)
    try:
        sensors, hyps = load_sensor_config(yaml.safe_dump({k: data.get(k) for k in ("sensors", "hypotheses")}))
    except ValueError as exc:
        raise UsageError(f"sensor config: {exc}") from None
    if not sensors:
        raise UsageError("config declares no sensors")
    sigma = data.get("noise_sigma")
    if sigma is not None:
        sensors = [s.with_noise(sigma) for s in sensors]
    t0 = time.perf_counter()
    traj = _run(model, controller, script, sim_cfg, state, contacts)
    seed = sim_cfg.seed

    cols = ["time"]
    for d in range(model.n):
        cols += [f"tau{d}_true", f"tau{d}_est"]
    for h in hyps:
        for a in ("fx", "fy", "fz", "tx", "ty", "tz"):
            cols += [f"{h.frame}_{a}_true", f"{h.frame}_{a}_est"]
    for s in sensors:
        cols.append(f"{s.name}_residual")
    rows = [",".join(cols)]
    ft_records = []
    tau_err, wrench_err = [], []
    for k in range(len(traj)):
        st, nudot, ext = traj.states[k], traj.nudot[k], traj.external[k]
        readings = {}
        for j, s in enumerate(sensors):
            w = synthesize_ft_reading(model, st, nudot, ext, s, seed=[seed, k, j], gravity=sim_cfg.gravity)
            readings[s.name] = w
            ft_records.append((traj.time[k], s.name, w))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = estimate(model, st, nudot, sensors, readings, hyps, gravity=sim_cfg.gravity)
        except EstimationError as exc:
            raise DomainError(str(exc)) from None
        vals = [traj.time[k]]
        tau_true = traj.tau[k]
        for d in range(model.n):
            vals += [tau_true[d], res.tau[d]]
        tau_err.append(res.tau - tau_true)
        errs = []
        for h in hyps:
            true = _true_wrench(model, st, ext, h.frame, sim_cfg.gravity)
            est = res.wrenches[h.frame].vector
            for a in range(6):
                vals += [true[a], est[a]]
            errs.append(est - true)
        wrench_err.append(np.concatenate(errs) if errs else np.zeros(0))
        vals += [float(np.linalg.norm(res.residuals.get(s.name, np.zeros(6)))) for s in sensors]
        rows.append(",".join(repr(float(v)) for v in vals))
    wall = time.perf_counter() - t0
    est_csv = "\n".join(rows) + "\n"
    ft_csv = write_ft_csv(ft_records)
    tau_err = np.array(tau_err).reshape(len(traj), model.n)
    wrench_err = np.array(wrench_err).reshape(len(traj), -1)
    summary = {
        "steps": len(traj),
        "seed": seed,
        "noise_sigma": {s.name: list(s.noise_sigma) for s in sensors},
        "max_abs_torque_error": float(np.abs(tau_err).max(initial=0.0)),
        "max_abs_wrench_error": float(np.abs(wrench_err).max(initial=0.0)),
        "wrench_error_std": [float(v) for v in wrench_err.std(axis=0)] if len(traj) else [],
        "torque_error_std": [float(v) for v in tau_err.std(axis=0)] if len(traj) else [],
        "wall_time": wall,
        "checksum": _digest(est_csv, ft_csv),
    }
    _write(args.out, "estimation.csv", est_csv)
    _write(args.out, "ft_readings.csv", ft_csv)
    _write(args.out, "summary.json", _json(summary))
    print(_json(summary), end="")
    return EXIT_OK


def _true_wrench(model, state, external, frame, gravity) -> np.ndarray:
    """Applied wrench at ``frame`` in the estimator's convention (frame origin, world axes)."""
    w = (external or {}).get(frame)
    if w is None:
        return np.zeros(6)
    if not isinstance(w, SpatialWrench):
        w = SpatialWrench.from_vector(w, frame)
    if w.axes == "local":
        from .dynamics import Snapshot

        R, _ = Snapshot(model, state, gravity).frame_pose(frame)
        w = w.world_aligned(R)
    return w.vector


# -- argument parsing ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--model", help="model file (or bundled fixture name)")
    p.add_argument("--config", help="scenario YAML")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dt", type=float, default=None, help="override the integration step")
    p.add_argument("--duration", type=float, default=None, help="override the script duration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wholebody", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check", help="validate a model description")
    p.add_argument("model_path", nargs="?")
    _common(p)
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("identify", help="fit the motor transmission model to a CSV dataset")
    p.add_argument("dataset")
    _common(p)
    p.set_defaults(func=cmd_identify)
    p = sub.add_parser("simulate", help="run a closed-loop scenario")
    _common(p)
    p.add_argument("--script", help="event script YAML (overrides the config's script)")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("estimate", help="estimation round-trip on a simulated scenario")
    _common(p)
    p.add_argument("--script", help="event script YAML (overrides the config's script)")
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    for name in ("dt", "duration"):
        v = getattr(args, name, None)
        if v is not None and not (math.isfinite(v) and v > 0):
            print(f"error: --{name} must be positive", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
