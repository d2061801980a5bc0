"""Joint torques and external wrenches from embedded six-axis FT sensors.

Cutting the kinematic tree at every sensor joint splits it into
sub-models.  Within a sub-model the Newton-Euler equations, closed by the
measured wrenches at its boundary sensors, leave exactly the external
wrench unexplained; one contact hypothesis per sub-model turns that
mismatch into an estimate.  A backward recursion that uses the measured
wrenches across sensor cuts then gives every joint torque.

Sensor convention: the wrench the parent side exerts on the child side,
at the measurement frame origin, in measurement frame axes.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from .dynamics import GRAVITY, Snapshot, SpatialWrench
from .model import Pose, RobotModel
from .spatial import skew
from .state import FloatingBaseState

PURE_FORCE = "pure-force"
FULL_WRENCH = "full-wrench"


class EstimationError(ValueError):
    pass


class IllConditionedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FtSensorSpec:
    name: str
    joint: str
    origin: Pose = Pose()
    # force sigma on the first three axes, torque sigma on the last three
    noise_sigma: tuple = (0.0,) * 6

    def __post_init__(self):
        sig = np.atleast_1d(np.asarray(self.noise_sigma, dtype=float))
        if sig.size == 1:
            sig = np.repeat(sig, 6)
        elif sig.size == 2:
            sig = np.repeat(sig, 3)
        if sig.size != 6 or np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise ValueError(f"sensor {self.name}: noise_sigma must be 1, 2 or 6 non-negative values")
        object.__setattr__(self, "noise_sigma", tuple(float(s) for s in sig))
        if not isinstance(self.origin, Pose):
            object.__setattr__(self, "origin", Pose(**self.origin))

    def with_noise(self, sigma) -> "FtSensorSpec":
        return FtSensorSpec(self.name, self.joint, self.origin, sigma)


@dataclass(frozen=True)
class ContactHypothesis:
    frame: str
    kind: str = FULL_WRENCH

    def __post_init__(self):
        if self.kind not in (PURE_FORCE, FULL_WRENCH):
            raise ValueError(f"hypothesis kind must be {PURE_FORCE!r} or {FULL_WRENCH!r}")


@dataclass
class EstimationResult:
    tau: np.ndarray
    wrenches: dict
    residuals: dict
    ill_conditioned: list = field(default_factory=list)


def load_sensor_config(text: str):
    """Parse ``sensors`` and ``hypotheses`` lists from YAML."""
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError("sensor config must be a mapping")
    sensors = []
    for k, s in enumerate(data.get("sensors") or []):
        try:
            origin = s.get("origin") or {}
            pose = Pose(tuple(map(float, origin.get("xyz", (0, 0, 0)))), tuple(map(float, origin.get("rpy", (0, 0, 0)))))
            sensors.append(FtSensorSpec(str(s["name"]), str(s["joint"]), pose, s.get("noise_sigma", 0.0)))
        except KeyError as exc:
            raise ValueError(f"sensor {k}: missing field {exc.args[0]}") from None
    hyps = []
    for k, h in enumerate(data.get("hypotheses") or []):
        try:
            hyps.append(ContactHypothesis(str(h["frame"]), str(h.get("kind", FULL_WRENCH))))
        except KeyError as exc:
            raise ValueError(f"hypothesis {k}: missing field {exc.args[0]}") from None
    return sensors, hyps


# -- tree partition ------------------------------------------------------------------------


class _Partition:
    """Link-to-sub-model assignment induced by the sensor joints."""

    def __init__(self, model: RobotModel, sensors: Sequence[FtSensorSpec]):
        tree = model.tree
        names = set()
        self.sensor_link = {}
        for s in sensors:
            if s.name in names:
                raise EstimationError(f"duplicate sensor name '{s.name}'")
            names.add(s.name)
            try:
                j = model.joint(s.joint)
            except KeyError:
                raise EstimationError(f"sensor '{s.name}' is mounted on unknown joint '{s.joint}'") from None
            self.sensor_link[s.name] = tree.index[j.child]
        cut = {i: name for name, i in self.sensor_link.items()}
        if len(cut) != len(self.sensor_link):
            raise EstimationError("two sensors are mounted on the same joint")
        comp = [0] * len(tree.names)
        roots = [0]
        for i in range(1, len(tree.names)):
            if i in cut:
                comp[i] = len(roots)
                roots.append(i)
            else:
                comp[i] = comp[tree.parent[i]]
        self.comp = comp
        self.roots = roots
        self.cut = cut  # child link -> sensor name
        self.inbound = {comp[i]: name for i, name in cut.items()}


def _sensor_pose(snap: Snapshot, link: int, spec: FtSensorSpec):
    R = snap.R[link] @ spec.origin.rotation
    p = snap.p[link] + snap.R[link] @ spec.origin.translation
    return R, p


def _to_sensor(w6, R, p) -> np.ndarray:
    """World-origin spatial force to sensor-frame wrench."""
    f = w6[:3]
    n = w6[3:] - np.cross(p, f)
    return np.concatenate([R.T @ f, R.T @ n])


def _from_sensor(w, R, p) -> np.ndarray:
    w = _vector(w)
    f = R @ w[:3]
    n = R @ w[3:]
    return np.concatenate([f, n + np.cross(p, f)])


def _vector(w) -> np.ndarray:
    if isinstance(w, SpatialWrench):
        return w.vector
    return np.asarray(w, dtype=float).reshape(6)


# -- synthetic readings ------------------------------------------------------------------


def synthesize_ft_reading(
    model: RobotModel,
    state: FloatingBaseState,
    nudot,
    externals: Optional[Mapping[str, SpatialWrench]],
    sensor: FtSensorSpec,
    seed: Optional[int] = None,
    gravity=None,
    snapshot: Optional[Snapshot] = None,
) -> SpatialWrench:
    """Exact internal wrench at the sensor cut plus Gaussian noise of the declared sigma."""
    snap = snapshot or Snapshot(model, state, GRAVITY if gravity is None else gravity)
    part = _Partition(model, [sensor])
    link = part.sensor_link[sensor.name]
    F = snap.body_forces(nudot)
    for i, f6 in snap.external_body_forces(externals).items():
        F[i] = F[i] - f6
    tree = snap.tree
    total = np.zeros(6)
    for i in range(len(tree.names)):
        if tree.in_subtree(i, link):
            total += F[i]
    R, p = _sensor_pose(snap, link, sensor)
    w = _to_sensor(total, R, p)
    sigma = np.array(sensor.noise_sigma)
    if np.any(sigma > 0):
        w = w + np.random.default_rng(seed).normal(0.0, 1.0, 6) * sigma
    return SpatialWrench.from_vector(w, sensor.name, axes="local")


# -- estimation ------------------------------------------------------------------------------


def estimate(
    model: RobotModel,
    state: FloatingBaseState,
    nudot,
    sensors: Sequence[FtSensorSpec],
    readings: Mapping[str, object],
    hypotheses: Sequence[ContactHypothesis] = (),
    gravity=None,
    snapshot: Optional[Snapshot] = None,
) -> EstimationResult:
    """External wrenches at the hypothesized frames and all joint torques.

    ``readings`` maps sensor names to measured wrenches (sensor frame).
    Estimated wrenches are returned at the hypothesis frame origin with
    world axes; residuals are per sensor, in that sensor's frame.
    """
    snap = snapshot or Snapshot(model, state, GRAVITY if gravity is None else gravity)
    tree = snap.tree
    part = _Partition(model, sensors)
    specs = {s.name: s for s in sensors}
    missing = [s.name for s in sensors if s.name not in readings]
    if missing:
        raise EstimationError(f"no reading for sensor(s) {', '.join(missing)}")

    # measured wrenches as world-origin spatial forces, parent on child
    W = {}
    poses = {}
    for name, spec in specs.items():
        link = part.sensor_link[name]
        R, p = _sensor_pose(snap, link, spec)
        poses[name] = (R, p)
        W[name] = _from_sensor(readings[name], R, p)

    by_comp = {}
    for h in hypotheses:
        try:
            link, _, _ = tree.frame(h.frame)
        except KeyError:
            raise EstimationError(f"unknown hypothesis frame '{h.frame}'") from None
        c = part.comp[link]
        if c == 0:
            raise EstimationError(
                f"hypothesis '{h.frame}' is not inside a sensor-bounded sub-model"
            )
        if c in by_comp:
            raise EstimationError(
                f"hypotheses '{by_comp[c].frame}' and '{h.frame}' share one sub-model"
            )
        by_comp[c] = h

    F = snap.body_forces(nudot)
    # what each non-root sub-model needs from outside, beyond its sensors
    need = {c: np.zeros(6) for c in range(1, len(part.roots))}
    for i in range(len(tree.names)):
        c = part.comp[i]
        if c:
            need[c] += F[i]
    for name, link in part.sensor_link.items():
        child = part.comp[link]
        need[child] -= W[name]
        parent = part.comp[tree.parent[link]]
        if parent:
            need[parent] += W[name]

    wrenches = {}
    residuals = {}
    ill = []
    external = {}
    for c in range(1, len(part.roots)):
        sname = part.inbound[c]
        R_s, p_s = poses[sname]
        g = need[c]
        h = by_comp.get(c)
        if h is None:
            residuals[sname] = _to_sensor(g, R_s, p_s)
            continue
        link, _, _ = tree.frame(h.frame)
        _, p_h = snap.frame_pose(h.frame)
        if h.kind == FULL_WRENCH:
            est = g.copy()
            residuals[sname] = np.zeros(6)
        else:
            # least squares in the sensor frame: [f; (p_h - p_s) x f] ~ g about p_s
            A = np.vstack([np.eye(3), skew(p_h - p_s)])
            b = np.concatenate([g[:3], g[3:] - np.cross(p_s, g[:3])])
            AtA = A.T @ A
            if np.linalg.cond(AtA) > 1e12:
                ill.append(h.frame)
                warnings.warn(f"pure-force hypothesis '{h.frame}' is ill-conditioned", IllConditionedWarning, stacklevel=2)
                AtA = AtA + 1e-12 * np.eye(3)
            f = np.linalg.solve(AtA, A.T @ b)
            est = np.concatenate([f, np.cross(p_h, f)])
            mismatch = b - A @ f
            residuals[sname] = np.concatenate([R_s.T @ mismatch[:3], R_s.T @ mismatch[3:]])
        external[link] = external.get(link, np.zeros(6)) + est
        wrenches[h.frame] = SpatialWrench(est[:3], est[3:] - np.cross(p_h, est[:3]), h.frame, "world")

    # backward recursion; across a sensor cut the measured wrench replaces the model
    N = len(tree.names)
    T = [F[i] - external.get(i, 0.0) for i in range(N)]
    tau = np.zeros(tree.n)
    for i in range(N - 1, 0, -1):
        if i in part.cut:
            T[i] = W[part.cut[i]]
        d = tree.dof[i]
        if d >= 0:
            tau[d] = snap.S[i] @ T[i]
        T[tree.parent[i]] = T[tree.parent[i]] + T[i]
    return EstimationResult(tau, wrenches, residuals, ill)


# -- CSV traces --------------------------------------------------------------------------------

FT_COLUMNS = ("time", "sensor", "fx", "fy", "fz", "tx", "ty", "tz")


def write_ft_csv(records) -> str:
    """``records``: iterable of ``(time, sensor name, wrench)``."""
    out = io.StringIO()
    out.write(",".join(FT_COLUMNS) + "\n")
    for t, name, w in records:
        out.write(",".join([repr(float(t)), name] + [repr(float(v)) for v in _vector(w)]) + "\n")
    return out.getvalue()


def read_ft_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader, [])]
    if tuple(header) != FT_COLUMNS:
        raise ValueError(f"row 1: expected header {','.join(FT_COLUMNS)}")
    out = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(FT_COLUMNS):
            raise ValueError(f"row {lineno}: expected {len(FT_COLUMNS)} fields, got {len(rec)}")
        try:
            vals = [float(v) for v in (rec[0], *rec[2:])]
        except ValueError as exc:
            raise ValueError(f"row {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"row {lineno}: non-finite value")
        out.append((vals[0], rec[1], np.array(vals[1:])))
    return out
