"""Deterministic contact-constrained simulator.

Contacts are rigid and bilateral while active; activation is scripted.
Integration is semi-implicit Euler with Baumgarte stabilization of the
contact constraints.  Joints with a series-elastic spec are driven through
a spring by a motor with its own (reflected) inertia.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import yaml

from .dynamics import GRAVITY, ContactSet, Snapshot, SpatialWrench, integrate_state
from .model import RobotModel, neutral_state
from .motor import TorqueLoopGains, TorqueLoopState, control_voltage, motor_torque
from .state import FloatingBaseState

# below this motor speed the Coulomb term keeps the last slip direction;
# otherwise round-off around zero toggles the full friction on and off
STICTION_VELOCITY = 1e-9


class SimulationError(RuntimeError):
    """Non-finite state; ``trajectory`` holds everything recorded before the halt."""

    def __init__(self, message, time=None, trajectory=None):
        self.time = time
        self.trajectory = trajectory
        super().__init__(message if time is None else f"t={time!r}: {message}")


class SingularContactWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    gravity: tuple = tuple(GRAVITY)
    alpha: float = 10.0
    beta: float = 10.0
    seed: int = 0
    fixed_base: bool = False
    contact_model: str = "rigid-bilateral"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("stabilization gains must be non-negative")
        if self.contact_model != "rigid-bilateral":
            raise ValueError(f"unsupported contact model {self.contact_model!r}")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))


# -- series elastic joints ------------------------------------------------------------


@dataclass
class SeaState:
    """Motor-side position and velocity (link side, after the gear) per SEA joint."""

    joints: tuple
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.joints = tuple(int(j) for j in self.joints)
        self.position = np.asarray(self.position, dtype=float).reshape(len(self.joints))
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(len(self.joints))

    @classmethod
    def at_rest(cls, model: RobotModel, state: FloatingBaseState, preload=None) -> "SeaState":
        """Motors aligned with their links, optionally pre-deflected to ``preload`` N m."""
        joints, pos = [], []
        for j in model.revolute_joints:
            if j.sea is None:
                continue
            d = model.joint_index(j.name)
            joints.append(d)
            extra = 0.0 if preload is None else float(np.asarray(preload)[d]) / j.sea.stiffness
            pos.append(state.q[d] + extra)
        return cls(tuple(joints), np.array(pos), np.zeros(len(joints)))

    def copy(self) -> "SeaState":
        return SeaState(self.joints, self.position.copy(), self.velocity.copy())


def _sea_specs(model: RobotModel, sea_state: SeaState):
    return [model.revolute_joints[d].sea for d in sea_state.joints]


def spring_torques(model: RobotModel, state: FloatingBaseState, sea_state: SeaState) -> np.ndarray:
    """Torque each SEA spring/damper applies to its link."""
    out = np.zeros(len(sea_state.joints))
    for k, (d, spec) in enumerate(zip(sea_state.joints, _sea_specs(model, sea_state))):
        out[k] = spec.stiffness * (sea_state.position[k] - state.q[d]) + spec.damping * (
            sea_state.velocity[k] - state.qdot[d]
        )
    return out


def deflection_torques(model: RobotModel, state: FloatingBaseState, sea_state: SeaState) -> np.ndarray:
    """What a deflection encoder reports: stiffness times deflection."""
    return np.array(
        [
            spec.stiffness * (sea_state.position[k] - state.q[d])
            for k, (d, spec) in enumerate(zip(sea_state.joints, _sea_specs(model, sea_state)))
        ]
    )


# -- dynamics ---------------------------------------------------------------------------


def constrained_forward_dynamics(
    model: RobotModel,
    state: FloatingBaseState,
    tau,
    contacts: Optional[ContactSet],
    config: SimConfig = SimConfig(),
    external=None,
    snapshot: Optional[Snapshot] = None,
):
    """Accelerations and contact forces for joint torques ``tau``.

    Solves ``M nudot + h = B tau + J'f`` together with
    ``J nudot = -Jdot nu - 2 alpha J nu - beta^2 drift``.  ``external`` maps
    frame names to wrenches applied on top.  Redundant contacts make the
    system singular; the minimum-norm force is returned then.
    """
    snap = snapshot or Snapshot(model, state, config.gravity)
    nv = model.nv
    tau = np.asarray(tau, dtype=float).reshape(model.n)
    rhs = -snap.bias_forces
    ext = snap.external_body_forces(external)
    if ext:
        # externals enter linearly, so reuse the cached bias forces
        F = [ext.get(i, np.zeros(6)) for i in range(len(snap.tree.names))]
        rhs = rhs + snap.generalized_from_body_forces(F)
    rhs[6:] += tau
    sel = slice(6, nv) if config.fixed_base else slice(0, nv)
    M = snap.mass_matrix[sel, sel]
    b = rhs[sel]
    nudot = np.zeros(nv)
    chol = sla.cho_factor(M, lower=True, check_finite=False)
    free = sla.cho_solve(chol, b, check_finite=False)
    if contacts is None or contacts.dim == 0:
        nudot[sel] = free
        return nudot, np.zeros(0)
    J = contacts.jacobian(snap)[:, sel]
    nu = snap.state.nu
    gamma = -contacts.bias(snap) - 2.0 * config.alpha * (contacts.jacobian(snap) @ nu)
    gamma -= config.beta**2 * contacts.drift(snap)
    MinvJt = sla.cho_solve(chol, J.T, check_finite=False)
    Lam = J @ MinvJt
    r = gamma - J @ free
    f = _min_norm_solve(Lam, r)
    nudot[sel] = free + MinvJt @ f
    return nudot, f


def _min_norm_solve(A, b):
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
        x = sla.cho_solve(c, b, check_finite=False)
        # accept only a well-conditioned factorization
        if np.all(np.isfinite(x)) and np.min(np.abs(np.diag(c[0]))) > 1e-7 * math.sqrt(np.max(np.diag(A))):
            return x
    except np.linalg.LinAlgError:
        pass
    warnings.warn("redundant contacts: using the minimum-norm force", SingularContactWarning, stacklevel=3)
    return sla.lstsq(A, b, cond=1e-10, lapack_driver="gelsy", check_finite=False)[0]


@dataclass
class StepResult:
    state: FloatingBaseState
    sea_state: Optional[SeaState]
    forces: np.ndarray
    nudot: np.ndarray
    joint_torque: np.ndarray


def step(
    model: RobotModel,
    state: FloatingBaseState,
    tau,
    contacts: Optional[ContactSet],
    config: SimConfig = SimConfig(),
    sea_state: Optional[SeaState] = None,
    external=None,
    snapshot: Optional[Snapshot] = None,
) -> StepResult:
    """Advance one ``dt``.

    For SEA joints ``tau`` is the motor torque; the link sees the spring.
    """
    tau = np.array(tau, dtype=float).reshape(model.n)
    joint_tau = tau.copy()
    if sea_state is not None and sea_state.joints:
        tau_s = spring_torques(model, state, sea_state)
        joint_tau[list(sea_state.joints)] = tau_s
    nudot, f = constrained_forward_dynamics(model, state, joint_tau, contacts, config, external, snapshot)
    dt = config.dt
    nu = state.nu + dt * nudot
    if config.fixed_base:
        nu[:6] = 0.0
    new = integrate_state(state, nu, dt)
    new.nu = nu
    new_sea = None
    if sea_state is not None:
        new_sea = sea_state.copy()
        if sea_state.joints:
            inertia = np.array([s.motor_inertia for s in _sea_specs(model, sea_state)])
            acc = (tau[list(sea_state.joints)] - tau_s) / inertia
            new_sea.velocity = sea_state.velocity + dt * acc
            new_sea.position = sea_state.position + dt * new_sea.velocity
    finite = np.all(np.isfinite(new.nu)) and np.all(np.isfinite(new.q))
    finite = finite and np.all(np.isfinite(new.base_position)) and np.all(np.isfinite(new.base_orientation))
    if new_sea is not None:
        finite = finite and np.all(np.isfinite(new_sea.position)) and np.all(np.isfinite(new_sea.velocity))
    if not finite:
        raise SimulationError("state became non-finite")
    return StepResult(new, new_sea, f, nudot, joint_tau)


# -- scenario scripts ---------------------------------------------------------------------


@dataclass(frozen=True)
class Push:
    frame: str
    wrench: tuple
    start: float
    duration: float


@dataclass(frozen=True)
class ReferenceChange:
    time: float
    com: Optional[tuple] = None
    com_offset: Optional[tuple] = None
    posture: Optional[tuple] = None


@dataclass(frozen=True)
class ContactChange:
    time: float
    name: str
    active: bool


@dataclass
class Script:
    duration: float = 1.0
    pushes: list = field(default_factory=list)
    references: list = field(default_factory=list)
    contact_changes: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "Script":
        data = dict(data or {})
        out = cls(duration=float(data.get("duration", 1.0)))
        for k, ev in enumerate(data.get("events") or []):
            kind = ev.get("type")
            try:
                if kind == "push":
                    wrench = list(ev.get("force", [0, 0, 0])) + list(ev.get("torque", [0, 0, 0]))
                    out.pushes.append(
                        Push(str(ev["frame"]), tuple(map(float, wrench)), float(ev["start"]), float(ev["duration"]))
                    )
                elif kind == "reference":
                    out.references.append(
                        ReferenceChange(
                            float(ev["time"]),
                            _tuple(ev.get("com")),
                            _tuple(ev.get("com_offset")),
                            _tuple(ev.get("posture")),
                        )
                    )
                elif kind == "contact":
                    out.contact_changes.append(ContactChange(float(ev["time"]), str(ev["name"]), bool(ev["active"])))
                else:
                    raise ValueError(f"unknown event type {kind!r}")
            except KeyError as exc:
                raise ValueError(f"event {k}: missing field {exc.args[0]}") from None
        return out

    @classmethod
    def from_yaml(cls, text: str) -> "Script":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError("scenario script must be a mapping")
        return cls.from_dict(data.get("script", data))

    def check(self, model: RobotModel, contacts: Optional[ContactSet] = None):
        """Raise ``KeyError`` naming the first frame or contact that does not exist."""
        frames = model.tree.frames
        for p in self.pushes:
            if p.frame not in frames:
                raise KeyError(p.frame)
        names = {s.name for s in contacts.specs} if contacts is not None else {c.name for c in model.contacts}
        for c in self.contact_changes:
            if c.name not in names:
                raise KeyError(c.name)


def _tuple(v):
    return None if v is None else tuple(float(x) for x in v)


# -- trajectories --------------------------------------------------------------------------


@dataclass
class Trajectory:
    model: RobotModel
    dt: float
    force_labels: list
    time: list = field(default_factory=list)
    states: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    forces: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    com: list = field(default_factory=list)
    kinetic: list = field(default_factory=list)
    potential: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    external: list = field(default_factory=list)
    nudot: list = field(default_factory=list)
    cone_margin: list = field(default_factory=list)
    sea_states: list = field(default_factory=list)

    def __len__(self):
        return len(self.time)

    def array(self, name: str) -> np.ndarray:
        return np.array(getattr(self, name))

    @property
    def energy(self) -> np.ndarray:
        return np.array(self.kinetic) + np.array(self.potential)

    def header(self) -> list[str]:
        n, nv = self.model.n, self.model.nv
        cols = ["time"] + [f"q{i}" for i in range(n)]
        cols += ["quat_w", "quat_x", "quat_y", "quat_z", "pos_x", "pos_y", "pos_z"]
        cols += [f"nu{i}" for i in range(nv)] + [f"tau{i}" for i in range(n)]
        for lab in self.force_labels:
            cols += [f"f_{lab}_{a}" for a in "xyz"]
        cols += [f"H{i}" for i in range(6)] + ["E_kin", "E_pot"]
        return cols

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.header()) + "\n")
        for k in range(len(self.time)):
            s = self.states[k]
            vals = [self.time[k], *s.q, *s.base_orientation, *s.base_position, *s.nu]
            vals += [*self.tau[k], *self.forces[k], *self.momentum[k], self.kinetic[k], self.potential[k]]
            out.write(",".join(repr(float(v)) for v in vals) + "\n")
        return out.getvalue()

    def diagnostics_csv(self) -> str:
        out = io.StringIO()
        rows = [(self.time[k], d) for k, d in enumerate(self.diagnostics) if d is not None]
        if not rows:
            return "time\n"
        from .wbc import StepDiagnostics

        labels = [lab for lab in self.force_labels]
        out.write(",".join(["time"] + StepDiagnostics.csv_header(labels)) + "\n")
        for t, d in rows:
            out.write(",".join([repr(float(t))] + d.csv_row(labels)) + "\n")
        return out.getvalue()


# -- controllers ---------------------------------------------------------------------------


class BalanceController:
    """Hook running the whole-body controller, optionally through the motor torque loop."""

    def __init__(self, model, task, config=None, com_desired=None, torque_loop=None):
        from .wbc import ControllerConfig

        self.model = model
        self.task = task
        self.config = config or ControllerConfig()
        self.com_desired = None if com_desired is None else np.asarray(com_desired, dtype=float)
        self.torque_loop = torque_loop

    def reference(self, change: ReferenceChange):
        if change.com is not None:
            self.com_desired = np.array(change.com)
        if change.com_offset is not None:
            self.com_desired = self.com_desired + np.array(change.com_offset)
        if change.posture is not None:
            self.task.q_desired = np.array(change.posture)

    def __call__(self, t, state, snap, contacts, sea_state=None):
        from .wbc import control_step

        if self.com_desired is None:
            self.com_desired = snap.com.copy()
        tau, diag = control_step(
            self.model, state, contacts, self.com_desired, self.task, self.config, snapshot=snap
        )
        if self.torque_loop is not None:
            tau = self.torque_loop(tau, state, sea_state)
        return tau, diag


class MotorTorqueLoop:
    """Maps desired joint torques to motor torques through the voltage loop.

    Applies to joints with a motor spec; the measured torque is the spring
    deflection for SEA joints and the last applied torque otherwise.
    """

    def __init__(self, model: RobotModel, gains: TorqueLoopGains, dt: float):
        self.model = model
        self.gains = gains
        self.dt = dt
        self.joints = [
            (model.joint_index(j.name), j) for j in model.revolute_joints if j.motor is not None
        ]
        self.loop_states = {d: TorqueLoopState() for d, _ in self.joints}
        self.last = np.zeros(model.n)
        self.voltages = {d: 0.0 for d, _ in self.joints}
        self.slip = {d: 0.0 for d, _ in self.joints}

    def __call__(self, tau_desired, state, sea_state=None):
        out = np.array(tau_desired, dtype=float)
        measured = self.last.copy()
        velocity = state.qdot.copy()
        if sea_state is not None and sea_state.joints:
            measured[list(sea_state.joints)] = deflection_torques(self.model, state, sea_state)
            velocity[list(sea_state.joints)] = sea_state.velocity
        for d, j in self.joints:
            v, self.loop_states[d] = control_voltage(
                j.motor.params,
                self.gains,
                self.loop_states[d],
                float(tau_desired[d]),
                float(measured[d]),
                float(velocity[d]),
                self.dt,
            )
            self.voltages[d] = v
            w = float(velocity[d])
            if abs(w) > STICTION_VELOCITY:
                self.slip[d] = math.copysign(1.0, w)
            else:
                w = self.slip[d] * STICTION_VELOCITY
            out[d] = motor_torque(j.motor.params, v, w)
        self.last = out.copy()
        return out


class PostureHold:
    """Gravity compensation plus joint PD toward a fixed posture.

    The PD acts through the joint-space inertia, so ``kp`` and ``kd`` are in
    1/s^2 and 1/s for every joint regardless of how light it is.
    """

    def __init__(self, model: RobotModel, q_desired, kp=100.0, kd=20.0):
        self.model = model
        self.q_desired = np.array(q_desired, dtype=float).reshape(model.n)
        self.kp = kp
        self.kd = kd

    def reference(self, change: ReferenceChange):
        if change.posture is not None:
            self.q_desired = np.array(change.posture)

    def __call__(self, t, state, snap, contacts, sea_state=None):
        acc = self.kp * (self.q_desired - state.q) - self.kd * state.qdot
        tau = snap.gravity_forces[6:] + snap.mass_matrix[6:, 6:] @ acc
        return tau, None


def place_on_ground(model: RobotModel, state: FloatingBaseState, contacts: ContactSet) -> FloatingBaseState:
    """Shift the base vertically so the lowest active contact point sits at z = 0."""
    out = state.copy()
    pts = contacts.positions(Snapshot(model, out))
    if pts.size:
        out.base_position[2] -= float(pts[:, 2].min())
    return out


def standing_state(model: RobotModel, contacts: Optional[ContactSet] = None) -> FloatingBaseState:
    """Neutral posture resting on the active contacts."""
    contacts = contacts if contacts is not None else ContactSet(model)
    return place_on_ground(model, neutral_state(model), contacts)


# -- scenario loop -----------------------------------------------------------------------------


def _cone_margin(contacts: ContactSet, snap: Snapshot, f) -> float:
    """Smallest slack of the linearized cone rows (negative means outside)."""
    if contacts.dim == 0:
        return math.inf
    A, b = contacts.cone_constraints(snap)
    return float(np.min(b - A @ f))


def _steps(t, dt):
    return int(round(t / dt))


def run_scenario(
    model: RobotModel,
    controller: Optional[Callable],
    script: Script,
    config: SimConfig = SimConfig(),
    state: Optional[FloatingBaseState] = None,
    contacts: Optional[ContactSet] = None,
    sea_state: Optional[SeaState] = None,
) -> Trajectory:
    """Fixed-step loop: controller, then :func:`step`; records every step.

    ``controller(t, state, snapshot, contacts, sea_state)`` returns
    ``(tau, diagnostics)``; ``None`` means zero torque.  Event times are
    rounded to whole steps.
    """
    contacts = contacts if contacts is not None else ContactSet(model, active={})
    script.check(model, contacts)
    state = (state or neutral_state(model)).copy()
    dt = config.dt
    n_steps = _steps(script.duration, dt)
    all_labels = ContactSet(model, [s.name for s in contacts.specs]).labels
    traj = Trajectory(model, dt, all_labels)
    contacts.anchor_all(Snapshot(model, state, config.gravity))
    label_pos = {lab: 3 * k for k, lab in enumerate(all_labels)}

    pushes = [(_steps(p.start, dt), _steps(p.start + p.duration, dt), p) for p in script.pushes]
    refs = sorted(script.references, key=lambda r: r.time)
    toggles = sorted(script.contact_changes, key=lambda c: c.time)

    # redundant stance contacts warn on every step; report each distinct warning once
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for k in range(n_steps):
            t = k * dt
            snap = Snapshot(model, state, config.gravity)
            while toggles and _steps(toggles[0].time, dt) <= k:
                ev = toggles.pop(0)
                if ev.active:
                    contacts.activate(ev.name, snap)
                else:
                    contacts.deactivate(ev.name)
            while refs and _steps(refs[0].time, dt) <= k:
                ev = refs.pop(0)
                if hasattr(controller, "reference"):
                    controller.reference(ev)
            external = {}
            for k0, k1, p in pushes:
                if k0 <= k < k1:
                    w = SpatialWrench.from_vector(p.wrench, p.frame)
                    if p.frame in external:
                        w = SpatialWrench.from_vector(external[p.frame].vector + w.vector, p.frame)
                    external[p.frame] = w
            if controller is None:
                tau, diag = np.zeros(model.n), None
            else:
                tau, diag = controller(t, state, snap, contacts, sea_state)
            try:
                res = step(model, state, tau, contacts, config, sea_state, external or None, snap)
            except SimulationError as exc:
                raise SimulationError(str(exc), t, traj) from None

            fvec = np.zeros(3 * len(all_labels))
            for j, lab in enumerate(contacts.labels):
                fvec[label_pos[lab] : label_pos[lab] + 3] = res.forces[3 * j : 3 * j + 3]
            H = snap.centroidal_momentum
            traj.time.append(t)
            traj.states.append(state)
            traj.tau.append(res.joint_torque)
            traj.forces.append(fvec)
            traj.momentum.append(H.vector.copy())
            traj.com.append(H.com.copy())
            traj.kinetic.append(snap.kinetic_energy)
            traj.potential.append(snap.potential_energy)
            traj.diagnostics.append(diag)
            traj.external.append(external)
            traj.nudot.append(res.nudot)
            traj.cone_margin.append(_cone_margin(contacts, snap, res.forces))
            traj.sea_states.append(sea_state)
            state, sea_state = res.state, res.sea_state
    seen = set()
    for w in caught:
        key = (w.category, str(w.message))
        if key not in seen:
            seen.add(key)
            warnings.warn(w.message, w.category, stacklevel=2)
    traj.final_state = state
    traj.final_sea_state = sea_state
    return traj
