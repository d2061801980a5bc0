"""Two-level momentum-based whole-body controller.

Stage one picks contact forces ``f*`` that best realize a desired rate of
change of centroidal momentum inside linearized friction cones.  Stage two
fixes ``f = f*`` and picks the joint torques closest to a postural torque
``phi`` that are consistent with the rigid-body dynamics and with the
contacts staying put.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import yaml

from .dynamics import ContactSet, Snapshot
from .model import RobotModel
from .qp import INFEASIBLE, OPTIMAL, QpProblem, QpSolution, solve_qp
from .state import FloatingBaseState


class DegenerateContactWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MomentumGains:
    kp: float = 50.0
    kd: float = 14.0
    k_omega: float = 5.0

    def __post_init__(self):
        if min(self.kp, self.kd, self.k_omega) < 0:
            raise ValueError("momentum gains must be non-negative")


@dataclass
class MomentumReference:
    """Desired momentum rate about the CoM: force (N) then torque (N m)."""

    rate: np.ndarray

    def __post_init__(self):
        self.rate = np.asarray(self.rate, dtype=float).reshape(6)
        if not np.all(np.isfinite(self.rate)):
            raise ValueError("momentum reference must be finite")

    @property
    def linear(self) -> np.ndarray:
        return self.rate[:3]

    @property
    def angular(self) -> np.ndarray:
        return self.rate[3:]


@dataclass
class PosturalTask:
    q_desired: np.ndarray
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        self.q_desired = np.atleast_1d(np.asarray(self.q_desired, dtype=float))
        n = self.q_desired.size
        self.kp = np.broadcast_to(np.asarray(self.kp, dtype=float), (n,)).copy()
        self.kd = np.broadcast_to(np.asarray(self.kd, dtype=float), (n,)).copy()
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("postural gains must be non-negative")

    @property
    def n(self) -> int:
        return self.q_desired.size


@dataclass
class ControllerConfig:
    """Tunables of :func:`control_step`; loadable from YAML."""

    momentum: MomentumGains = field(default_factory=MomentumGains)
    posture_kp: float = 20.0
    posture_kd: float = 2.0
    regularization: float = 1e-6
    cone_facets: Optional[int] = None
    qp_tolerance: float = 1e-9
    qp_max_iterations: int = 200
    residual_tolerance: float = 1e-8
    # add the equalities that keep f* reachable by some torque (see solve_contact_forces)
    realizable_forces: bool = True
    fixed_base: bool = False
    fallback: str = "gravity_compensation"

    def __post_init__(self):
        if isinstance(self.momentum, dict):
            self.momentum = MomentumGains(**self.momentum)
        if not self.regularization > 0:
            raise ValueError("regularization must be positive")
        if self.cone_facets is not None and self.cone_facets < 4:
            raise ValueError("cone_facets must be at least 4")
        if self.fallback != "gravity_compensation":
            raise ValueError(f"unknown fallback policy {self.fallback!r}")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ControllerConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown controller option(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, text: str) -> "ControllerConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError("controller config must be a mapping")
        return cls.from_dict(data.get("controller", data))


# -- momentum reference ---------------------------------------------------------


def momentum_reference(
    model: RobotModel,
    state: FloatingBaseState,
    com_desired,
    gains: MomentumGains,
    com_velocity_desired=None,
    snapshot: Optional[Snapshot] = None,
) -> MomentumReference:
    """PD on the CoM for the linear part, damping of the angular part."""
    snap = snapshot or Snapshot(model, state)
    H = snap.centroidal_momentum
    m = H.mass
    cd = np.asarray(com_desired, dtype=float).reshape(3)
    vd = np.zeros(3) if com_velocity_desired is None else np.asarray(com_velocity_desired, float)
    lin = m * (gains.kp * (cd - H.com) + gains.kd * (vd - H.linear / m))
    return MomentumReference(np.concatenate([lin, -gains.k_omega * H.angular]))


# -- stage one: contact forces ------------------------------------------------------


@dataclass
class ContactForceSolution:
    forces: np.ndarray
    achieved: np.ndarray
    qp: QpSolution
    problem: QpProblem
    degenerate: bool = False

    @property
    def ok(self) -> bool:
        return self.qp.ok


def gravity_wrench(mass: float, gravity) -> np.ndarray:
    return np.concatenate([mass * np.asarray(gravity, dtype=float), np.zeros(3)])


def contact_force_problem(
    H_desired, X, mass, gravity, cones, regularization=1e-6, equalities=None
) -> QpProblem:
    """Assemble ``min |Hd - X f - w_g|^2 + lambda |f|^2`` over the cones (halved)."""
    Hd = H_desired.rate if isinstance(H_desired, MomentumReference) else np.asarray(H_desired, float)
    X = np.asarray(X, dtype=float)
    target = Hd - gravity_wrench(mass, gravity)
    nf = X.shape[1]
    A_in, b_in = cones
    A_eq, b_eq = (None, None) if equalities is None else equalities
    return QpProblem(
        X.T @ X + regularization * np.eye(nf), -X.T @ target, A_eq, b_eq, A_in, b_in
    )


def _degenerate_contact_map(X) -> bool:
    """Coincident points, or three or more points on one line.

    Those layouts lose a rank of the momentum map that the point count
    would otherwise provide (a lone point or a pair is never flagged).
    """
    k = X.shape[1] // 3
    if k < 2:
        return False
    S = X[3:].reshape(3, k, 3)
    r = np.stack([S[2, :, 1], S[0, :, 2], S[1, :, 0]], axis=1)
    D = r[1:] - r[0]
    tol = 1e-9 * max(1.0, float(np.abs(r).max()))
    lengths = np.sqrt((D * D).sum(axis=1))
    if lengths.min() <= tol:
        return True
    if k == 2:
        return False
    d = D[np.argmax(lengths)] / lengths.max()
    cross = np.column_stack(
        [D[:, 1] * d[2] - D[:, 2] * d[1], D[:, 2] * d[0] - D[:, 0] * d[2], D[:, 0] * d[1] - D[:, 1] * d[0]]
    )
    return bool(np.abs(cross).max() <= tol)


def solve_contact_forces(
    H_desired,
    X,
    mass: float,
    gravity,
    cones,
    regularization: float = 1e-6,
    equalities=None,
    tolerance: float = 1e-9,
    max_iterations: int = 200,
) -> ContactForceSolution:
    """Contact forces that best produce ``H_desired`` within the friction cones.

    ``cones`` is ``(A, b)`` with ``A f <= b``.  ``equalities`` optionally adds
    ``(A_eq, b_eq)``; :func:`control_step` uses it to keep ``f*`` reachable by
    the torque stage.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != 6 or X.shape[1] == 0:
        raise ValueError("at least one active contact is required")
    degenerate = _degenerate_contact_map(X)
    if degenerate:
        warnings.warn("contact map is rank deficient", DegenerateContactWarning, stacklevel=2)
    problem = contact_force_problem(H_desired, X, mass, gravity, cones, regularization, equalities)
    sol = solve_qp(problem, tolerance, max_iterations)
    if equalities is None:
        # f = 0 is always feasible, so the cone-only problem cannot be infeasible
        assert sol.status != INFEASIBLE, "cone-only contact force problem reported infeasible"
    achieved = X @ sol.x + gravity_wrench(mass, gravity)
    return ContactForceSolution(sol.x, achieved, sol, problem, bool(degenerate))


# -- stage two: torques -------------------------------------------------------------


def postural_term(
    model: RobotModel,
    state: FloatingBaseState,
    task: PosturalTask,
    snapshot: Optional[Snapshot] = None,
    gravity=None,
) -> np.ndarray:
    if task.n != model.n:
        raise ValueError(f"postural task has {task.n} joints, model has {model.n}")
    snap = snapshot or Snapshot(model, state, gravity)
    g_joint = snap.gravity_forces[6:]
    return g_joint - task.kp * (state.q - task.q_desired) - task.kd * state.qdot


class ConstrainedDynamics:
    """The linear system of the torque stage for one state.

    Unknowns ``z = (nudot, tau)``; rows are the equations of motion and the
    contact acceleration constraint::

        [M  -B] z = J'f - h
        [J   0] z = -Jdot nu

    With ``fixed_base`` the base is welded: its accelerations are zero and the
    base rows of the dynamics carry the unknown reaction, so both drop out.
    A single SVD of the system serves both stages.
    """

    def __init__(self, snap: Snapshot, contacts: Optional[ContactSet], fixed_base=False, rtol=1e-10):
        nv = snap.tree.nv
        n = nv - 6
        self.snap = snap
        self.fixed_base = fixed_base
        J = contacts.jacobian(snap) if contacts is not None else np.zeros((0, nv))
        jb = contacts.bias(snap) if contacts is not None else np.zeros(0)
        self.J = J
        self.Jdot_nu = jb
        h = snap.bias_forces
        rows = slice(6, nv) if fixed_base else slice(0, nv)
        M = snap.mass_matrix[rows, rows]
        Jr = J[:, rows]
        nd = M.shape[0]
        B = np.zeros((nd, n))
        B[nd - n :, :] = np.eye(n)
        k = J.shape[0]
        K = np.zeros((nd + k, nd + n))
        K[:nd, :nd] = M
        K[:nd, nd:] = -B
        K[nd:, :nd] = Jr
        self.K = K
        self.rows = rows
        self.n_dyn = nd
        self.n = n
        self.h = h[rows]
        self.Jt = Jr.T
        U, s, Vt = np.linalg.svd(K)
        r = int(np.sum(s > rtol * s[0])) if s.size else 0
        self.U, self.s, self.Vt, self.rank = U, s, Vt, r

    def rhs(self, f) -> np.ndarray:
        return np.concatenate([self.Jt @ f - self.h, -self.Jdot_nu])

    def realizability(self, rtol=1e-9):
        """Equalities ``A f = b`` that make the system consistent for ``f``.

        Projects onto the left null space of the system matrix and keeps the
        independent rows only.  Returns ``None`` when every ``f`` is fine.
        """
        U0 = self.U[:, self.rank :]
        if U0.shape[1] == 0:
            return None
        nf = self.Jt.shape[1]
        lift = np.vstack([self.Jt, np.zeros((self.J.shape[0], nf))])
        C = U0.T @ lift
        d = U0.T @ np.concatenate([self.h, self.Jdot_nu])
        P, sig, _ = np.linalg.svd(C, full_matrices=False)
        keep = sig > rtol * max(1.0, sig[0] if sig.size else 0.0)
        if not np.any(keep):
            return None
        Pk = P[:, keep]
        return Pk.T @ C, Pk.T @ d

    def solve(self, f, phi):
        """Least-squares ``(nudot, tau)`` closest to ``tau = phi``; see :func:`solve_torques`."""
        r = self.rhs(f)
        U, s, Vt, k = self.U, self.s, self.Vt, self.rank
        z = Vt[:k].T @ ((U[:, :k].T @ r) / s[:k])
        nd = self.n_dyn
        N_tau = Vt[k:, nd:].T
        if N_tau.shape[1]:
            w = np.linalg.lstsq(N_tau, phi - z[nd:], rcond=None)[0]
            z = z + Vt[k:].T @ w
        res = self.K @ z - r
        return z[:nd], z[nd:], res[:nd], res[nd:]


@dataclass
class TorqueSolution:
    tau: np.ndarray
    nudot: np.ndarray
    dynamics_residual: float
    contact_residual: float
    status: str

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def solve_torques(
    model: RobotModel,
    state: FloatingBaseState,
    forces,
    phi,
    contacts: Optional[ContactSet] = None,
    fixed_base: bool = False,
    residual_tolerance: float = 1e-8,
    system: Optional[ConstrainedDynamics] = None,
) -> TorqueSolution:
    """Torques closest to ``phi`` with the contact forces held at ``forces``.

    Returned ``nudot`` is the full generalized acceleration (base entries are
    zero for a fixed base).  ``status`` is ``infeasible`` when the equations
    cannot all hold, in which case the residuals say by how much.
    """
    phi = np.asarray(phi, dtype=float).reshape(model.n)
    forces = np.asarray(forces, dtype=float).reshape(-1)
    sys_ = system or ConstrainedDynamics(Snapshot(model, state), contacts, fixed_base)
    if forces.size != sys_.J.shape[0]:
        raise ValueError(f"{forces.size} force components for {sys_.J.shape[0]} contact rows")
    nv = model.nv
    nudot = np.zeros(nv)
    if sys_.J.shape[0] == 0:
        # nothing couples the joints: any torque is feasible, so phi itself is optimal
        tau = phi.copy()
        M = sys_.K[: sys_.n_dyn, : sys_.n_dyn]
        gen = -sys_.h.copy()
        gen[sys_.n_dyn - sys_.n :] += tau
        acc = np.linalg.solve(M, gen)
        res_dyn = M @ acc - gen
        res_con = np.zeros(0)
    else:
        acc, tau, res_dyn, res_con = sys_.solve(forces, phi)
    nudot[sys_.rows] = acc
    rd = float(np.abs(res_dyn).max(initial=0.0))
    rc = float(np.abs(res_con).max(initial=0.0))
    status = OPTIMAL if max(rd, rc) < residual_tolerance else INFEASIBLE
    return TorqueSolution(tau, nudot, rd, rc, status)


# -- the full step ------------------------------------------------------------------


@dataclass
class StepDiagnostics:
    H_desired: np.ndarray
    forces: np.ndarray
    H_achieved: np.ndarray
    force_status: str
    torque_status: str
    dynamics_residual: float
    contact_residual: float
    fallback: bool
    wall_time: float
    nudot: Optional[np.ndarray] = None
    force_problem: Optional[QpProblem] = None
    force_labels: Optional[list] = None

    @property
    def ok(self) -> bool:
        return not self.fallback

    CSV_SCALARS = ("force_status", "torque_status", "dynamics_residual", "contact_residual", "fallback")

    @staticmethod
    def csv_header(force_labels) -> list[str]:
        cols = [f"Hd{i}" for i in range(6)] + [f"Ha{i}" for i in range(6)]
        for lab in force_labels:
            cols += [f"fstar_{lab}_{a}" for a in "xyz"]
        return cols + list(StepDiagnostics.CSV_SCALARS)

    def csv_row(self, force_labels=None) -> list[str]:
        # wall time is left out so that traces stay byte-reproducible
        forces = self.forces
        if force_labels is not None and self.force_labels is not None:
            forces = np.zeros(3 * len(force_labels))
            for j, lab in enumerate(self.force_labels):
                k = force_labels.index(lab)
                forces[3 * k : 3 * k + 3] = self.forces[3 * j : 3 * j + 3]
        vals = [repr(float(v)) for v in np.concatenate([self.H_desired, self.H_achieved, forces])]
        return vals + [
            self.force_status,
            self.torque_status,
            repr(self.dynamics_residual),
            repr(self.contact_residual),
            str(int(self.fallback)),
        ]


def control_step(
    model: RobotModel,
    state: FloatingBaseState,
    contacts: ContactSet,
    com_desired,
    task: PosturalTask,
    config: Optional[ControllerConfig] = None,
    snapshot: Optional[Snapshot] = None,
    com_velocity_desired=None,
) -> tuple[np.ndarray, StepDiagnostics]:
    """Momentum reference, contact forces, postural torque, torque selection.

    On any failure the gravity-compensation torque is returned and
    ``diagnostics.fallback`` is set.
    """
    cfg = config or ControllerConfig()
    t0 = time.perf_counter()
    snap = snapshot or Snapshot(model, state)
    phi = postural_term(model, state, task, snap)
    g_joint = snap.gravity_forces[6:]
    mass = model.tree.total_mass

    Hd = momentum_reference(model, state, com_desired, cfg.momentum, com_velocity_desired, snap)
    system = ConstrainedDynamics(snap, contacts, cfg.fixed_base)
    nf = system.J.shape[0]

    stage1 = None
    problem = None
    if nf == 0:
        forces = np.zeros(0)
        achieved = gravity_wrench(mass, snap.gravity)
        force_status = OPTIMAL
    else:
        eq = system.realizability() if cfg.realizable_forces else None
        X = contacts.contact_map(snap)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateContactWarning)
            stage1 = solve_contact_forces(
                Hd,
                X,
                mass,
                snap.gravity,
                contacts.cone_constraints(snap, cfg.cone_facets),
                cfg.regularization,
                eq,
                cfg.qp_tolerance,
                cfg.qp_max_iterations,
            )
        forces, achieved, force_status = stage1.forces, stage1.achieved, stage1.qp.status
        problem = stage1.problem

    torque_status = "skipped"
    rd = rc = float("nan")
    nudot = None
    tau = None
    if force_status == OPTIMAL:
        sol = solve_torques(
            model, state, forces, phi, contacts, cfg.fixed_base, cfg.residual_tolerance, system
        )
        torque_status, rd, rc, nudot = sol.status, sol.dynamics_residual, sol.contact_residual, sol.nudot
        if sol.ok:
            tau = sol.tau
    fallback = tau is None
    if fallback:
        tau = g_joint.copy()
    diag = StepDiagnostics(
        H_desired=Hd.rate,
        forces=forces,
        H_achieved=achieved,
        force_status=force_status,
        torque_status=torque_status,
        dynamics_residual=rd,
        contact_residual=rc,
        fallback=fallback,
        wall_time=time.perf_counter() - t0,
        nudot=nudot,
        force_problem=problem,
        force_labels=list(contacts.labels) if contacts is not None else [],
    )
    return tau, diag

