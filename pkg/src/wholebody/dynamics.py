"""Floating-base rigid-body dynamics by recursion over the kinematic tree.

Internally every spatial quantity is expressed in world coordinates about the
world origin (linear-first ordering).  At the interface:

* ``nu`` base rows are the base-origin linear velocity and the angular
  velocity, both in world axes (mixed representation);
* frame twists and wrenches are world-aligned and located at the frame origin,
  so a wrench ``w`` applied at a frame contributes ``J.T @ w`` to the
  generalized forces.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Mapping, Optional

import numpy as np

from .model import RobotModel
from .spatial import quat_exp, quat_mul, quat_to_rot, rot_axis_angle, skew
from .state import FloatingBaseState

GRAVITY = np.array([0.0, 0.0, -9.80665])

__all__ = [
    "GRAVITY",
    "FloatingBaseState",
    "SpatialWrench",
    "CentroidalMomentum",
    "ContactSet",
    "KinematicTree",
    "Snapshot",
    "forward_kinematics",
    "frame_jacobian",
    "bias_acceleration",
    "rnea",
    "mass_matrix",
    "bias_forces",
    "gravity_forces",
    "centroidal_momentum",
    "center_of_mass",
    "contact_map",
    "integrate_state",
]


def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def _vcross(a, b):
    """Row-wise cross product of ``(..., 3)`` arrays (cheaper than np.cross on small inputs)."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _spatial_inertias(mass, com, inertia_com) -> np.ndarray:
    """Batched :func:`spatial_inertia` over leading axis."""
    N = mass.size
    c = np.zeros((N, 3, 3))
    c[:, 0, 1], c[:, 0, 2], c[:, 1, 2] = -com[:, 2], com[:, 1], -com[:, 0]
    c[:, 1, 0], c[:, 2, 0], c[:, 2, 1] = com[:, 2], -com[:, 1], com[:, 0]
    m = mass[:, None, None]
    out = np.empty((N, 6, 6))
    out[:, :3, :3] = m * np.eye(3)
    out[:, :3, 3:] = -m * c
    out[:, 3:, :3] = m * c
    out[:, 3:, 3:] = inertia_com - m * (c @ c)
    return out


def _mcross(v, m):
    """Motion cross product ``v x m`` for linear-first motion vectors."""
    w, lin = v[3:], v[:3]
    return np.concatenate([_cross(w, m[:3]) + _cross(lin, m[3:]), _cross(w, m[3:])])


def _fcross(v, f):
    """Force cross product ``v x* f``."""
    w, lin = v[3:], v[:3]
    return np.concatenate([_cross(w, f[:3]), _cross(lin, f[:3]) + _cross(w, f[3:])])


@dataclass
class SpatialWrench:
    """Force/torque pair acting at the origin of ``frame``.

    ``axes="world"`` means the components are world-aligned (the dual of the
    frame's mixed twist); ``axes="local"`` means they are in the frame's own
    axes and are rotated on use.
    """

    force: np.ndarray
    torque: np.ndarray
    frame: str
    axes: str = "world"

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float).reshape(3)
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)
        if not self.frame:
            raise ValueError("a wrench needs a frame annotation")
        if self.axes not in ("world", "local"):
            raise ValueError("axes must be 'world' or 'local'")

    @classmethod
    def from_vector(cls, vec, frame, axes="world"):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:3], vec[3:], frame, axes)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def world_aligned(self, rotation) -> "SpatialWrench":
        if self.axes == "world":
            return self
        return SpatialWrench(rotation @ self.force, rotation @ self.torque, self.frame, "world")

    def shifted(self, offset) -> np.ndarray:
        """Same wrench about a point ``offset`` away (world axes); adjoint-transpose map."""
        return np.concatenate([self.force, self.torque - _cross(offset, self.force)])


@dataclass
class CentroidalMomentum:
    """Linear momentum (rows 0-2) and angular momentum about the CoM (rows 3-5)."""

    vector: np.ndarray
    com: np.ndarray
    mass: float

    @property
    def linear(self) -> np.ndarray:
        return self.vector[:3]

    @property
    def angular(self) -> np.ndarray:
        return self.vector[3:]


class KinematicTree:
    """Array form of a :class:`RobotModel` used by the recursions."""

    def __init__(self, model: RobotModel):
        order = model.topological_order()
        index = {name: i for i, name in enumerate(order)}
        by_child = {j.child: j for j in model.joints}
        N = len(order)
        self.names = order
        self.index = index
        self.parent = [-1] * N
        self.R0 = [np.eye(3)] * N
        self.p0 = [np.zeros(3)] * N
        self.axis = [np.zeros(3)] * N
        self.dof = [-1] * N
        self.joint_names = [None] * N
        dof = 0
        for i, name in enumerate(order[1:], start=1):
            j = by_child[name]
            self.parent[i] = index[j.parent]
            self.R0[i] = j.origin.rotation
            self.p0[i] = j.origin.translation
            self.joint_names[i] = j.name
            if j.type == "revolute":
                self.axis[i] = np.array(j.axis, dtype=float)
                self.dof[i] = dof
                dof += 1
        self.n = dof
        self.nv = 6 + dof
        links = {l.name: l for l in model.links}
        self.mass = np.array([links[n].mass for n in order], dtype=float)
        self.com = [np.array(links[n].com, dtype=float) for n in order]
        self.inertia = [links[n].inertia_matrix for n in order]
        self.total_mass = float(self.mass.sum())
        self.com_stack = np.array(self.com).reshape(N, 3)
        self.inertia_stack = np.array(self.inertia).reshape(N, 3, 3)
        # ancestor links carrying a dof, nearest first (the link itself included)
        self.dof_path = []
        for i in range(N):
            path, k = [], i
            while k > 0:
                if self.dof[k] >= 0:
                    path.append(k)
                k = self.parent[k]
            self.dof_path.append(path)
        self.frames = {name: (i, np.eye(3), np.zeros(3)) for i, name in enumerate(order)}
        for c in model.contacts:
            if c.link in index:
                self.frames[c.name] = (index[c.link], c.origin.rotation, c.origin.translation)

    def frame(self, name):
        try:
            return self.frames[name]
        except KeyError:
            raise KeyError(f"unknown frame '{name}'") from None

    def in_subtree(self, link: int, root: int) -> bool:
        while link >= 0:
            if link == root:
                return True
            link = self.parent[link]
        return False


class Snapshot:
    """Kinematics of one state, with dynamics quantities computed on demand.

    All results are pure functions of ``(model, state, gravity)``.
    """

    def __init__(self, model: RobotModel, state: FloatingBaseState, gravity=None):
        tree = model.tree
        if state.q.size != tree.n:
            raise ValueError(f"state has {state.q.size} joints, model has {tree.n}")
        self.model = model
        self.tree = tree
        self.state = state
        self.gravity = GRAVITY if gravity is None else np.asarray(gravity, dtype=float)
        N = len(tree.names)
        q, qd = state.q, state.nu[6:]
        R = [None] * N
        p = [None] * N
        S = [None] * N
        V = [None] * N
        R[0] = quat_to_rot(state.base_orientation)
        p[0] = state.base_position.copy()
        vB, w = state.nu[:3], state.nu[3:6]
        V[0] = np.concatenate([vB + _cross(p[0], w), w])
        for i in range(1, N):
            par = tree.parent[i]
            Rj = R[par] @ tree.R0[i]
            p[i] = p[par] + R[par] @ tree.p0[i]
            d = tree.dof[i]
            if d >= 0:
                a = Rj @ tree.axis[i]
                R[i] = Rj @ rot_axis_angle(tree.axis[i], q[d])
                S[i] = np.concatenate([_cross(p[i], a), a])
                V[i] = V[par] + S[i] * qd[d]
            else:
                R[i] = Rj
                V[i] = V[par]
        self.R, self.p, self.S, self.V = R, p, S, V
        Rs = np.array(R)
        com = np.array(p) + np.einsum("nij,nj->ni", Rs, tree.com_stack)
        self.com_world = com
        self.I6 = _spatial_inertias(tree.mass, com, Rs @ tree.inertia_stack @ Rs.transpose(0, 2, 1))

    # -- frames -------------------------------------------------------------

    def frame_pose(self, frame: str):
        i, Roff, poff = self.tree.frame(frame)
        return self.R[i] @ Roff, self.p[i] + self.R[i] @ poff

    def point_jacobian(self, link: int, point) -> np.ndarray:
        """3 x nv linear-velocity Jacobian of a world point fixed to ``link``."""
        J = np.zeros((3, self.tree.nv))
        J[:, :3] = np.eye(3)
        J[:, 3:6] = -skew(point - self.p[0])
        for k in self.tree.dof_path[link]:
            a = self.S[k][3:]
            J[:, 6 + self.tree.dof[k]] = _cross(a, point - self.p[k])
        return J

    def jacobian(self, frame: str) -> np.ndarray:
        i, _, _ = self.tree.frame(frame)
        _, pf = self.frame_pose(frame)
        J = np.zeros((6, self.tree.nv))
        J[:3] = self.point_jacobian(i, pf)
        J[3:6, 3:6] = np.eye(3)
        for k in self.tree.dof_path[i]:
            J[3:, 6 + self.tree.dof[k]] = self.S[k][3:]
        return J

    @cached_property
    def dof_axes(self):
        """World axis and origin of every dof, as ``(n, 3)`` arrays in dof order."""
        tree = self.tree
        axes = np.zeros((tree.n, 3))
        origins = np.zeros((tree.n, 3))
        for i, d in enumerate(tree.dof):
            if d >= 0:
                axes[d] = self.S[i][3:]
                origins[d] = self.p[i]
        return axes, origins

    @cached_property
    def velocity_product_accelerations(self):
        """Spatial accelerations of every link for nudot = 0 and no gravity."""
        tree, qd = self.tree, self.state.nu[6:]
        vB, w = self.state.nu[:3], self.state.nu[3:6]
        A = [None] * len(tree.names)
        A[0] = np.concatenate([_cross(vB, w), np.zeros(3)])
        for i in range(1, len(tree.names)):
            par = tree.parent[i]
            d = tree.dof[i]
            if d >= 0:
                A[i] = A[par] + _mcross(self.V[i], self.S[i] * qd[d])
            else:
                A[i] = A[par]
        return A

    def point_bias(self, link: int, point) -> np.ndarray:
        """Linear part of Jdot*nu for a world point fixed to ``link``."""
        A = self.velocity_product_accelerations[link]
        V = self.V[link]
        vp = V[:3] + _cross(V[3:], point)
        return A[:3] + _cross(A[3:], point) + _cross(V[3:], vp)

    def frame_bias(self, frame: str) -> np.ndarray:
        i, _, _ = self.tree.frame(frame)
        _, pf = self.frame_pose(frame)
        return np.concatenate([self.point_bias(i, pf), self.velocity_product_accelerations[i][3:]])

    # -- inverse dynamics -----------------------------------------------------

    def body_forces(self, nudot, gravity=True) -> list:
        """Net spatial force each body needs for the motion ``nudot``.

        With ``gravity=True`` the weight is folded in (fictitious base
        acceleration), so the result is what the joints and externals supply.
        """
        tree, st = self.tree, self.state
        nudot = np.asarray(nudot, dtype=float)
        if nudot.size != tree.nv:
            raise ValueError(f"nudot has {nudot.size} entries, expected {tree.nv}")
        qd, qdd = st.nu[6:], nudot[6:]
        vB, w = st.nu[:3], st.nu[3:6]
        pB = self.p[0]
        lin = nudot[:3] + _cross(vB, w) + _cross(pB, nudot[3:6])
        if gravity:
            lin = lin - self.gravity
        N = len(tree.names)
        A = [None] * N
        A[0] = np.concatenate([lin, nudot[3:6]])
        for i in range(1, N):
            par = tree.parent[i]
            d = tree.dof[i]
            if d >= 0:
                A[i] = A[par] + self.S[i] * qdd[d] + _mcross(self.V[i], self.S[i] * qd[d])
            else:
                A[i] = A[par]
        # batched over links: F = I a + v x* (I v)
        V = np.array(self.V)
        IV = np.einsum("nij,nj->ni", self.I6, V)
        F = np.einsum("nij,nj->ni", self.I6, np.array(A))
        F[:, :3] += _vcross(V[:, 3:], IV[:, :3])
        F[:, 3:] += _vcross(V[:, :3], IV[:, :3]) + _vcross(V[:, 3:], IV[:, 3:])
        return list(F)

    def external_body_forces(self, external: Optional[Mapping[str, SpatialWrench]]) -> dict:
        """Map frame wrenches to world-origin spatial forces on their links."""
        out = {}
        if not external:
            return out
        for name, wrench in external.items():
            i, _, _ = self.tree.frame(name)
            Rf, pf = self.frame_pose(name)
            if not isinstance(wrench, SpatialWrench):
                wrench = SpatialWrench.from_vector(wrench, name)
            wrench = wrench.world_aligned(Rf)
            f6 = np.concatenate([wrench.force, wrench.torque + _cross(pf, wrench.force)])
            out[i] = out.get(i, 0.0) + f6
        return out

    def generalized_from_body_forces(self, F) -> np.ndarray:
        tree = self.tree
        F = [f.copy() for f in F]
        tau = np.zeros(tree.nv)
        for i in range(len(tree.names) - 1, 0, -1):
            d = tree.dof[i]
            if d >= 0:
                tau[6 + d] = self.S[i] @ F[i]
            F[tree.parent[i]] += F[i]
        f0 = F[0]
        tau[:3] = f0[:3]
        tau[3:6] = f0[3:] - _cross(self.p[0], f0[:3])
        return tau

    def rnea(self, nudot, external=None, gravity=True) -> np.ndarray:
        F = self.body_forces(nudot, gravity)
        for i, f6 in self.external_body_forces(external).items():
            F[i] = F[i] - f6
        return self.generalized_from_body_forces(F)

    @cached_property
    def bias_forces(self) -> np.ndarray:
        return self.rnea(np.zeros(self.tree.nv))

    @cached_property
    def gravity_forces(self) -> np.ndarray:
        # at rest every body only has to hold up its own weight
        g = self.gravity
        F = [
            -m * np.concatenate([g, _cross(c, g)])
            for m, c in zip(self.tree.mass, self.com_world)
        ]
        return self.generalized_from_body_forces(F)

    @cached_property
    def composite_inertias(self) -> list:
        tree = self.tree
        Ic = [I.copy() for I in self.I6]
        for i in range(len(tree.names) - 1, 0, -1):
            Ic[tree.parent[i]] += Ic[i]
        return Ic

    @cached_property
    def base_map(self) -> np.ndarray:
        """Maps the mixed base twist to the world-origin spatial velocity."""
        T = np.eye(6)
        T[:3, 3:] = skew(self.p[0])
        return T

    @cached_property
    def mass_matrix(self) -> np.ndarray:
        tree = self.tree
        Ic = self.composite_inertias
        T = self.base_map
        M = np.zeros((tree.nv, tree.nv))
        M[:6, :6] = T.T @ Ic[0] @ T
        for i in range(1, len(tree.names)):
            d = tree.dof[i]
            if d < 0:
                continue
            F = Ic[i] @ self.S[i]
            col = 6 + d
            M[col, col] = self.S[i] @ F
            M[:6, col] = T.T @ F
            M[col, :6] = M[:6, col]
            for k in tree.dof_path[i][1:]:
                r = 6 + tree.dof[k]
                M[r, col] = M[col, r] = self.S[k] @ F
        return M

    # -- momentum ---------------------------------------------------------------

    @cached_property
    def com(self) -> np.ndarray:
        m = self.tree.mass
        return m @ self.com_world / self.tree.total_mass

    @cached_property
    def spatial_momentum(self) -> np.ndarray:
        return np.einsum("nij,nj->i", self.I6, np.array(self.V))

    @cached_property
    def centroidal_momentum(self) -> CentroidalMomentum:
        h = self.spatial_momentum
        H = np.concatenate([h[:3], h[3:] - _cross(self.com, h[:3])])
        return CentroidalMomentum(H, self.com, self.tree.total_mass)

    @cached_property
    def kinetic_energy(self) -> float:
        V = np.array(self.V)
        return 0.5 * float(np.einsum("ni,nij,nj->", V, self.I6, V))

    @cached_property
    def potential_energy(self) -> float:
        return -self.tree.total_mass * float(self.gravity @ self.com)


# -- functional API -----------------------------------------------------------------


def _snap(model, state, gravity=None) -> Snapshot:
    return Snapshot(model, state, gravity)


def forward_kinematics(model: RobotModel, state: FloatingBaseState, frame: str):
    """World pose ``(R, p)`` of a link or contact frame."""
    return _snap(model, state).frame_pose(frame)


def frame_jacobian(model, state, frame) -> np.ndarray:
    return _snap(model, state).jacobian(frame)


def bias_acceleration(model, state, frame) -> np.ndarray:
    """``Jdot @ nu`` for ``frame`` (mixed acceleration at zero ``nudot``)."""
    return _snap(model, state).frame_bias(frame)


def rnea(model, state, nudot, external=None, gravity=None) -> np.ndarray:
    """``M nudot + C nu + g - sum(J_k.T w_k)`` for the wrenches in ``external``."""
    return _snap(model, state, gravity).rnea(nudot, external)


def mass_matrix(model, state) -> np.ndarray:
    return _snap(model, state).mass_matrix


def bias_forces(model, state, gravity=None) -> np.ndarray:
    return _snap(model, state, gravity).bias_forces


def gravity_forces(model, state, gravity=None) -> np.ndarray:
    return _snap(model, state, gravity).gravity_forces


def centroidal_momentum(model, state) -> CentroidalMomentum:
    return _snap(model, state).centroidal_momentum


def center_of_mass(model, state) -> np.ndarray:
    return _snap(model, state).com


# -- contacts -------------------------------------------------------------------------


class ContactSet:
    """Active contact frames compiled to point contacts with 3D forces.

    Surface contacts contribute one point per vertex, all sharing the
    contact frame's z axis as normal.  ``anchors`` (world positions) are
    recorded on activation and used for drift stabilization.
    """

    def __init__(self, model: RobotModel, names: Optional[Iterable[str]] = None, active=None):
        specs = list(model.contacts) if names is None else [model.contact(n) for n in names]
        self.model = model
        self.specs = specs
        self._active = {s.name: True for s in specs} if active is None else dict(active)
        self.anchors: dict[str, np.ndarray] = {}
        self._compile()

    @property
    def active(self) -> dict:
        return dict(self._active)

    @property
    def active_specs(self):
        return [s for s in self.specs if self._active.get(s.name, False)]

    def _compile(self):
        index = self.model.tree.index
        pts = []
        for s in self.active_specs:
            local = s.points()
            labels = [f"{s.name}.v{k}" for k in range(len(local))] if s.kind == "surface" else [s.name]
            Ro, to = s.origin.rotation, s.origin.translation
            for lab, pt in zip(labels, local):
                pts.append((lab, s, index[s.link], Ro, to + Ro @ pt, pt))
        self._points = pts
        tree = self.model.tree
        self._mask = np.zeros((len(pts), tree.n))
        for k, (_, _, i, _, _, _) in enumerate(pts):
            for a in tree.dof_path[i]:
                self._mask[k, tree.dof[a]] = 1.0
        self._links = [p[2] for p in pts]
        self._layouts = {}
        self._cache = (None, None)
        self._derived = {}

    def points(self):
        """``(label, spec, local point)`` for each active point force."""
        return [(lab, s, pt) for lab, s, _, _, _, pt in self._points]

    @property
    def labels(self) -> list[str]:
        return [p[0] for p in self._points]

    @property
    def dim(self) -> int:
        return 3 * len(self._points)

    def _geometry(self, snap: Snapshot):
        if self._cache[0] is snap:
            return self._cache[1]
        out = []
        for label, spec, i, Ro, offset, _ in self._points:
            Rl = snap.R[i]
            out.append((label, spec, i, Rl @ Ro, snap.p[i] + Rl @ offset))
        self._cache = (snap, out)
        self._derived = {}
        return out

    def positions(self, snap: Snapshot) -> np.ndarray:
        geo = self._geometry(snap)
        if "P" not in self._derived:
            self._derived["P"] = np.array([p for *_, p in geo]).reshape(-1, 3)
        return self._derived["P"]

    def activate(self, name: str, snap: Snapshot):
        self._active[name] = True
        self._compile()
        for label, spec, _, _, p in self._geometry(snap):
            if spec.name == name:
                self.anchors[label] = p

    def deactivate(self, name: str):
        self._active[name] = False
        self._compile()
        for label in [l for l in self.anchors if l == name or l.startswith(name + ".v")]:
            del self.anchors[label]

    def anchor_all(self, snap: Snapshot):
        for label, _, _, _, p in self._geometry(snap):
            self.anchors.setdefault(label, p)

    def jacobian(self, snap: Snapshot) -> np.ndarray:
        geo = self._geometry(snap)
        if "J" not in self._derived:
            nv = snap.tree.nv
            k = len(geo)
            J = np.zeros((k, 3, nv))
            if k:
                P = self.positions(snap)
                axes, origins = snap.dof_axes
                J[:, :, :3] = np.eye(3)
                r = P - snap.p[0]
                J[:, 0, 4], J[:, 0, 5] = r[:, 2], -r[:, 1]
                J[:, 1, 3], J[:, 1, 5] = -r[:, 2], r[:, 0]
                J[:, 2, 3], J[:, 2, 4] = r[:, 1], -r[:, 0]
                cols = _vcross(axes[None, :, :], P[:, None, :] - origins[None, :, :])
                J[:, :, 6:] = (cols * self._mask[:, :, None]).transpose(0, 2, 1)
            self._derived["J"] = J.reshape(3 * k, nv)
        return self._derived["J"]

    def bias(self, snap: Snapshot) -> np.ndarray:
        geo = self._geometry(snap)
        if "b" not in self._derived:
            if not geo:
                self._derived["b"] = np.zeros(0)
            else:
                P = self.positions(snap)
                A = np.array([snap.velocity_product_accelerations[i] for i in self._links])
                V = np.array([snap.V[i] for i in self._links])
                vp = V[:, :3] + _vcross(V[:, 3:], P)
                out = A[:, :3] + _vcross(A[:, 3:], P) + _vcross(V[:, 3:], vp)
                self._derived["b"] = out.reshape(-1)
        return self._derived["b"]

    def drift(self, snap: Snapshot) -> np.ndarray:
        """Stacked position error of each point relative to its anchor."""
        out = []
        for label, _, _, _, p in self._geometry(snap):
            a = self.anchors.get(label)
            out.append(np.zeros(3) if a is None else p - a)
        return np.concatenate(out) if out else np.zeros(0)

    def contact_map(self, snap: Snapshot) -> np.ndarray:
        """6 x dim map from stacked point forces to the momentum rate about the CoM."""
        geo = self._geometry(snap)
        if not geo:
            raise ValueError("empty contact set")
        r = self.positions(snap) - snap.com
        k = len(geo)
        X = np.zeros((6, k, 3))
        X[0, :, 0] = X[1, :, 1] = X[2, :, 2] = 1.0
        X[3, :, 1], X[3, :, 2] = -r[:, 2], r[:, 1]
        X[4, :, 0], X[4, :, 2] = r[:, 2], -r[:, 0]
        X[5, :, 0], X[5, :, 1] = -r[:, 1], r[:, 0]
        return X.reshape(6, 3 * k)

    def normals(self, snap: Snapshot) -> np.ndarray:
        return np.array([Rc[:, 2] for _, _, _, Rc, _ in self._geometry(snap)]).reshape(-1, 3)

    def cone_constraints(self, snap: Snapshot, facets: Optional[int] = None):
        """Linearized friction cones as ``A f <= 0`` (inner polyhedral approximation).

        For each point: one row per facet bounding the tangential force by
        ``mu cos(pi/k) f_n`` along ``k`` evenly spaced directions, then a
        final row for ``f_n >= 0``.  ``facets`` overrides the per-contact count.
        """
        geo = self._geometry(snap)
        key = ("cones", facets)
        if key not in self._derived:
            local, point, cols = self._cone_layout(facets)
            Rc = np.array([g[3] for g in geo]).reshape(-1, 3, 3)
            A = np.zeros((local.shape[0], 3 * len(geo)))
            if local.size:
                rows = np.arange(local.shape[0])[:, None]
                A[rows, cols] = np.einsum("rij,rj->ri", Rc[point], local)
            self._derived[key] = (A, np.zeros(A.shape[0]))
        A, b = self._derived[key]
        return A.copy(), b.copy()

    def _cone_layout(self, facets):
        """Cone rows in contact-frame coordinates, with their point and columns."""
        key = ("cones", facets)
        if key not in self._layouts:
            local, point = [], []
            for k, (_, spec, _, _, _, _) in enumerate(self._points):
                m = facets or spec.cone_facets
                cs, sn = _facet_directions(m)
                local.append(np.column_stack([cs, sn, np.full(m, -spec.mu * np.cos(np.pi / m))]))
                local.append([[0.0, 0.0, -1.0]])
                point += [k] * (m + 1)
            local = np.vstack(local) if local else np.zeros((0, 3))
            point = np.array(point, dtype=int)
            cols = 3 * point[:, None] + np.arange(3)
            self._layouts[key] = (local, point, cols)
        return self._layouts[key]


@lru_cache(maxsize=None)
def _facet_directions(m: int):
    th = 2.0 * np.pi * np.arange(m) / m
    return np.cos(th), np.sin(th)


def contact_map(model, state, contacts: ContactSet) -> np.ndarray:
    return contacts.contact_map(_snap(model, state))


# -- state integration ------------------------------------------------------------------


def integrate_state(state: FloatingBaseState, velocity, dt: float) -> FloatingBaseState:
    """Advance the configuration along the generalized velocity ``velocity`` for ``dt``.

    ``nu`` of the result is copied from ``state``.
    """
    v = np.asarray(velocity, dtype=float)
    quat = quat_mul(quat_exp(v[3:6] * dt), state.base_orientation)
    quat = quat / np.linalg.norm(quat)
    return FloatingBaseState(
        quat, state.base_position + dt * v[:3], state.q + dt * v[6:], state.nu.copy()
    )
