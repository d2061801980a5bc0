"""Robot description: immutable kinematic tree with inertias, contact frames
and optional actuator parameters, plus the XML reader/writer.

The file format is a small subset of URDF extended with ``<motor>``,
``<sea>`` and ``<contact>`` elements; see ``docs/model_format.md``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional
from xml.parsers import expat

import numpy as np

from .motor import MotorModelParams
from .spatial import rpy_to_rot
from .state import FloatingBaseState

AXIS_TOL = 1e-9
PLANAR_TOL = 1e-9


class ModelParseError(ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ModelValidationError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        errors = [d for d in self.diagnostics if d.severity == "error"]
        super().__init__("; ".join(f"{d.entity}: {d.message}" for d in errors))


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    entity: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.entity}: {self.message}"


@dataclass(frozen=True)
class Pose:
    xyz: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)

    @property
    def rotation(self) -> np.ndarray:
        return rpy_to_rot(self.rpy)

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.xyz, dtype=float)


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float = 0.0
    com: tuple = (0.0, 0.0, 0.0)
    # row-major 3x3 about the CoM, link axes
    inertia: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @property
    def inertia_matrix(self) -> np.ndarray:
        return np.array(self.inertia, dtype=float)


@dataclass(frozen=True)
class Limits:
    lower: Optional[float] = None
    upper: Optional[float] = None
    velocity: Optional[float] = None
    effort: Optional[float] = None


@dataclass(frozen=True)
class SeaSpec:
    stiffness: float
    damping: float
    motor_inertia: float


@dataclass(frozen=True)
class MotorSpec:
    params: MotorModelParams
    gear: float = 1.0


@dataclass(frozen=True)
class JointSpec:
    name: str
    type: str  # "revolute" | "fixed"
    parent: str
    child: str
    origin: Pose = Pose()
    axis: tuple = (0.0, 0.0, 1.0)
    limits: Limits = Limits()
    motor: Optional[MotorSpec] = None
    sea: Optional[SeaSpec] = None


@dataclass(frozen=True)
class ContactFrameSpec:
    name: str
    link: str
    origin: Pose = Pose()
    kind: str = "point"  # "point" | "surface"
    mu: float = 1.0
    cone_facets: int = 8
    vertices: tuple = ()

    def points(self) -> np.ndarray:
        """Force application points in the contact frame."""
        if self.kind == "surface":
            return np.array(self.vertices, dtype=float).reshape(-1, 3)
        return np.zeros((1, 3))


@dataclass(frozen=True)
class RobotModel:
    name: str
    links: tuple
    joints: tuple
    base_link: str
    contacts: tuple = ()

    @property
    def n(self) -> int:
        return sum(1 for j in self.joints if j.type == "revolute")

    @property
    def nv(self) -> int:
        return 6 + self.n

    def link(self, name: str) -> LinkSpec:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(f"unknown link '{name}'")

    def joint(self, name: str) -> JointSpec:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(f"unknown joint '{name}'")

    def contact(self, name: str) -> ContactFrameSpec:
        for c in self.contacts:
            if c.name == name:
                return c
        raise KeyError(f"unknown contact frame '{name}'")

    @cached_property
    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    def topological_order(self) -> list[str]:
        """Link names, parents before children, siblings in declaration order."""
        children = {}
        for j in self.joints:
            children.setdefault(j.parent, []).append(j.child)
        order, stack, seen = [], [self.base_link], set()
        while stack:
            name = stack.pop()
            if name in seen:
                raise ValueError("kinematic graph has cycle")
            seen.add(name)
            order.append(name)
            stack.extend(reversed(children.get(name, [])))
        return order

    @cached_property
    def revolute_joints(self) -> tuple:
        """Revolute joints in dof order (topological order of their child links)."""
        by_child = {j.child: j for j in self.joints}
        return tuple(
            by_child[l] for l in self.topological_order()[1:] if by_child[l].type == "revolute"
        )

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.revolute_joints):
            if j.name == name:
                return i
        raise KeyError(f"'{name}' is not a revolute joint")

    @cached_property
    def tree(self):
        from .dynamics import KinematicTree

        return KinematicTree(self)

    def with_contacts(self, contacts) -> "RobotModel":
        return RobotModel(self.name, self.links, self.joints, self.base_link, tuple(contacts))


# -- validation ---------------------------------------------------------------


def _principal_moments(inertia: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(0.5 * (inertia + inertia.T))


def validate_model(model: RobotModel) -> list[Diagnostic]:
    """Check every model invariant; an empty list means the model is valid."""
    diags: list[Diagnostic] = []

    def err(entity, msg):
        diags.append(Diagnostic("error", entity, msg))

    names = [l.name for l in model.links]
    link_set = set(names)
    for name in {n for n in names if names.count(n) > 1}:
        err(name, "duplicate link name")
    jnames = [j.name for j in model.joints]
    for name in {n for n in jnames if jnames.count(n) > 1}:
        err(name, "duplicate joint name")
    cnames = [c.name for c in model.contacts]
    for name in {n for n in cnames if cnames.count(n) > 1 or n in link_set}:
        err(name, "duplicate frame name")

    if model.base_link not in link_set:
        err(model.base_link, "base link does not exist")

    parent_of: dict[str, str] = {}
    has_children = set()
    for j in model.joints:
        if j.type not in ("revolute", "fixed"):
            err(j.name, f"unsupported joint type '{j.type}'")
        for role, ref in (("parent", j.parent), ("child", j.child)):
            if ref not in link_set:
                err(j.name, f"{role} link '{ref}' does not exist")
        if j.child == model.base_link:
            err(j.name, "base link cannot be a child")
        if j.child in parent_of:
            err(j.child, "link has more than one parent")
        parent_of.setdefault(j.child, j.parent)
        has_children.add(j.parent)
        a = np.array(j.axis, dtype=float)
        if j.type == "revolute" and abs(np.linalg.norm(a) - 1.0) > AXIS_TOL:
            err(j.name, "axis not unit")
        lim = j.limits
        if lim.lower is not None and lim.upper is not None and lim.lower > lim.upper:
            err(j.name, "limits.lower > limits.upper")
        if j.sea is not None:
            if not j.sea.stiffness > 0:
                err(j.name, "sea stiffness must be positive")
            if j.sea.damping < 0:
                err(j.name, "sea damping must be non-negative")
            if not j.sea.motor_inertia > 0:
                err(j.name, "sea motor_inertia must be positive")
            if j.type != "revolute":
                err(j.name, "sea attached to a non-revolute joint")
        if j.motor is not None:
            for msg in j.motor.params.violations():
                err(j.name, f"motor {msg}")
            if not j.motor.gear > 0:
                err(j.name, "motor gear must be positive")

    # cycles: follow parent pointers
    cyclic = set()
    for start in parent_of:
        seen, cur = [], start
        while cur in parent_of and cur not in seen:
            seen.append(cur)
            cur = parent_of[cur]
        if cur in seen:
            cyclic.add(frozenset(seen[seen.index(cur):]))
    for _ in cyclic:
        err(model.name, "kinematic graph has cycle")
    if not cyclic and model.base_link in link_set:
        for name in names:
            cur, hops = name, 0
            while cur in parent_of and hops <= len(names):
                cur, hops = parent_of[cur], hops + 1
            if cur != model.base_link:
                err(name, "link not connected to the base link")

    for l in model.links:
        I = np.array(l.inertia, dtype=float)
        if l.mass < 0:
            err(l.name, "mass must be non-negative")
        elif l.mass == 0:
            if l.name in has_children or l.name == model.base_link:
                err(l.name, "massless link must be a leaf frame")
            if np.any(I != 0):
                err(l.name, "massless link carries inertia")
            continue
        if np.max(np.abs(I - I.T)) > 1e-12 * max(1.0, np.max(np.abs(I))):
            err(l.name, "inertia not symmetric")
            continue
        moments = _principal_moments(I)
        tol = 1e-12 * max(1.0, float(np.max(np.abs(moments))))
        if moments[0] < -tol:
            err(l.name, "inertia not positive semidefinite")
            continue
        a, b, c = moments
        if a + b < c - tol:
            err(l.name, "triangle inequality violated")

    for c in model.contacts:
        if c.link not in link_set:
            err(c.name, f"link '{c.link}' does not exist")
        if not c.mu > 0:
            err(c.name, "mu must be positive")
        if c.cone_facets < 4:
            err(c.name, "cone_facets must be at least 4")
        if c.kind == "surface":
            v = np.array(c.vertices, dtype=float).reshape(-1, 3)
            if v.shape[0] < 3:
                err(c.name, "surface contact needs at least 3 vertices")
                continue
            if np.max(np.abs(v[:, 2])) > PLANAR_TOL:
                err(c.name, "surface vertices not coplanar with the contact plane")
            if np.linalg.matrix_rank(v[1:, :2] - v[0, :2], tol=1e-9) < 2:
                err(c.name, "surface vertices are collinear")
        elif c.kind != "point":
            err(c.name, f"unknown contact kind '{c.kind}'")
    return diags


# -- XML reader ----------------------------------------------------------------


@dataclass
class _Node:
    tag: str
    attrib: dict
    line: int
    children: list = field(default_factory=list)

    def find(self, tag):
        for c in self.children:
            if c.tag == tag:
                return c
        return None

    def findall(self, tag):
        return [c for c in self.children if c.tag == tag]


def _parse_xml(text: str) -> _Node:
    parser = expat.ParserCreate()
    stack: list[_Node] = []
    root: list[_Node] = []

    def start(tag, attrib):
        node = _Node(tag, dict(attrib), parser.CurrentLineNumber)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise ModelParseError(expat.ErrorString(exc.code), line=exc.lineno) from None
    return root[0]


def _floats(node: _Node, key: str, count: int, default=None):
    raw = node.attrib.get(key)
    if raw is None:
        if default is not None:
            return default
        raise ModelParseError(f"missing attribute on <{node.tag}>", node.line, key)
    try:
        vals = tuple(float(x) for x in raw.split())
    except ValueError:
        raise ModelParseError(f"not a number: '{raw}'", node.line, key) from None
    if len(vals) != count or not all(math.isfinite(v) for v in vals):
        raise ModelParseError(f"expected {count} finite numbers, got '{raw}'", node.line, key)
    return vals


def _float(node: _Node, key: str, default=None):
    if key not in node.attrib and default is not None:
        return default
    if key not in node.attrib and default is None:
        raise ModelParseError(f"missing attribute on <{node.tag}>", node.line, key)
    return _floats(node, key, 1)[0]


def _opt_float(node: Optional[_Node], key: str):
    if node is None or key not in node.attrib:
        return None
    return _floats(node, key, 1)[0]


def _name(node: _Node, key: str = "name") -> str:
    val = node.attrib.get(key)
    if not val:
        raise ModelParseError(f"missing attribute on <{node.tag}>", node.line, key)
    return val


def _pose(node: Optional[_Node]) -> Pose:
    if node is None:
        return Pose()
    return Pose(
        _floats(node, "xyz", 3, (0.0, 0.0, 0.0)), _floats(node, "rpy", 3, (0.0, 0.0, 0.0))
    )


def _link(node: _Node) -> LinkSpec:
    name = _name(node)
    inertial = node.find("inertial")
    if inertial is None:
        return LinkSpec(name)
    mnode = inertial.find("mass")
    if mnode is None:
        raise ModelParseError("<inertial> without <mass>", inertial.line, "mass")
    mass = _float(mnode, "value")
    origin = _pose(inertial.find("origin"))
    inode = inertial.find("inertia")
    if inode is None:
        raise ModelParseError("<inertial> without <inertia>", inertial.line, "inertia")
    ixx, ixy, ixz, iyy, iyz, izz = (
        _float(inode, k) for k in ("ixx", "ixy", "ixz", "iyy", "iyz", "izz")
    )
    I = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    if any(origin.rpy):
        R = origin.rotation
        I = R @ I @ R.T
    inertia = tuple(tuple(float(v) for v in row) for row in I)
    return LinkSpec(name, mass, origin.xyz, inertia)


def _joint(node: _Node) -> JointSpec:
    name = _name(node)
    jtype = node.attrib.get("type")
    if jtype is None:
        raise ModelParseError("missing attribute on <joint>", node.line, "type")
    parent = node.find("parent")
    child = node.find("child")
    if parent is None or child is None:
        raise ModelParseError("joint needs <parent> and <child>", node.line, "parent/child")
    axis_node = node.find("axis")
    axis = _floats(axis_node, "xyz", 3) if axis_node is not None else (1.0, 0.0, 0.0)
    lnode = node.find("limit")
    limits = Limits(
        _opt_float(lnode, "lower"),
        _opt_float(lnode, "upper"),
        _opt_float(lnode, "velocity"),
        _opt_float(lnode, "effort"),
    )
    motor = None
    mnode = node.find("motor")
    if mnode is not None:
        params = MotorModelParams(
            *(_float(mnode, k, 0.0 if k != "kt" else None) for k in ("kt", "kvp", "kvn", "kcp", "kcn"))
        )
        motor = MotorSpec(params, _float(mnode, "gear", 1.0))
    sea = None
    snode = node.find("sea")
    if snode is not None:
        sea = SeaSpec(
            _float(snode, "stiffness"), _float(snode, "damping", 0.0), _float(snode, "motor_inertia")
        )
    return JointSpec(
        name,
        jtype,
        _name(parent, "link"),
        _name(child, "link"),
        _pose(node.find("origin")),
        axis,
        limits,
        motor,
        sea,
    )


def _contact(node: _Node) -> ContactFrameSpec:
    name = _name(node)
    link = _name(node, "link")
    vertices = tuple(_floats(v, "xyz", 3) for v in node.findall("vertex"))
    kind = node.attrib.get("kind", "surface" if vertices else "point")
    facets_raw = node.attrib.get("facets", "8")
    try:
        facets = int(facets_raw)
    except ValueError:
        raise ModelParseError(f"not an integer: '{facets_raw}'", node.line, "facets") from None
    return ContactFrameSpec(
        name,
        link,
        _pose(node.find("origin")),
        kind,
        _float(node, "mu"),
        facets,
        vertices,
    )


def parse_model(source: str) -> RobotModel:
    """Parse model XML without checking invariants (see :func:`validate_model`)."""
    root = _parse_xml(source)
    if root.tag != "robot":
        raise ModelParseError(f"root element is <{root.tag}>, expected <robot>", root.line)
    links, joints, contacts = [], [], []
    for child in root.children:
        if child.tag == "link":
            links.append(_link(child))
        elif child.tag == "joint":
            joints.append(_joint(child))
        elif child.tag == "contact":
            contacts.append(_contact(child))
        else:
            raise ModelParseError(f"unknown element <{child.tag}>", child.line, child.tag)
    if not links:
        raise ModelParseError("model has no links", root.line)
    base = root.attrib.get("base")
    if base is None:
        children = {j.child for j in joints}
        roots = [l.name for l in links if l.name not in children]
        base = roots[0] if roots else links[0].name
    return RobotModel(root.attrib.get("name", "robot"), tuple(links), tuple(joints), base, tuple(contacts))


def load_model(source: str) -> RobotModel:
    """Parse and validate; raises :class:`ModelValidationError` on any error."""
    model = parse_model(source)
    diags = validate_model(model)
    if any(d.severity == "error" for d in diags):
        raise ModelValidationError(diags)
    return model


def load_model_file(path) -> RobotModel:
    with open(path, encoding="utf-8") as fh:
        return load_model(fh.read())


# -- XML writer ------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v))


def _fmt(values) -> str:
    return " ".join(_num(v) for v in values)


def serialize_model(model: RobotModel) -> str:
    out = [f'<robot name="{model.name}" base="{model.base_link}">']
    for l in model.links:
        if l.mass == 0 and not any(any(r) for r in l.inertia) and not any(l.com):
            out.append(f'  <link name="{l.name}"/>')
            continue
        I = l.inertia
        out += [
            f'  <link name="{l.name}">',
            "    <inertial>",
            f'      <origin xyz="{_fmt(l.com)}" rpy="0.0 0.0 0.0"/>',
            f'      <mass value="{_num(l.mass)}"/>',
            f'      <inertia ixx="{_num(I[0][0])}" ixy="{_num(I[0][1])}" ixz="{_num(I[0][2])}" '
            f'iyy="{_num(I[1][1])}" iyz="{_num(I[1][2])}" izz="{_num(I[2][2])}"/>',
            "    </inertial>",
            "  </link>",
        ]
    for j in model.joints:
        out += [
            f'  <joint name="{j.name}" type="{j.type}">',
            f'    <parent link="{j.parent}"/>',
            f'    <child link="{j.child}"/>',
            f'    <origin xyz="{_fmt(j.origin.xyz)}" rpy="{_fmt(j.origin.rpy)}"/>',
            f'    <axis xyz="{_fmt(j.axis)}"/>',
        ]
        lim = {
            k: getattr(j.limits, k)
            for k in ("lower", "upper", "velocity", "effort")
            if getattr(j.limits, k) is not None
        }
        if lim:
            attrs = " ".join(f'{k}="{_num(v)}"' for k, v in lim.items())
            out.append(f"    <limit {attrs}/>")
        if j.motor is not None:
            p = j.motor.params
            out.append(
                f'    <motor kt="{_num(p.k_t)}" kvp="{_num(p.k_vp)}" kvn="{_num(p.k_vn)}" '
                f'kcp="{_num(p.k_cp)}" kcn="{_num(p.k_cn)}" gear="{_num(j.motor.gear)}"/>'
            )
        if j.sea is not None:
            s = j.sea
            out.append(
                f'    <sea stiffness="{_num(s.stiffness)}" damping="{_num(s.damping)}" '
                f'motor_inertia="{_num(s.motor_inertia)}"/>'
            )
        out.append("  </joint>")
    for c in model.contacts:
        out.append(
            f'  <contact name="{c.name}" link="{c.link}" kind="{c.kind}" '
            f'mu="{_num(c.mu)}" facets="{c.cone_facets}">'
        )
        out.append(f'    <origin xyz="{_fmt(c.origin.xyz)}" rpy="{_fmt(c.origin.rpy)}"/>')
        for v in c.vertices:
            out.append(f'    <vertex xyz="{_fmt(v)}"/>')
        out.append("  </contact>")
    out.append("</robot>")
    return "\n".join(out) + "\n"


# -- states ------------------------------------------------------------------------


def neutral_state(model: RobotModel) -> FloatingBaseState:
    """Identity base pose, joints at the middle of their limits, zero velocity."""
    q = []
    for j in model.revolute_joints:
        lo, hi = j.limits.lower, j.limits.upper
        q.append(0.5 * (lo + hi) if lo is not None and hi is not None else 0.0)
    return FloatingBaseState(
        np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.array(q), np.zeros(6 + len(q))
    )
