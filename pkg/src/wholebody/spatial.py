"""Small rotation and spatial-algebra helpers.

Spatial vectors use linear-first ordering everywhere: motion vectors are
``[v; w]`` and force vectors are ``[f; n]``.  Quaternions are Hamilton,
scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import math

import numpy as np


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c = math.cos(angle)
    s = math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def rpy_to_rot(rpy) -> np.ndarray:
    """URDF convention: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    r, p, y = rpy
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_exp(rotvec) -> np.ndarray:
    """Unit quaternion of the rotation vector ``rotvec`` (axis * angle)."""
    theta = math.sqrt(rotvec[0] ** 2 + rotvec[1] ** 2 + rotvec[2] ** 2)
    if theta < 1e-12:
        # second-order series keeps the map smooth at zero
        half = 0.5 * np.asarray(rotvec, dtype=float)
        q = np.array([1.0 - 0.125 * theta * theta, *half])
        return q / np.linalg.norm(q)
    s = math.sin(0.5 * theta) / theta
    return np.array([math.cos(0.5 * theta), s * rotvec[0], s * rotvec[1], s * rotvec[2]])


def rot_log(R) -> np.ndarray:
    """Rotation vector of ``R`` (inverse of the exponential map)."""
    q = rot_to_quat(R)
    vn = np.linalg.norm(q[1:])
    if vn < 1e-15:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(vn, q[0])
    return q[1:] * (angle / vn)


def spatial_inertia(mass: float, com, inertia_com) -> np.ndarray:
    """6x6 spatial inertia about the origin of the coordinates ``com`` is given in."""
    c = skew(com)
    out = np.empty((6, 6))
    out[:3, :3] = mass * np.eye(3)
    out[:3, 3:] = -mass * c
    out[3:, :3] = mass * c
    out[3:, 3:] = inertia_com - mass * (c @ c)
    return out


def motion_cross(v) -> np.ndarray:
    """Matrix of ``v x`` acting on motion vectors."""
    out = np.zeros((6, 6))
    w = skew(v[3:])
    out[:3, :3] = w
    out[:3, 3:] = skew(v[:3])
    out[3:, 3:] = w
    return out


def force_cross(v) -> np.ndarray:
    """Matrix of ``v x*`` acting on force vectors."""
    out = np.zeros((6, 6))
    w = skew(v[3:])
    out[:3, :3] = w
    out[3:, :3] = skew(v[:3])
    out[3:, 3:] = w
    return out
