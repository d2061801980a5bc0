from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spatial import quat_to_rot


@dataclass
class FloatingBaseState:
    """Configuration and generalized velocity of a free-floating tree.

    ``nu`` stacks the base linear velocity (world axes, at the base origin),
    the base angular velocity (world axes) and the joint rates.
    """

    base_orientation: np.ndarray
    base_position: np.ndarray
    q: np.ndarray
    nu: np.ndarray = field(default=None)

    def __post_init__(self):
        self.base_orientation = np.asarray(self.base_orientation, dtype=float).reshape(4)
        self.base_position = np.asarray(self.base_position, dtype=float).reshape(3)
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if self.nu is None:
            self.nu = np.zeros(6 + self.q.size)
        self.nu = np.asarray(self.nu, dtype=float).reshape(-1)
        if self.nu.size != 6 + self.q.size:
            raise ValueError(f"nu has {self.nu.size} entries, expected {6 + self.q.size}")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def base_rotation(self) -> np.ndarray:
        return quat_to_rot(self.base_orientation)

    @property
    def qdot(self) -> np.ndarray:
        return self.nu[6:]

    def copy(self) -> "FloatingBaseState":
        return FloatingBaseState(
            self.base_orientation.copy(), self.base_position.copy(), self.q.copy(), self.nu.copy()
        )
