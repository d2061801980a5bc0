"""Inner joint-torque loop: transmission/friction model, PI voltage law with
friction feed-forward, and least-squares identification of the model.

Velocities are link-side motor velocities; all quantities are SI.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

PARAM_NAMES = ("k_t", "k_vp", "k_vn", "k_cp", "k_cn")


class IdentificationError(ValueError):
    """The regressor is rank deficient; ``unexcited`` names the parameters."""

    def __init__(self, unexcited):
        self.unexcited = tuple(unexcited)
        super().__init__(f"{', '.join(self.unexcited)} unexcited")


class DatasetError(ValueError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True)
class MotorModelParams:
    k_t: float
    k_vp: float = 0.0
    k_vn: float = 0.0
    k_cp: float = 0.0
    k_cn: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.k_t, self.k_vp, self.k_vn, self.k_cp, self.k_cn])

    def violations(self) -> list[str]:
        out = []
        if not self.k_t > 0:
            out.append("k_t must be positive")
        for name in PARAM_NAMES[1:]:
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        return out


@dataclass(frozen=True)
class TorqueLoopGains:
    k_p: float = 0.5
    k_i: float = 20.0
    k_s: float = 50.0
    integral_limit: float = 1.0
    v_max: float = 24.0

    def __post_init__(self):
        if self.k_p < 0 or self.k_i < 0:
            raise ValueError("k_p and k_i must be non-negative")
        if not self.k_s > 0:
            raise ValueError("k_s must be positive")
        if not self.integral_limit > 0:
            raise ValueError("integral_limit must be positive")


@dataclass(frozen=True)
class TorqueLoopState:
    integral: float = 0.0
    last_voltage: float = 0.0
    saturated: bool = False


def unit_step(x):
    """1 for x > 0, 0 otherwise."""
    return np.where(np.asarray(x) > 0, 1.0, 0.0)


def _friction(params: MotorModelParams, thetadot, coulomb_shape):
    pos = unit_step(thetadot)
    neg = unit_step(-np.asarray(thetadot))
    viscous = (params.k_vp * pos + params.k_vn * neg) * thetadot
    coulomb = (params.k_cp * pos + params.k_cn * neg) * coulomb_shape
    return viscous, coulomb


def model_voltage(params: MotorModelParams, tau, thetadot):
    """Voltage that sustains joint torque ``tau`` at motor velocity ``thetadot``."""
    viscous, coulomb = _friction(params, thetadot, np.sign(thetadot))
    out = params.k_t * np.asarray(tau, dtype=float) + viscous + coulomb
    return float(out) if np.ndim(out) == 0 else out


def motor_torque(params: MotorModelParams, voltage, thetadot):
    """Joint torque produced by ``voltage``; the inverse of :func:`model_voltage`."""
    viscous, coulomb = _friction(params, thetadot, np.sign(thetadot))
    out = (np.asarray(voltage, dtype=float) - viscous - coulomb) / params.k_t
    return float(out) if np.ndim(out) == 0 else out


def control_voltage(
    params: MotorModelParams,
    gains: TorqueLoopGains,
    loop_state: TorqueLoopState,
    tau_desired: float,
    tau_measured: float,
    thetadot: float,
    dt: float,
) -> tuple[float, TorqueLoopState]:
    """One tick of the torque loop.

    PI on the torque error with the transmission model as feed-forward and a
    tanh-smoothed Coulomb term.  The integral is clamped to
    ``gains.integral_limit`` and frozen whenever the output saturates.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    err = tau_measured - tau_desired
    lim = gains.integral_limit
    integral = min(max(loop_state.integral + err * dt, -lim), lim)

    viscous, coulomb = _friction(params, thetadot, math.tanh(gains.k_s * thetadot))
    friction = float(viscous + coulomb)

    def law(integ):
        return params.k_t * (tau_desired - gains.k_p * err - gains.k_i * integ) + friction

    v = law(integral)
    saturated = abs(v) > gains.v_max
    if saturated:
        integral = loop_state.integral
        v = law(integral)
        v = min(max(v, -gains.v_max), gains.v_max)
    return v, TorqueLoopState(integral=integral, last_voltage=v, saturated=saturated)


# -- identification ---------------------------------------------------------


def regressor(tau, thetadot) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    w = np.asarray(thetadot, dtype=float)
    pos = unit_step(w)
    neg = unit_step(-w)
    sgn = np.sign(w)
    return np.column_stack([tau, w * pos, w * neg, sgn * pos, sgn * neg])


@dataclass
class FitReport:
    params: MotorModelParams
    std_errors: dict = field(default_factory=dict)
    r2: float = float("nan")
    n_samples: int = 0

    def to_text(self) -> str:
        lines = ["parameter,value,std_err"]
        for name in PARAM_NAMES:
            lines.append(f"{name},{getattr(self.params, name)!r},{self.std_errors[name]!r}")
        lines.append(f"r2,{self.r2!r},")
        lines.append(f"n_samples,{self.n_samples},")
        return "\n".join(lines) + "\n"


def _unexcited(Phi: np.ndarray, rtol: float = 1e-10) -> list[str]:
    scale = np.linalg.norm(Phi, axis=0)
    zero = scale <= 0
    cols = np.where(zero, 1.0, scale)
    _, s, vt = np.linalg.svd(Phi / cols, full_matrices=True)
    s_full = np.zeros(Phi.shape[1])
    s_full[: s.size] = s
    null = vt[s_full <= rtol * max(s_full.max(), 1.0)]
    involved = zero.copy()
    if null.size:
        involved |= np.abs(null).max(axis=0) > 1e-8
    return [PARAM_NAMES[i] for i in np.flatnonzero(involved)]


def identify(dataset) -> tuple[MotorModelParams, FitReport]:
    """Fit the transmission model to ``(voltage, torque, velocity)`` samples."""
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError("dataset must be a sequence of (V, tau, thetadot) triples")
    V, tau, w = data.T
    Phi = regressor(tau, w)
    bad = _unexcited(Phi)
    if bad:
        raise IdentificationError(bad)
    theta, *_ = np.linalg.lstsq(Phi, V, rcond=None)
    resid = V - Phi @ theta
    rss = float(resid @ resid)
    dof = max(V.size - Phi.shape[1], 1)
    cov = (rss / dof) * np.linalg.inv(Phi.T @ Phi)
    tss = float(((V - V.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    params = MotorModelParams(*map(float, theta))
    report = FitReport(
        params=params,
        std_errors={n: float(math.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(PARAM_NAMES)},
        r2=r2,
        n_samples=int(V.size),
    )
    return params, report


class MotorFrictionRegressor(BaseEstimator, RegressorMixin):
    """Estimator wrapper around :func:`identify`.

    ``X`` has columns ``[tau, thetadot]`` and ``y`` is the applied voltage.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError("X must have columns [tau, thetadot]")
        self.params_, self.report_ = identify(np.column_stack([y, X]))
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return np.asarray(model_voltage(self.params_, X[:, 0], X[:, 1]), dtype=float)


# -- CSV interface ------------------------------------------------------------

DATASET_COLUMNS = ("time", "voltage", "torque", "velocity")


def read_dataset_csv(text: str) -> np.ndarray:
    """Parse an identification CSV and return ``(V, tau, thetadot)`` rows."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty dataset", row=1) from None
    header = [h.strip() for h in header]
    missing = [c for c in DATASET_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"missing columns {', '.join(missing)}", row=1)
    idx = [header.index(c) for c in ("voltage", "torque", "velocity")]
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise DatasetError(f"expected {len(header)} fields, got {len(rec)}", row=lineno)
        try:
            vals = [float(rec[i]) for i in idx]
        except ValueError as exc:
            raise DatasetError(str(exc), row=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError("non-finite value", row=lineno)
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_dataset_csv(times, voltage, torque, velocity) -> str:
    out = io.StringIO()
    out.write(",".join(DATASET_COLUMNS) + "\n")
    for row in zip(times, voltage, torque, velocity):
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()

