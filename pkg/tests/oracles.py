"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np

from wholebody.qp import QpProblem


def brute_force_qp(problem: QpProblem, tolerance: float = 1e-9):
    """Enumerate every inequality active set; returns ``(x, objective)`` or ``None``.

    Reference oracle for small problems only (exponential in the number of
    inequalities).
    """
    n = problem.n
    m_in = problem.A_in.shape[0]
    best = None
    for k in range(m_in + 1):
        for subset in itertools.combinations(range(m_in), k):
            A = np.vstack([problem.A_eq, problem.A_in[list(subset)]])
            b = np.concatenate([problem.b_eq, problem.b_in[list(subset)]])
            m = A.shape[0]
            K = np.block([[problem.hessian, A.T], [A, np.zeros((m, m))]])
            rhs = np.concatenate([-problem.gradient, b])
            # least squares so that dependent equality rows are tolerated
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            x = sol[:n]
            if not np.allclose(K @ sol, rhs, atol=1e-9):
                continue
            lam = sol[n + problem.A_eq.shape[0] :]
            if np.any(problem.A_in @ x > problem.b_in + tolerance):
                continue
            if np.any(lam < -tolerance):
                continue
            obj = problem.objective(x)
            if best is None or obj < best[1] - 1e-12:
                best = (x, obj)
    return best


def random_inertia(rng, scale=0.1):
    """Random physically valid rotational inertia (principal moments from second moments)."""
    s = rng.uniform(0.1, 1.0, 3) * scale
    moments = np.array([s[1] + s[2], s[0] + s[2], s[0] + s[1]])
    A = rng.normal(size=(3, 3))
    Q, _ = np.linalg.qr(A)
    I = Q @ np.diag(moments) @ Q.T
    return 0.5 * (I + I.T)


def random_tree(rng, n_links=None):
    """Random revolute tree with up to 10 links and valid inertias."""
    from wholebody.model import JointSpec, Limits, LinkSpec, Pose, RobotModel

    n_links = n_links or int(rng.integers(2, 11))
    links, joints = [], []
    for i in range(n_links):
        links.append(
            LinkSpec(
                f"l{i}",
                float(rng.uniform(0.2, 3.0)),
                tuple(rng.uniform(-0.2, 0.2, 3)),
                tuple(map(tuple, random_inertia(rng))),
            )
        )
        if i:
            axis = rng.normal(size=3)
            joints.append(
                JointSpec(
                    f"j{i}",
                    "revolute",
                    f"l{int(rng.integers(0, i))}",
                    f"l{i}",
                    Pose(tuple(rng.uniform(-0.5, 0.5, 3)), tuple(rng.uniform(-np.pi, np.pi, 3))),
                    tuple(axis / np.linalg.norm(axis)),
                    Limits(-np.pi, np.pi),
                )
            )
    return RobotModel("random", tuple(links), tuple(joints), "l0")


def random_state(rng, model, speed=1.0):
    from wholebody.spatial import rot_to_quat, rpy_to_rot
    from wholebody.state import FloatingBaseState

    quat = rot_to_quat(rpy_to_rot(rng.uniform(-np.pi, np.pi, 3)))
    return FloatingBaseState(
        quat,
        rng.uniform(-1, 1, 3),
        rng.uniform(-np.pi, np.pi, model.n),
        rng.normal(0, speed, 6 + model.n),
    )


def fd_frame_jacobian(model, state, frame, h=1e-6):
    """Central differences of the frame pose along each generalized velocity direction."""
    from wholebody.dynamics import forward_kinematics, integrate_state
    from wholebody.spatial import rot_log

    J = np.zeros((6, model.nv))
    for k in range(model.nv):
        e = np.zeros(model.nv)
        e[k] = 1.0
        Rp, pp = forward_kinematics(model, integrate_state(state, e, h), frame)
        Rm, pm = forward_kinematics(model, integrate_state(state, e, -h), frame)
        J[:3, k] = (pp - pm) / (2 * h)
        J[3:, k] = rot_log(Rp @ Rm.T) / (2 * h)
    return J


def fd_bias_acceleration(model, state, frame, h=1e-6):
    """``d/dt(J) nu`` by central differences of the Jacobian along ``nu``."""
    from wholebody.dynamics import frame_jacobian, integrate_state

    Jp = frame_jacobian(model, integrate_state(state, state.nu, h), frame)
    Jm = frame_jacobian(model, integrate_state(state, state.nu, -h), frame)
    return (Jp - Jm) @ state.nu / (2 * h)


def motor_dataset(rng, params, n=10_000, noise=0.0):
    """Exciting ``(V, tau, thetadot)`` samples from the transmission model.

    Velocities of both signs plus a few exact zeros; ``noise`` is the relative
    (multiplicative) voltage noise level.
    """
    from wholebody.motor import model_voltage

    tau = rng.uniform(-2.0, 2.0, n)
    w = rng.uniform(-5.0, 5.0, n)
    w[:: max(n // 50, 1)] = 0.0
    V = np.asarray(model_voltage(params, tau, w))
    if noise:
        V = V * (1.0 + noise * rng.normal(size=n))
    return np.column_stack([V, tau, w])
