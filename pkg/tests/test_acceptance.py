"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACn PASS|FAIL`` line with the measured figure and
the tolerance it is held to; the lines are repeated in the terminal summary.
"""

import json
import time
import warnings

import numpy as np
import pytest

import wholebody as wb
from wholebody.cli import _scenario, build_parser, main
from wholebody.dynamics import GRAVITY, Snapshot
from wholebody.estimation import ContactHypothesis, FtSensorSpec, estimate, synthesize_ft_reading
from wholebody.motor import MotorModelParams, TorqueLoopGains, identify
from wholebody.sim import (
    BalanceController,
    MotorTorqueLoop,
    Push,
    ReferenceChange,
    Script,
    SeaState,
    SimConfig,
    SingularContactWarning,
    deflection_torques,
    run_scenario,
    standing_state,
)
from wholebody.wbc import ControllerConfig, PosturalTask, control_step, solve_contact_forces, solve_torques

from oracles import (
    brute_force_qp,
    fd_bias_acceleration,
    fd_frame_jacobian,
    motor_dataset,
    random_state,
    random_tree,
)

G = -GRAVITY[2]
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str):
    line = f"AC{n} {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1: CRBA against column-wise RNEA -------------------------------------------------------


def test_ac1_crba_matches_rnea_columns():
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        m = random_tree(rng)
        s = random_state(rng, m)
        M = wb.mass_matrix(m, s)
        zero = wb.rnea(m, s, np.zeros(m.nv))
        cols = np.column_stack([wb.rnea(m, s, e) - zero for e in np.eye(m.nv)])
        worst = max(worst, np.linalg.norm(M - cols) / np.linalg.norm(cols))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-8 and elapsed < 5.0, f"max rel Frobenius {worst:.2e} (< 1e-8), {elapsed:.2f} s (< 5 s)")


# -- 2: Jacobians and bias accelerations against central differences ------------------------


def test_ac2_jacobian_finite_differences():
    m = wb.load_fixture("biped.urdf")
    frames = sorted(m.tree.frames)
    rng = np.random.default_rng(7)
    err_j = err_b = 0.0
    for _ in range(50):
        s = random_state(rng, m)
        for f in frames:
            err_j = max(err_j, np.abs(wb.frame_jacobian(m, s, f) - fd_frame_jacobian(m, s, f, 1e-6)).max())
            err_b = max(err_b, np.abs(wb.bias_acceleration(m, s, f) - fd_bias_acceleration(m, s, f, 1e-6)).max())
    report(
        2,
        max(err_j, err_b) < 1e-5,
        f"{len(frames)} frames x 50 states: jacobian {err_j:.2e}, bias {err_b:.2e} (< 1e-5)",
    )


# -- 3: energy conservation -----------------------------------------------------------------


def _energy_drift(dt, duration=5.0):
    m = wb.load_fixture("double_pendulum.urdf")
    rng = np.random.default_rng(0)
    s = wb.neutral_state(m)
    s.q[:] = rng.uniform(-1, 1, m.n)
    s.nu[:] = rng.normal(0, 1, m.nv)
    # gravity off: free flight of a floating chain conserves kinetic energy exactly
    tr = run_scenario(m, None, Script(duration=duration), SimConfig(dt=dt, gravity=(0, 0, 0)), s)
    E = tr.energy
    return float(np.abs(E - E[0]).max() / abs(E[0]))


@pytest.mark.slow
def test_ac3_energy_drift():
    drift = _energy_drift(1e-4)
    report(3, drift < 1e-3, f"relative energy drift over 5 s at dt=1e-4: {drift:.2e} (< 1e-3)")


# -- 4: momentum-rate identity in stance ----------------------------------------------------


@pytest.mark.slow
def test_ac4_momentum_rate_identity():
    m = wb.load_fixture("biped_flat.urdf")
    cs = wb.ContactSet(m)
    s = standing_state(m, cs)
    cfg = ControllerConfig.from_dict({"posture_kp": 20.0, "posture_kd": 2.0})
    ctrl = BalanceController(m, PosturalTask(s.q.copy(), cfg.posture_kp, cfg.posture_kd), cfg)
    dt = 1e-4
    script = Script(
        duration=2.0,
        pushes=[Push("torso", (20.0, 0.0, 0.0, 0.0, 1.0, 0.0), 0.3, 0.2)],
        references=[ReferenceChange(0.8, com_offset=(0.01, 0.0, 0.0))],
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularContactWarning)
        tr = run_scenario(m, ctrl, script, SimConfig(dt=dt), s, cs)
    H = tr.array("momentum")
    F = tr.array("forces")
    mass = m.total_mass
    pred = np.zeros((len(tr), 6))
    for k in range(len(tr)):
        snap = Snapshot(m, tr.states[k])
        c = tr.com[k]
        X = cs.contact_map(snap)
        pred[k] = X @ F[k] + np.concatenate([mass * GRAVITY, np.zeros(3)])
        for frame, w in tr.external[k].items():
            _, p = snap.frame_pose(frame)
            pred[k, :3] += w.force
            pred[k, 3:] += w.torque + np.cross(p - c, w.force)
    Hdot = (H[1:] - H[:-1]) / dt
    err = np.linalg.norm(Hdot - pred[:-1], axis=1).max()
    scale = np.linalg.norm(pred[:-1], axis=1).max()
    rel = err / scale
    report(4, rel < 1e-2, f"max |dH/dt - (X f + w_g + w_ext)| / max |X f + w_g + w_ext| = {rel:.2e} (< 1e-2)")


# -- 5: motor identification ----------------------------------------------------------------


def test_ac5_motor_identification():
    planted = MotorModelParams(1.2, 0.4, 0.5, 0.08, 0.12)
    p = planted.as_array()
    fit, _ = identify(motor_dataset(np.random.default_rng(0), planted, n=2000))
    clean = float(np.max(np.abs(fit.as_array() - p) / p))
    noisy = []
    for seed in range(20):
        fit, _ = identify(motor_dataset(np.random.default_rng(100 + seed), planted, n=10_000, noise=0.01))
        noisy.append(np.max(np.abs(fit.as_array() - p) / p))
    med = float(np.median(noisy))
    report(5, clean < 1e-9 and med < 0.05, f"noise-free {clean:.2e} (< 1e-9), 1% noise median over 20 seeds {med:.2e} (< 0.05)")


# -- 6: inner torque loop on the series elastic joint ---------------------------------------


def _sea_run(tau_profile, duration=3.0, dt=1e-3):
    m = wb.load_fixture("sea_joint.urdf")
    cs = wb.ContactSet(m, ["end_stop"])
    s = wb.neutral_state(m)
    cfg = SimConfig(dt=dt, fixed_base=True, gravity=(0, 0, 0))
    gains = TorqueLoopGains()
    loop = MotorTorqueLoop(m, gains, dt)
    log = []

    def hook(t, state, snap, contacts, sea):
        tau = loop(np.array([tau_profile(t)]), state, sea)
        ls = loop.loop_states[0]
        log.append((t, ls.integral, ls.saturated, loop.voltages[0]))
        return tau, None

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularContactWarning)
        tr = run_scenario(m, hook, Script(duration=duration), cfg, s, cs, SeaState.at_rest(m, s))
    measured = deflection_torques(m, tr.final_state, tr.final_sea_state)[0]
    return measured, np.array(log), gains, m


def test_ac6_torque_loop_tracking_and_windup():
    step_err = abs(_sea_run(lambda t: 1.0)[0] - 1.0)
    # 0.2 s request whose feed-forward alone is twice the voltage limit
    m = wb.load_fixture("sea_joint.urdf")
    gains = TorqueLoopGains()
    big = 2.0 * gains.v_max / m.joints[0].motor.params.k_t

    def profile(t):
        return big if 0.5 <= t < 0.7 else 1.0

    measured, log, gains, _ = _sea_run(profile)
    sat = log[log[:, 2] > 0]
    frozen = bool(len(sat)) and np.ptp(sat[:, 1]) == 0.0
    bounded = np.abs(log[:, 1]).max() <= gains.integral_limit
    in_episode = (log[:, 0] >= 0.5) & (log[:, 0] < 0.7)
    peak_v = np.abs(log[in_episode, 3]).max()
    sat_err = abs(measured - 1.0)
    ok = step_err < 1e-6 and sat_err < 1e-6 and frozen and bounded and peak_v == gains.v_max
    report(
        6,
        ok,
        f"step error {step_err:.2e}, after saturation {sat_err:.2e} (< 1e-6); "
        f"{len(sat)} saturated ticks, integral frozen={frozen}, |integral| <= limit={bounded}",
    )


# -- 7: contact force QP --------------------------------------------------------------------


def _single_body(mass, mu, offsets, facets=8):
    link = wb.LinkSpec("body", mass, (0.0, 0.0, 0.0), ((0.1, 0, 0), (0, 0.1, 0), (0, 0, 0.1)))
    contacts = tuple(
        wb.ContactFrameSpec(f"c{i}", "body", wb.model.Pose(tuple(o)), mu=mu, cone_facets=facets)
        for i, o in enumerate(offsets)
    )
    return wb.RobotModel("body", (link,), (), "body", contacts)


def test_ac7_contact_force_qp():
    m = _single_body(2.0, 0.8, [(0.0, 0.0, -0.1)])
    snap = Snapshot(m, wb.neutral_state(m))
    cs = wb.ContactSet(m)
    X, cones = cs.contact_map(snap), cs.cone_constraints(snap)
    weight = m.total_mass * G
    lam = 1e-6
    sol = solve_contact_forces(np.zeros(6), X, m.total_mass, GRAVITY, cones, lam)
    # analytic minimizer of the regularized objective, and of the bare one as lambda -> 0
    static_err = np.abs(sol.forces - [0, 0, weight / (1 + lam)]).max()
    tiny = solve_contact_forces(np.zeros(6), X, m.total_mass, GRAVITY, cones, 1e-12)
    bare_err = np.abs(tiny.forces - [0, 0, weight]).max()

    rng = np.random.default_rng(3)
    obj_err = 0.0
    cone_viol = 0.0
    fn_min = np.inf
    # small enough for exhaustive enumeration: at most 2 contacts with 4-facet cones
    for _ in range(100):
        k = int(rng.integers(1, 3))
        mass, mu = float(rng.uniform(0.5, 5)), float(rng.uniform(0.3, 1.2))
        body = _single_body(mass, mu, rng.uniform(-0.2, 0.2, (k, 3)), facets=4)
        snap = Snapshot(body, wb.neutral_state(body))
        cs = wb.ContactSet(body)
        X, (A, b) = cs.contact_map(snap), cs.cone_constraints(snap)
        Hd = rng.normal(0, 10, 6)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = solve_contact_forces(Hd, X, body.total_mass, GRAVITY, (A, b))
        ref = brute_force_qp(s.problem)
        obj_err = max(obj_err, abs(s.problem.objective(s.forces) - ref[1]) / max(1.0, abs(ref[1])))
        cone_viol = max(cone_viol, float((A @ s.forces - b).max()))
        fn_min = min(fn_min, float(np.einsum("ij,ij->i", s.forces.reshape(-1, 3), cs.normals(snap)).min()))
    ok = static_err < 1e-8 and bare_err < 1e-8 and obj_err < 1e-8 and cone_viol <= 1e-10 and fn_min >= -1e-10
    report(
        7,
        ok,
        f"static |f - mg/(1+lam)| {static_err:.1e}, lam=1e-12 |f - mg| {bare_err:.1e} (< 1e-8); "
        f"brute-force objective {obj_err:.1e} (< 1e-8); cone violation {cone_viol:.1e}, min f_n {fn_min:.1e} (>= -1e-10)",
    )


# -- 8: torque selection --------------------------------------------------------------------


def test_ac8_torque_selection_residuals():
    m = wb.load_fixture("biped_flat.urdf")
    cs = wb.ContactSet(m)
    s0 = standing_state(m, cs)
    J0 = cs.jacobian(Snapshot(m, s0))
    null = np.linalg.svd(J0)[2][np.linalg.matrix_rank(J0) :].T
    rng = np.random.default_rng(8)
    worst, accepted = 0.0, 0
    for _ in range(50):
        s = s0.copy()
        s.nu[:] = null @ rng.normal(0, 0.3, null.shape[1])
        task = PosturalTask(s0.q + rng.normal(0, 0.1, m.n), 20.0, 2.0)
        _, d = control_step(m, s, cs, wb.center_of_mass(m, s) + rng.normal(0, 0.01, 3), task)
        if d.fallback:
            continue
        accepted += 1
        worst = max(worst, d.dynamics_residual, d.contact_residual)
    arm = wb.load_fixture("arm.urdf")
    exact = True
    for seed in range(10):
        r = np.random.default_rng(seed)
        s = random_state(r, arm)
        phi = r.normal(size=arm.n)
        exact &= np.array_equal(solve_torques(arm, s, np.zeros(0), phi, None, fixed_base=True).tau, phi)
    ok = accepted > 0 and worst < 1e-8 and exact
    report(8, ok, f"{accepted}/50 accepted solves, max residual {worst:.1e} (< 1e-8); fixed-base tau* == phi: {exact}")


# -- 9: estimation round trip ---------------------------------------------------------------


def test_ac9_estimation(tmp_path):
    out = tmp_path / "est"
    code = main(["estimate", "--config", "estimate.yaml", "--out", str(out)])
    summary = json.loads((out / "summary.json").read_text())
    f_err, t_err = summary["max_abs_wrench_error"], summary["max_abs_torque_error"]

    arm = wb.load_fixture("arm.urdf")
    s = wb.neutral_state(arm)
    s.q[:] = [0.3, 0.6, -0.4]
    nudot = np.zeros(arm.nv)
    ext = {"hand_tip": wb.SpatialWrench((2.0, -1.0, 3.0), (0.1, 0.0, -0.05), "hand_tip")}
    hyp = [ContactHypothesis("hand_tip")]
    sigmas = np.array([0.01, 0.1, 1.0])
    stds = []
    for sigma in sigmas:
        sensor = FtSensorSpec("upper_arm_ft", "upper_arm_ft", noise_sigma=[sigma, 0.0])
        errs = []
        for seed in range(1000):
            w = synthesize_ft_reading(arm, s, nudot, ext, sensor, seed=seed)
            res = estimate(arm, s, nudot, [sensor], {sensor.name: w}, hyp)
            errs.append(res.wrenches["hand_tip"].force - ext["hand_tip"].force)
        stds.append(float(np.std(errs, axis=0).mean()))
    stds = np.array(stds)
    slope, intercept = np.polyfit(sigmas, stds, 1)
    fitted = slope * sigmas + intercept
    r2 = 1 - np.sum((stds - fitted) ** 2) / np.sum((stds - stds.mean()) ** 2)
    ok = code == 0 and f_err < 1e-8 and t_err < 1e-8 and r2 > 0.99
    report(
        9,
        ok,
        f"push round trip |f_hat - f| {f_err:.1e}, |tau_hat - tau| {t_err:.1e} (< 1e-8); "
        f"force error std {stds.round(5).tolist()} vs sigma, R^2 {r2:.6f} (> 0.99)",
    )


# -- 10: closed-loop balance ----------------------------------------------------------------


@pytest.mark.slow
def test_ac10_balance_scenario():
    args = build_parser().parse_args(["simulate", "--config", "balance.yaml"])
    model, _, sim_cfg, script, contacts, state, controller = _scenario(args)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularContactWarning)
        tr = run_scenario(model, controller, script, sim_cfg, state, contacts)
    wall = time.perf_counter() - t0
    t = np.array(tr.time)
    com = tr.array("com")[:, :2]
    push_start = script.pushes[0].start
    pre = com[np.searchsorted(t, push_start) - 1]
    dev = np.linalg.norm(com - pre, axis=1)
    late = dev[t >= 10.0].max()
    failures = sum(1 for d in tr.diagnostics if d is None or d.force_status != "optimal" or d.fallback)
    margin = min(tr.cone_margin)
    ok = failures == 0 and dev.max() < 0.05 and late < 1e-3 and margin >= -1e-10 and wall < 60.0
    report(
        10,
        ok,
        f"{len(tr)} steps, QP failures {failures}, peak excursion {dev.max() * 1e3:.3f} mm, "
        f"max after t=10 s {late * 1e3:.4f} mm (< 1 mm), min cone margin {margin:.2e}, wall {wall:.1f} s (< 60 s)",
    )


# -- 11: determinism ------------------------------------------------------------------------


def test_ac11_cli_determinism(tmp_path):
    runs = {
        "simulate": (["simulate", "--config", "balance.yaml", "--duration", "2.5", "--seed", "5"], ["trajectory.csv", "diagnostics.csv"]),
        "estimate": (["estimate", "--config", "estimate.yaml", "--seed", "5"], ["estimation.csv", "ft_readings.csv"]),
    }
    noisy = tmp_path / "noisy.yaml"
    with open(wb.fixture_path("estimate.yaml"), encoding="utf-8") as fh:
        noisy.write_text(fh.read() + "noise_sigma: [0.1, 0.01]\n")
    runs["estimate-noisy"] = (["estimate", "--config", str(noisy), "--seed", "5"], ["estimation.csv", "ft_readings.csv"])
    identical = []
    for name, (argv, files) in runs.items():
        a, b = tmp_path / f"{name}-a", tmp_path / f"{name}-b"
        assert main(argv + ["--out", str(a)]) == 0
        assert main(argv + ["--out", str(b)]) == 0
        identical += [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    report(11, all(identical), f"{sum(identical)}/{len(identical)} CSV files byte-identical across repeated runs")
