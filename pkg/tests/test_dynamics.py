import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import wholebody as wb
from wholebody.dynamics import GRAVITY, integrate_state
from wholebody.spatial import skew

from oracles import fd_bias_acceleration, fd_frame_jacobian, random_state, random_tree

G = -GRAVITY[2]


@pytest.fixture(scope="module")
def pendulum():
    return wb.load_fixture("pendulum.urdf")


@pytest.fixture(scope="module")
def biped():
    return wb.load_fixture("biped.urdf")


def _pend_state(m, q, qdot=0.0):
    s = wb.neutral_state(m)
    s.q[:] = q
    s.nu[6] = qdot
    return s


# -- kinematics -------------------------------------------------------------


def test_pendulum_tip_at_rest(pendulum):
    R, p = wb.forward_kinematics(pendulum, _pend_state(pendulum, 0.0), "tip")
    assert np.allclose(p, [0, 0, -1.0], atol=1e-15)
    assert np.allclose(R, np.eye(3))


def test_pendulum_tip_quarter_turn(pendulum):
    # right-handed rotation about +y carries -z onto -x
    _, p = wb.forward_kinematics(pendulum, _pend_state(pendulum, np.pi / 2), "tip")
    assert np.allclose(p, [-1.0, 0, 0], atol=1e-12)


def test_base_translation_moves_every_frame(biped):
    rng = np.random.default_rng(3)
    s = random_state(rng, biped)
    moved = s.copy()
    d = np.array([0.3, -1.2, 0.7])
    moved.base_position += d
    for f in [l.name for l in biped.links] + ["l_foot", "r_foot"]:
        assert np.allclose(wb.forward_kinematics(biped, moved, f)[1], wb.forward_kinematics(biped, s, f)[1] + d, atol=1e-14)


def test_unknown_frame(biped):
    with pytest.raises(KeyError):
        wb.forward_kinematics(biped, wb.neutral_state(biped), "nose")


def test_jacobian_base_block_identity(biped):
    s = random_state(np.random.default_rng(0), biped)
    for f in ("l_foot", "r_shank", "torso"):
        assert np.allclose(wb.frame_jacobian(biped, s, f)[:3, :3], np.eye(3))


def test_pendulum_jacobian_fd(pendulum):
    s = _pend_state(pendulum, 0.0)
    J = wb.frame_jacobian(pendulum, s, "tip")
    assert np.abs(J - fd_frame_jacobian(pendulum, s, "tip")).max() < 1e-6


def test_base_frame_has_no_joint_columns(biped):
    s = random_state(np.random.default_rng(1), biped)
    assert np.all(wb.frame_jacobian(biped, s, "torso")[:, 6:] == 0)


def test_jacobian_matches_finite_differences(biped):
    rng = np.random.default_rng(11)
    for _ in range(5):
        s = random_state(rng, biped)
        for f in ("l_foot", "r_foot", "l_shank"):
            assert np.abs(wb.frame_jacobian(biped, s, f) - fd_frame_jacobian(biped, s, f)).max() < 1e-5


def test_bias_zero_at_rest(biped):
    assert np.all(wb.bias_acceleration(biped, wb.neutral_state(biped), "l_foot") == 0)


def test_pendulum_centripetal(pendulum):
    a = wb.bias_acceleration(pendulum, _pend_state(pendulum, 0.0, 1.0), "tip")
    # tip at (0,0,-1): centripetal acceleration l*qdot^2 toward the pivot
    assert np.allclose(a[:3], [0, 0, 1.0], atol=1e-12)
    assert np.allclose(a[3:], 0)


def test_bias_matches_finite_differences(biped):
    rng = np.random.default_rng(5)
    for _ in range(5):
        s = random_state(rng, biped)
        for f in ("l_foot", "r_foot"):
            assert np.abs(wb.bias_acceleration(biped, s, f) - fd_bias_acceleration(biped, s, f)).max() < 1e-5


# -- inverse dynamics -----------------------------------------------------------


@pytest.mark.parametrize("q", [0.0, 0.4, -1.3, 2.5])
def test_pendulum_gravity_torque(pendulum, q):
    tau = wb.rnea(pendulum, _pend_state(pendulum, q), np.zeros(7))
    assert tau[6] == pytest.approx(2.0 * G * 1.0 * np.sin(q), abs=1e-12)
    assert np.allclose(tau[:3], [0, 0, pendulum.total_mass * G])


def test_gravity_off_static_is_zero(biped):
    s = random_state(np.random.default_rng(2), biped)
    s.nu[:] = 0
    assert np.abs(wb.rnea(biped, s, np.zeros(10), gravity=np.zeros(3))).max() == 0


def test_cancelling_wrench_at_com(biped):
    s = random_state(np.random.default_rng(4), biped)
    s.nu[:] = 0
    c = wb.center_of_mass(biped, s)
    # a wrench at the base origin equal to the weight carried to that point
    base_p = s.base_position
    f = -biped.total_mass * GRAVITY
    w = wb.SpatialWrench(f, np.cross(c - base_p, f), "torso")
    tau = wb.rnea(biped, s, np.zeros(10), {"torso": w})
    assert np.abs(tau[:6]).max() < 1e-10


def test_rnea_dimension_mismatch(biped):
    with pytest.raises(ValueError):
        wb.rnea(biped, wb.neutral_state(biped), np.zeros(3))


def test_rnea_unknown_external_frame(biped):
    s = wb.neutral_state(biped)
    with pytest.raises(KeyError):
        wb.rnea(biped, s, np.zeros(10), {"nose": wb.SpatialWrench(np.ones(3), np.zeros(3), "nose")})


def test_external_wrench_enters_as_jacobian_transpose(biped):
    rng = np.random.default_rng(8)
    s = random_state(rng, biped)
    nudot = rng.normal(size=10)
    w = rng.normal(size=6)
    ext = {"l_foot": wb.SpatialWrench.from_vector(w, "l_foot")}
    diff = wb.rnea(biped, s, nudot) - wb.rnea(biped, s, nudot, ext)
    assert np.allclose(diff, wb.frame_jacobian(biped, s, "l_foot").T @ w, atol=1e-12)


def test_local_axes_wrench(biped):
    s = random_state(np.random.default_rng(9), biped)
    R, _ = wb.forward_kinematics(biped, s, "r_foot")
    w = np.array([1.0, -2.0, 3.0, 0.1, 0.2, -0.3])
    world = wb.SpatialWrench(R @ w[:3], R @ w[3:], "r_foot")
    local = wb.SpatialWrench.from_vector(w, "r_foot", axes="local")
    z = np.zeros(10)
    assert np.allclose(wb.rnea(biped, s, z, {"r_foot": world}), wb.rnea(biped, s, z, {"r_foot": local}))


# -- mass matrix ------------------------------------------------------------------


def test_mass_matrix_translation_block(biped):
    M = wb.mass_matrix(biped, random_state(np.random.default_rng(0), biped))
    assert np.allclose(M[:3, :3], biped.total_mass * np.eye(3))


def test_pendulum_joint_inertia(pendulum):
    M = wb.mass_matrix(pendulum, _pend_state(pendulum, 0.7))
    assert M[6, 6] == pytest.approx(0.02 + 2.0 * 1.0**2, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_crba_matches_rnea_columns(seed):
    rng = np.random.default_rng(seed)
    m = random_tree(rng)
    s = random_state(rng, m)
    M = wb.mass_matrix(m, s)
    assert np.abs(M - M.T).max() < 1e-12
    s0 = s.copy()
    s0.nu[:] = 0
    cols = np.column_stack([wb.rnea(m, s0, e, gravity=np.zeros(3)) for e in np.eye(m.nv)])
    assert np.linalg.norm(M - cols) <= 1e-8 * np.linalg.norm(M)
    assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() > 0


def test_bias_forces_definitions(biped):
    rng = np.random.default_rng(12)
    s = random_state(rng, biped)
    assert np.array_equal(wb.bias_forces(biped, s), wb.rnea(biped, s, np.zeros(10)))
    rest = s.copy()
    rest.nu[:] = 0
    assert np.allclose(wb.bias_forces(biped, rest), wb.gravity_forces(biped, rest), atol=1e-12)
    g = wb.gravity_forces(biped, s)
    assert np.allclose(g[:3], -biped.total_mass * GRAVITY)


def test_equations_of_motion_consistent(biped):
    rng = np.random.default_rng(13)
    s = random_state(rng, biped)
    nudot = rng.normal(size=10)
    lhs = wb.mass_matrix(biped, s) @ nudot + wb.bias_forces(biped, s)
    assert np.allclose(lhs, wb.rnea(biped, s, nudot), atol=1e-10)


def test_coriolis_does_no_work():
    # gravity off: d/dt(0.5 nu'M nu) equals nu' M nudot along free motion, so nu'(C nu) = 0.5 nu' Mdot nu
    m = wb.load_fixture("double_pendulum.urdf")
    rng = np.random.default_rng(14)
    s = random_state(rng, m)
    h = 1e-6
    Mp = wb.mass_matrix(m, integrate_state(s, s.nu, h))
    Mm = wb.mass_matrix(m, integrate_state(s, s.nu, -h))
    Mdot = (Mp - Mm) / (2 * h)
    c = wb.bias_forces(m, s, gravity=np.zeros(3))
    assert s.nu @ c == pytest.approx(0.5 * s.nu @ Mdot @ s.nu, abs=1e-6)


# -- momentum ----------------------------------------------------------------------


def test_momentum_zero_at_rest(biped):
    H = wb.centroidal_momentum(biped, wb.neutral_state(biped))
    assert np.all(H.vector == 0)


def test_pure_translation_momentum(biped):
    s = random_state(np.random.default_rng(15), biped)
    s.nu[:] = 0
    v = np.array([0.5, -1.0, 2.0])
    s.nu[:3] = v
    H = wb.centroidal_momentum(biped, s)
    assert np.allclose(H.linear, biped.total_mass * v)
    assert np.allclose(H.angular, 0, atol=1e-12)


def test_linear_momentum_matches_com_velocity(biped):
    rng = np.random.default_rng(16)
    h = 1e-6
    for _ in range(5):
        s = random_state(rng, biped)
        cp = wb.center_of_mass(biped, integrate_state(s, s.nu, h))
        cm = wb.center_of_mass(biped, integrate_state(s, s.nu, -h))
        H = wb.centroidal_momentum(biped, s)
        assert np.allclose(H.linear, biped.total_mass * (cp - cm) / (2 * h), atol=1e-6)


# -- contact map --------------------------------------------------------------------


def test_contact_map_block_structure(biped):
    s = random_state(np.random.default_rng(17), biped)
    cs = wb.ContactSet(biped)
    X = wb.contact_map(biped, s, cs)
    c = wb.center_of_mass(biped, s)
    for k, name in enumerate(("l_foot", "r_foot")):
        p = wb.forward_kinematics(biped, s, name)[1]
        block = X[:, 3 * k : 3 * k + 3]
        assert np.allclose(block[:3], np.eye(3))
        assert np.allclose(block[3:], skew(p - c))


def test_contact_below_com_lever():
    # lever p - c = (0, 0, -1) with force (1, 0, 0) gives a torque of (0, -1, 0)
    m = wb.load_fixture("pendulum.urdf")
    com = wb.center_of_mass(m, wb.neutral_state(m))
    frame = wb.ContactFrameSpec("below", "base", wb.model.Pose(tuple(com - [0, 0, 1.0])))
    m2 = m.with_contacts((frame,))
    X = wb.contact_map(m2, wb.neutral_state(m2), wb.ContactSet(m2))
    assert np.allclose(X @ [1.0, 0, 0], [1, 0, 0, 0, -1.0, 0], atol=1e-15)


def test_contact_at_com_has_no_moment():
    m = wb.load_fixture("pendulum.urdf")
    com = wb.center_of_mass(m, wb.neutral_state(m))
    frame = wb.ContactFrameSpec("at_com", "base", wb.model.Pose(tuple(com)))
    m2 = m.with_contacts((frame,))
    X = wb.contact_map(m2, wb.neutral_state(m2), wb.ContactSet(m2))
    assert np.allclose(X, np.vstack([np.eye(3), np.zeros((3, 3))]), atol=1e-15)
