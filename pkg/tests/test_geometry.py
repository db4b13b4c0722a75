import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from radcal.geometry import (
    CameraIntrinsics,
    ExtrinsicTransform,
    IllConditionedLogError,
    gated_update,
    hat,
    matrix_to_quat,
    pose_errors,
    project_point,
    quat_to_matrix,
    se3_exp,
    se3_from_quat_trans,
    se3_left_jacobian,
    se3_log,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    vee,
)


def twist_matrix(xi):
    m = np.zeros((4, 4))
    m[:3, :3] = hat(xi[3:])
    m[:3, 3] = xi[:3]
    return m


def expm_squaring(A, terms=30):
    """Scaling-and-squaring Taylor exponential, independent of the closed forms."""
    s = max(0, int(math.ceil(math.log2(max(np.abs(A).sum(axis=1).max(), 1e-300)))) + 4)
    B = A / 2.0**s
    E = np.eye(len(A))
    term = np.eye(len(A))
    for k in range(1, terms):
        term = term @ B / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


finite = st.floats(-1.0, 1.0, allow_nan=False)
twists = st.lists(finite, min_size=6, max_size=6).map(lambda v: np.array(v) * np.r_[5, 5, 5, 3, 3, 3] / math.sqrt(3))


def test_exp_zero_is_identity():
    T = se3_exp(np.zeros(6))
    assert np.array_equal(T.as_matrix(), np.eye(4))


def test_exp_quarter_turn_about_z():
    T = se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(T.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(T.translation, 0, atol=1e-15)


def test_exp_matches_scaling_and_squaring_oracle():
    xi = np.array([1, 2, 3, 0.1, -0.2, 0.3])
    oracle = expm_squaring(twist_matrix(xi))
    np.testing.assert_allclose(se3_exp(xi).as_matrix(), oracle, atol=1e-12)
    np.testing.assert_allclose(se3_log(ExtrinsicTransform.from_matrix(oracle)), xi, atol=1e-9)


def test_log_identity_and_quarter_turn():
    assert np.array_equal(se3_log(ExtrinsicTransform.identity()), np.zeros(6))
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(se3_log(ExtrinsicTransform(R, np.zeros(3))), [0, 0, 0, 0, 0, math.pi / 2], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(twists)
def test_exp_log_round_trip(xi):
    T = se3_exp(xi)
    assert T.orthonormality_error() < 1e-12
    np.testing.assert_allclose(se3_log(T), xi, atol=1e-9)
    # composition oracle exp(log(T)) T^-1 = I
    np.testing.assert_allclose((se3_exp(se3_log(T)) @ T.inverse()).as_matrix(), np.eye(4), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(twists)
def test_exp_agrees_with_scipy_expm(xi):
    np.testing.assert_allclose(se3_exp(xi).as_matrix(), expm(twist_matrix(xi)), atol=1e-10)


@pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3, 0.049, 0.051, 1.0])
def test_small_angle_branches_are_continuous(theta):
    rng = np.random.default_rng(int(theta * 1e6) % 1000)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xi = np.r_[rng.normal(size=3), theta * axis]
    np.testing.assert_allclose(se3_exp(xi).as_matrix(), expm(twist_matrix(xi)), atol=1e-14, rtol=0)
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


def test_log_near_pi_uses_symmetric_part():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for theta in (math.pi - 1e-4, math.pi - 2e-6):
        phi = so3_log(so3_exp(theta * axis))
        assert abs(np.linalg.norm(phi) - theta) < 1e-9
        assert abs(abs(phi @ axis) - theta) < 1e-8


def test_log_at_pi_is_ill_conditioned():
    with pytest.raises(IllConditionedLogError):
        so3_log(so3_exp([math.pi, 0.0, 0.0]))


def test_left_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(5):
        xi = rng.normal(size=6)
        J = se3_left_jacobian(xi)
        h = 1e-6
        # exp(xi + d) ~ exp(J d) exp(xi)
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            lhs = se3_log(se3_exp(xi + d) @ se3_exp(xi).inverse()) / h
            np.testing.assert_allclose(lhs, J[:, i], atol=1e-5)
        phi = xi[3:]
        np.testing.assert_allclose(so3_left_jacobian(phi) @ so3_left_jacobian_inv(phi), np.eye(3), atol=1e-12)


def test_hat_vee_inverse():
    v = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(vee(hat(v)), v)
    np.testing.assert_allclose(hat(v) @ np.array([1.0, 2.0, 3.0]), np.cross(v, [1.0, 2.0, 3.0]))


# -- gate -------------------------------------------------------------------------


def test_gate_zero_returns_base_exactly():
    T0 = se3_exp([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    T = gated_update(T0, [5, 5, 5, 1, 1, 1], 0.0)
    assert np.array_equal(T.as_matrix(), T0.as_matrix())


def test_gate_one_from_identity_is_exp():
    xi = np.array([0.5, -0.1, 0.2, 0.3, 0.0, -0.4])
    np.testing.assert_allclose(gated_update(ExtrinsicTransform.identity(), xi, 1.0).as_matrix(), se3_exp(xi).as_matrix(), atol=1e-15)


def test_gate_half_matches_direct_formula():
    T0 = se3_exp([1, 0, 0, 0, 0.2, 0])
    xi = np.array([0.2, 0.4, -0.6, 0.8, -0.2, 0.1])
    expected = se3_exp(0.5 * xi).as_matrix() @ T0.as_matrix()
    np.testing.assert_allclose(gated_update(T0, xi, 0.5).as_matrix(), expected, atol=1e-14)


@pytest.mark.parametrize("rho", [-0.1, 1.5, math.nan])
def test_gate_outside_unit_interval_raises(rho):
    with pytest.raises(ValueError):
        gated_update(ExtrinsicTransform.identity(), np.zeros(6), rho)


# -- quaternions ------------------------------------------------------------------


def test_quaternion_examples():
    T = se3_from_quat_trans([1, 0, 0, 0], [0, 0, 0])
    np.testing.assert_array_equal(T.as_matrix(), np.eye(4))
    c = math.cos(math.pi / 4)
    T = se3_from_quat_trans([c, 0, 0, c], [1, 0, 0])
    np.testing.assert_allclose(T.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_array_equal(T.translation, [1, 0, 0])
    np.testing.assert_array_equal(quat_to_matrix([2, 0, 0, 0]), np.eye(3))


def test_degenerate_quaternion_raises():
    with pytest.raises(ValueError):
        quat_to_matrix([0, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_matrix_round_trip(q):
    q = np.array(q) / np.linalg.norm(q)
    q = q if q[0] >= 0 else -q
    R = quat_to_matrix(q)
    back = matrix_to_quat(R)
    # w = 0 admits both signs
    assert np.allclose(back, q, atol=1e-9) or (abs(q[0]) < 1e-9 and np.allclose(back, -q, atol=1e-9))


# -- errors and projection ------------------------------------------------------------


def test_pose_errors_examples():
    T = se3_exp([0.1, 0.2, 0.3, 0.0, 0.1, 0.0])
    assert pose_errors(T, T) == (0.0, 0.0)
    Rx = ExtrinsicTransform(so3_exp([math.radians(10.0), 0, 0]), T.translation)
    rot, trans = pose_errors(ExtrinsicTransform(Rx.rotation @ T.rotation, T.translation), T)
    assert rot == pytest.approx(10.0, abs=1e-12)
    assert trans == 0.0


def test_pose_errors_match_quaternion_angle_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = se3_exp(rng.normal(size=6))
        b = se3_exp(rng.normal(size=6) * rng.choice([1e-8, 1e-3, 1.0]))
        b = b @ a
        qa, qb = matrix_to_quat(a.rotation), matrix_to_quat(b.rotation)
        d = min(1.0, abs(float(qa @ qb)))
        # 2*atan2 form of the quaternion angle is accurate at small angles
        s = float(np.linalg.norm(qa[0] * qb[1:] - qb[0] * qa[1:] - np.cross(qa[1:], qb[1:])))
        oracle = math.degrees(2 * math.atan2(s, d))
        assert abs(pose_errors(b, a)[0] - oracle) < 1e-6
        assert abs(pose_errors(b, a)[0] - math.degrees(2 * math.acos(d))) < 1e-5


def test_project_boresight_and_offset():
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    u, v, z = project_point(K, ExtrinsicTransform.identity(), [0, 0, 10])
    assert (u, v, z) == (320.0, 240.0, 10.0)
    u, _, _ = project_point(K, ExtrinsicTransform.identity(), [1, 0, 10])
    assert u == pytest.approx(370.0, abs=1e-12)


def test_project_behind_min_depth_is_nan():
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    u, v, z = project_point(K, ExtrinsicTransform.identity(), [0, 0, 0.05])
    assert math.isnan(u) and math.isnan(v) and z == 0.05


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(11)
    K = CameraIntrinsics(480, 510, 300, 200, 640, 480)
    for _ in range(200):
        T = se3_exp(np.r_[rng.normal(size=3), 0.2 * rng.normal(size=3)])
        X = np.r_[rng.uniform(-5, 5, 2), rng.uniform(5, 50)]
        P = K.matrix() @ T.as_matrix()[:3]
        h = P @ np.r_[X, 1.0]
        u, v, z = project_point(K, T, X)
        if z > 0.1:
            assert abs(u - h[0] / h[2]) < 1e-9 and abs(v - h[1] / h[2]) < 1e-9


def test_transform_validation_and_immutability():
    with pytest.raises(ValueError):
        ExtrinsicTransform(np.eye(3), [0, 0, math.inf])
    T = ExtrinsicTransform.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


def test_intrinsics_scaled():
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480).scaled(4)
    assert (K.fx, K.cx, K.width, K.height) == (125.0, 80.0, 160, 120)
    with pytest.raises(ValueError):
        CameraIntrinsics(-1, 500, 320, 240, 640, 480)
