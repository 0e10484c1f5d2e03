import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from graspfield.se3 import (
    AngleNearPi,
    Pose,
    PoseBounds,
    Twist,
    adjoint,
    compose,
    expmap,
    inverse,
    logmap,
    perturb,
    random_pose,
    random_pose_matrices,
    se3_exp,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    se3_log,
    skew,
    twist_distance,
)


def twist_hat(xi):
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[3:])
    m[:3, 3] = xi[:3]
    return m


def random_twists(rng, n, max_angle=3.0):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    phi = axis * rng.uniform(0, max_angle, size=(n, 1))
    rho = rng.normal(size=(n, 3))
    return np.hstack([rho, phi])


finite = st.floats(-2.0, 2.0, allow_nan=False)
vec6 = st.lists(finite, min_size=6, max_size=6).map(np.array)


def test_zero_twist_is_identity():
    assert np.array_equal(expmap(Twist.zero()).matrix(), np.eye(4))


def test_pure_translation():
    H = expmap(Twist([1, 2, 3], [0, 0, 0]))
    assert np.allclose(H.rotation, np.eye(3))
    assert np.allclose(H.translation, [1, 2, 3])


def test_quarter_turn_about_z():
    H = expmap(Twist([0, 0, 0], [0, 0, np.pi / 2]))
    assert np.allclose(H.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    assert np.allclose(H.translation, 0)
    assert np.allclose(H.matrix(), expm(twist_hat(np.array([0, 0, 0, 0, 0, np.pi / 2]))), atol=1e-12)


def test_log_identity_and_translation():
    assert np.allclose(logmap(Pose.identity()).as_vector(), 0)
    v = logmap(Pose(np.eye(3), [0.3, -1, 2]))
    assert np.allclose(v.rho, [0.3, -1, 2]) and np.allclose(v.phi, 0)


def test_round_trip_ten_thousand():
    xi = random_twists(np.random.default_rng(0), 10_000)
    err = np.linalg.norm(se3_log(se3_exp(xi)) - xi, axis=1)
    assert err.max() < 1e-8


def test_matches_matrix_exponential():
    xi = random_twists(np.random.default_rng(1), 100)
    H = se3_exp(xi)
    for h, x in zip(H, xi):
        assert np.abs(h - expm(twist_hat(x))).max() < 1e-8


def test_small_angle_series_is_continuous():
    for theta in (1e-9, 1e-7, 0.99e-6, 1.01e-6, 1e-5):
        xi = np.array([0.1, -0.2, 0.3, theta, 0, 0])
        assert np.abs(se3_exp(xi) - expm(twist_hat(xi))).max() < 1e-12
        assert np.abs(se3_log(se3_exp(xi)) - xi).max() < 1e-12


def test_angle_near_pi_raises():
    H = np.eye(4)
    H[:3, :3] = np.diag([1.0, -1.0, -1.0])
    with pytest.raises(AngleNearPi):
        se3_log(H)
    v = se3_log(H, strict=False)
    assert np.isclose(np.linalg.norm(v[3:]), np.pi)


def test_group_axioms():
    rng = np.random.default_rng(2)
    A, B, C = (Pose.from_matrix(h) for h in se3_exp(random_twists(rng, 3)))
    assert np.allclose(compose(A, inverse(A)).matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(compose(Pose.identity(), A).matrix(), A.matrix(), atol=1e-12)
    assert np.allclose(compose(compose(A, B), C).matrix(), compose(A, compose(B, C)).matrix(), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(vec6, vec6, vec6)
def test_associativity_property(a, b, c):
    A, B, C = (Pose.from_matrix(se3_exp(x)) for x in (a, b, c))
    assert np.abs(((A @ B) @ C).matrix() - (A @ (B @ C)).matrix()).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(vec6)
def test_compositions_stay_orthonormal(x):
    H = Pose.from_matrix(se3_exp(x))
    for _ in range(20):
        H = H @ H
    R = H.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert np.linalg.det(R) > 0


def test_left_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    for xi in random_twists(rng, 20, 2.5):
        J = se3_left_jacobian(xi)
        h = 1e-6
        num = np.zeros((6, 6))
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            # exp(xi + d) ~ exp(Jl d) exp(xi)
            num[:, i] = (se3_log(se3_exp(xi + d) @ np.linalg.inv(se3_exp(xi)))
                         - se3_log(se3_exp(xi - d) @ np.linalg.inv(se3_exp(xi)))) / (2 * h)
        assert np.abs(J - num).max() < 1e-6
        assert np.allclose(se3_left_jacobian_inv(xi) @ J, np.eye(6), atol=1e-9)


def test_adjoint_conjugation():
    rng = np.random.default_rng(4)
    H = se3_exp(random_twists(rng, 1)[0])
    xi = random_twists(rng, 1, 1.0)[0]
    assert np.allclose(H @ se3_exp(xi) @ np.linalg.inv(H), se3_exp(adjoint(H) @ xi), atol=1e-10)


def test_random_pose_zero_extent():
    bounds = PoseBounds([0.1, 0.2, 0.3], [0, 0, 0])
    H = random_pose(bounds, np.random.default_rng(0))
    assert np.array_equal(H.translation, [0.1, 0.2, 0.3])


def test_random_pose_uniformity_and_bounds():
    bounds = PoseBounds([1.0, -1.0, 0.0], [0.2, 0.3, 0.4])
    H = random_pose_matrices(bounds, np.random.default_rng(5), 10_000)
    assert np.abs(H[:, :3, :3].mean(axis=0)).max() < 0.02
    off = np.abs(H[:, :3, 3] - bounds.center)
    assert np.all(off <= bounds.half_extents)


def test_pose_bounds_rejects_negative():
    with pytest.raises(ValueError):
        PoseBounds([0, 0, 0], [1, -1, 1])


def test_perturb_tiny_sigma():
    H = Pose.from_matrix(se3_exp(np.array([0.1, 0.2, 0.3, 0.4, -0.2, 0.1])))
    Hk, eps = perturb(H, 1e-12, np.random.default_rng(0))
    assert twist_distance(H, Hk) < 1e-9
    assert np.abs(eps.as_vector()).max() < 1e-10


def test_perturb_identity_base():
    Hk, eps = perturb(Pose.identity(), 0.1, np.random.default_rng(7))
    assert np.array_equal(Hk.matrix(), Pose.from_matrix(se3_exp(eps.as_vector())).matrix())


def test_perturb_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        perturb(Pose.identity(), 0.0, np.random.default_rng(0))


def test_perturb_noise_std():
    from graspfield.se3 import perturb_matrices

    H = np.broadcast_to(np.eye(4), (10_000, 4, 4))
    _, eps = perturb_matrices(H, 0.1, np.random.default_rng(8))
    assert np.all(np.abs(eps.std(axis=0) / 0.1 - 1) < 0.02)


def test_twist_distance_examples():
    H = Pose.from_matrix(se3_exp(np.array([0.1, 0.2, 0.3, 0.4, -0.2, 0.1])))
    assert twist_distance(H, H) == pytest.approx(0, abs=1e-12)
    assert twist_distance(Pose.identity(), Pose(np.eye(3), [1.0, 0, 0])) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(vec6, vec6)
def test_twist_distance_symmetric(a, b):
    A, B = Pose.from_matrix(se3_exp(a)), Pose.from_matrix(se3_exp(b))
    try:
        dab, dba = twist_distance(A, B), twist_distance(B, A)
    except AngleNearPi:
        return
    assert abs(dab - dba) < 1e-9


def test_serialization_row_major():
    H = Pose(np.eye(3), [1, 2, 3])
    vals = H.to_list()
    assert len(vals) == 16 and vals[3] == 1 and vals[7] == 2 and vals[11] == 3
    assert Pose.from_list(vals).matrix().tolist() == H.matrix().tolist()
    assert Twist([1, 2, 3], [4, 5, 6]).to_list() == [1, 2, 3, 4, 5, 6]


def test_invalid_inputs():
    with pytest.raises(ValueError):
        Twist([np.nan, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), [0, 0, 0])
