import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graspfield.dataset import ShapeSpec, make_shape
from graspfield.geometry import sdf_query
from graspfield.grasp_eval import (
    Contact,
    GraspEvaluation,
    GraspPair,
    GripperSpec,
    chamfer,
    chamfer_brute,
    collision_check,
    collision_check_brute,
    contact_frame,
    extract_contacts,
    fc_percentage,
    force_closure,
    force_closure_oracle,
    grasp_matrix,
    hull_margin,
    pair_dual_arm,
    target_grasp_ratio,
)
from graspfield.se3 import random_rotations, skew

GRIPPER = GripperSpec()


def pose(R=None, t=(0, 0, 0)):
    H = np.eye(4)
    H[:3, :3] = np.eye(3) if R is None else R
    H[:3, 3] = t
    return H


@pytest.fixture(scope="module")
def small_box():
    return make_shape(ShapeSpec("box", {"size": [0.06, 0.04, 0.04]}))


@pytest.fixture(scope="module")
def long_box():
    return make_shape(ShapeSpec("box", {"size": [0.40, 0.06, 0.06]}))


def sphere_contacts(mu=0.3):
    return [Contact([1, 0, 0], [-1, 0, 0], mu), Contact([-1, 0, 0], [1, 0, 0], mu)]


def test_gripper_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        GripperSpec(finger_length=0)


def test_contact_rejects_non_unit_normal():
    with pytest.raises(ValueError):
        Contact([0, 0, 0], [0, 0, 2])
    with pytest.raises(ValueError):
        Contact([0, 0, 0], [0, 0, 1], mu=-0.1)


def test_collision_far_and_inside(small_box):
    assert not collision_check(small_box, GRIPPER, pose(t=(1.0, 0, 0)))
    big = make_shape(ShapeSpec("box", {"size": [0.5, 0.5, 0.5]}))
    assert collision_check(big, GRIPPER, pose())


def test_collision_clean_grasp_and_finger_hit(small_box):
    assert not collision_check(small_box, GRIPPER, pose())
    # sliding the gripper sideways drives one finger through the box
    assert collision_check(small_box, GRIPPER, pose(t=(0.03, 0, 0)))


def test_collision_matches_brute_force(small_box):
    rng = np.random.default_rng(0)
    Rs = random_rotations(rng, 150)
    ts = rng.uniform(-0.08, 0.08, size=(150, 3))
    hits = 0
    for R, t in zip(Rs, ts):
        H = pose(R, t)
        fast = collision_check(small_box, GRIPPER, H)
        assert fast == collision_check_brute(small_box, GRIPPER, H)
        hits += fast
    assert 0 < hits < 150


def test_contacts_across_parallel_faces(small_box):
    cs = extract_contacts(small_box, GRIPPER, pose())
    assert len(cs) == 2
    assert np.dot(cs[0].normal, cs[1].normal) == pytest.approx(-1.0)
    assert np.abs(sdf_query(small_box, np.array([c.position for c in cs]))).max() < 1e-6
    # normals point into the object, against the ray that found them
    assert cs[0].normal[0] < 0 < cs[1].normal[0]


def test_contacts_in_empty_space(small_box):
    assert extract_contacts(small_box, GRIPPER, pose(t=(0, 0, 0.5))) == []


def test_grasp_matrix_single_contact_at_origin():
    c = Contact([0.2, -0.1, 0.3], [0, 0, 1])
    G = grasp_matrix([c])
    assert G.shape == (6, 3)
    assert np.allclose(G[:3], contact_frame(c.normal)) and np.allclose(G[3:], 0)


def test_grasp_matrix_columns_and_translation():
    rng = np.random.default_rng(1)
    n = rng.normal(size=(4, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    p = rng.normal(size=(4, 3))
    cs = [Contact(pi, ni) for pi, ni in zip(p, n)]
    G = grasp_matrix(cs, center=np.zeros(3), length_scale=1.0)
    assert G.shape == (6, 12)
    shift = np.array([0.3, -0.2, 0.5])
    moved = grasp_matrix([Contact(pi + shift, ni) for pi, ni in zip(p, n)], center=np.zeros(3), length_scale=1.0)
    assert np.allclose(moved[:3], G[:3])
    for i in range(4):
        R = contact_frame(n[i])
        assert np.allclose(moved[3:, 3 * i:3 * i + 3] - G[3:, 3 * i:3 * i + 3], skew(shift) @ R)


def test_force_closure_examples():
    assert force_closure(sphere_contacts()) and force_closure_oracle(sphere_contacts())
    single = [Contact([1, 0, 0], [-1, 0, 0])]
    assert not force_closure(single) and not force_closure_oracle(single)
    same_face = [Contact([0, 0, 0], [0, 0, 1]), Contact([0.1, 0, 0], [0, 0, 1])]
    assert not force_closure(same_face) and not force_closure_oracle(same_face)


def test_oracle_coplanar_wrenches_are_not_closure():
    # frictionless contacts only push along their normals: no closure
    cs = [Contact([1, 0, 0], [-1, 0, 0], 0.0), Contact([-1, 0, 0], [1, 0, 0], 0.0)]
    assert not force_closure_oracle(cs)
    assert hull_margin(cs) <= 0.0


def test_oracle_edge_count_self_consistency():
    rng = np.random.default_rng(2)
    agree = total = 0
    for _ in range(60):
        p = rng.normal(size=(4, 3))
        n = -p / np.linalg.norm(p, axis=1, keepdims=True) + 0.4 * rng.normal(size=(4, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cs = [Contact(pi, ni) for pi, ni in zip(p, n)]
        m8 = hull_margin(cs, edge_count=8)
        if abs(m8) < 0.02:
            continue
        total += 1
        agree += (m8 > 0) == force_closure_oracle(cs, edge_count=32)
    assert total > 20 and agree == total


def test_target_grasp_ratio_examples():
    assert target_grasp_ratio([], np.zeros((1, 3))) == (0.0, True)
    pts = np.random.default_rng(3).normal(size=(5, 3))
    assert target_grasp_ratio([pose(t=p) for p in pts], pts) == (100.0, False)
    pct, _ = target_grasp_ratio([pose(t=(0.07, 0, 0)), pose(t=(0.05, 0, 0))], np.zeros((1, 3)))
    assert pct == 50.0


def test_pair_dual_arm(long_box):
    same = pair_dual_arm([pose(), pose()], long_box, GRIPPER)
    assert same == []
    R = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)  # closing axis along world y
    ends = [pose(R, (-0.15, 0, 0)), pose(R, (0.15, 0, 0)), pose(R, (0.0, 0, 0))]
    pairs = pair_dual_arm(ends, long_box, GRIPPER)
    keys = [(p.first, p.second) for p in pairs]
    assert len(keys) == len(set(keys)) and all(i < j for i, j in keys)
    far = [p for p in pairs if (p.first, p.second) == (0, 1)]
    assert len(far) == 1 and len(far[0].contacts) == 4 and far[0].force_closure
    assert force_closure_oracle(far[0].contacts)


def test_fc_percentage_examples():
    assert fc_percentage([GraspEvaluation(True)] * 3) == 0.0
    assert fc_percentage([GraspPair(0, 1, [], True)] * 2) == 100.0
    mixed = [GraspEvaluation(True), GraspEvaluation(False, [], True), {"force_closure": True}, {}]
    assert fc_percentage(mixed) == 50.0


def test_chamfer_examples():
    a = np.random.default_rng(4).normal(size=(100, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer(a, a[::-1]) == 0.0
    assert chamfer(np.zeros((1, 3)), np.array([[0.01, 0, 0]])) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 500), st.integers(1, 500))
def test_chamfer_matches_brute_force_and_is_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(a, b) == chamfer_brute(a, b)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)
