import json

import numpy as np
import pytest

from graspfield.dataset import (
    InsufficientGrasps,
    OracleField,
    ShapeSpec,
    antipodal_grasps,
    build_dataset,
    default_shapes,
    load_dataset,
    make_shape,
    oracle_energy,
    oracle_energy_batch,
    oracle_gradient,
    oracle_gradient_batch,
)
from graspfield.grasp_eval import GripperSpec, collision_check, force_closure
from graspfield.se3 import Pose, se3_exp

GRIPPER = GripperSpec()


def test_unit_box_mesh():
    mesh = make_shape(ShapeSpec("box", {"size": [1, 1, 1]}))
    assert len(mesh.triangles) == 12 and mesh.watertight
    assert mesh.volume() == pytest.approx(1.0)


def test_cylinder_mesh():
    mesh = make_shape(ShapeSpec("cylinder", {"radius": 0.1, "height": 0.4, "segments": 64}))
    assert mesh.watertight and mesh.euler_characteristic() == 2
    ring = 64 * 0.5 * 0.1**2 * np.sin(2 * np.pi / 64)
    assert mesh.volume() == pytest.approx(ring * 0.4)


@pytest.mark.parametrize("spec", default_shapes() + [
    ShapeSpec("two_box", {"base_width": 0.2, "base_height": 0.05, "top_width": 0.08, "top_height": 0.1, "depth": 0.06}),
    ShapeSpec("sphere", {"radius": 0.05, "subdivisions": 2}),
])
def test_shapes_are_valid_solids(spec):
    mesh = make_shape(spec)
    assert mesh.watertight and mesh.euler_characteristic() == 2 and mesh.volume() > 0
    lo, hi = mesh.bounds
    assert np.allclose(lo + hi, 0, atol=1e-12)


def test_l_bracket_volume_is_union_of_legs():
    a, b, t, d = 0.3, 0.24, 0.05, 0.05
    mesh = make_shape(ShapeSpec("l_bracket", {"length_a": a, "length_b": b, "thickness": t, "depth": d}))
    assert mesh.volume() == pytest.approx((a * t + (b - t) * t) * d)


def test_shape_pose_applied():
    H = np.eye(4)
    H[:3, 3] = [1, 2, 3]
    mesh = make_shape(ShapeSpec("box", {"size": [0.1, 0.1, 0.1]}, pose=tuple(H.reshape(-1))))
    assert np.allclose(mesh.vertices.mean(axis=0), [1, 2, 3])


@pytest.mark.parametrize("bad, field", [
    ({"kind": "torus", "dims": {}}, "kind"),
    ({"kind": "box", "dims": {}}, "dims.size"),
    ({"kind": "box", "dims": {"size": [0.1, -1, 0.1]}}, "dims.size"),
    ({"kind": "cylinder", "dims": {"radius": 0.1, "height": 0.2, "segments": 2}}, "dims.segments"),
    ({"kind": "box", "dims": {"size": [1, 1, 1]}, "colour": "red"}, "colour"),
    ({"kind": "box", "dims": {"size": [1, 1, 1]}, "pose": [1, 0, 0]}, "pose"),
])
def test_shape_spec_errors_name_the_field(bad, field):
    with pytest.raises(ValueError, match=field):
        ShapeSpec.from_dict(bad)


def test_shape_spec_round_trip():
    for spec in default_shapes():
        assert ShapeSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_box_grasps_use_opposing_faces():
    mesh = make_shape(ShapeSpec("box", {"size": [0.06, 0.05, 0.04]}))
    labels = antipodal_grasps(mesh, GRIPPER, 30, 0.3, np.random.default_rng(0))
    assert len(labels) == 30 and not labels.insufficient
    for lab in labels:
        n0, n1 = lab.contacts[0].normal, lab.contacts[1].normal
        assert np.dot(n0, n1) == pytest.approx(-1.0)
        assert abs(np.abs(n0).max() - 1.0) < 1e-9  # an axis-aligned face
        assert lab.width <= GRIPPER.max_opening
        assert force_closure(list(lab.contacts)) and not collision_check(mesh, GRIPPER, lab.pose)


def test_sphere_diameters_are_accepted():
    mesh = make_shape(ShapeSpec("sphere", {"radius": 0.03, "subdivisions": 3}))
    labels = antipodal_grasps(mesh, GRIPPER, 40, 0.3, np.random.default_rng(1), max_attempts=48)
    assert len(labels) == 40
    for lab in labels:
        assert lab.width == pytest.approx(0.06, abs=2e-3)
        assert np.linalg.norm(lab.pose.translation) < 3e-3


def test_frictionless_keeps_only_straight_lines():
    mesh = make_shape(ShapeSpec("box", {"size": [0.06, 0.05, 0.04]}))
    labels = antipodal_grasps(mesh, GRIPPER, 10, 0.0, np.random.default_rng(2))
    for lab in labels:
        axis = lab.pose.rotation[:, 0]
        for c in lab.contacts:
            assert abs(abs(np.dot(c.normal, axis)) - 1.0) < 1e-9


def test_corner_to_corner_line_rejected_without_friction():
    from graspfield.grasp_eval import Contact, force_closure_oracle

    # a diagonal closing line meets both faces at 45 degrees: outside a zero-width cone
    cs = [Contact([0.03, 0.03, 0], [-1, 0, 0], 0.0), Contact([-0.03, -0.03, 0], [1, 0, 0], 0.0)]
    assert not force_closure_oracle(cs)


def test_insufficient_grasps():
    mesh = make_shape(ShapeSpec("box", {"size": [0.3, 0.3, 0.3]}))  # wider than the jaw
    labels = antipodal_grasps(mesh, GRIPPER, 5, 0.3, np.random.default_rng(3), max_attempts=50)
    assert labels.insufficient and len(labels) == 0
    with pytest.raises(InsufficientGrasps):
        antipodal_grasps(mesh, GRIPPER, 5, 0.3, np.random.default_rng(3), max_attempts=50, strict=True)


@pytest.fixture(scope="module")
def labels():
    # well separated relative to the softmin temperature
    rng = np.random.default_rng(4)
    xi = np.hstack([rng.normal(scale=1.0, size=(8, 3)), rng.normal(scale=0.8, size=(8, 3))])
    return se3_exp(xi)


def test_oracle_at_label(labels):
    assert abs(oracle_energy(labels[3], labels)) <= 0.05 * np.log(len(labels)) + 1e-12
    assert np.abs(oracle_gradient(labels[3], labels).as_vector()).max() < 1e-6


def test_oracle_gradient_matches_finite_differences(labels):
    rng = np.random.default_rng(5)
    H = se3_exp(np.hstack([rng.normal(scale=1.0, size=(10, 3)), rng.normal(scale=0.8, size=(10, 3))]))
    g = oracle_gradient_batch(H, labels)
    h = 1e-6
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        num = (oracle_energy_batch(se3_exp(d) @ H, labels) - oracle_energy_batch(se3_exp(-d) @ H, labels)) / (2 * h)
        assert np.abs(num - g[:, i]).max() < 1e-6


def test_oracle_field_scaling(labels):
    fld = OracleField(labels, length_scale=0.1)
    H = labels[:2] @ se3_exp(np.full(6, 0.05))
    e, g = fld.energy_and_gradient(None, H, 0.1)
    assert np.allclose(e, oracle_energy_batch(H, labels) / 0.02)
    assert np.allclose(g, oracle_gradient_batch(H, labels) / 0.02)
    assert np.allclose(fld.energy(None, H, 0.1), e)


def test_label_rotations_avoid_half_turn():
    mesh = make_shape(default_shapes()[0])
    labels = antipodal_grasps(mesh, GRIPPER, 60, 0.3, np.random.default_rng(6))
    traces = np.array([np.trace(lab.pose.rotation) for lab in labels])
    assert traces.min() > -1.0 + 1e-4


def test_build_dataset_deterministic(tmp_path):
    specs = default_shapes()
    m1 = build_dataset(specs, tmp_path / "a", n_grasps=20, seed=7)
    m2 = build_dataset(specs, tmp_path / "b", n_grasps=20, seed=7)
    assert m1["hash"] == m2["hash"]
    for e in m1["shapes"]:
        assert (tmp_path / "a" / e["grasps"]).read_bytes() == (tmp_path / "b" / e["grasps"]).read_bytes()
    m3 = build_dataset(specs, tmp_path / "c", n_grasps=20, seed=8)
    assert m3["hash"] != m1["hash"]
    manifest, objs = load_dataset(tmp_path / "a")
    assert manifest == json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [len(o.labels) for o in objs] == [20, 20, 20]
    assert isinstance(objs[0].labels[0].pose, Pose)


def test_duplicate_names_rejected(tmp_path):
    spec = default_shapes()[0]
    with pytest.raises(ValueError, match="name"):
        build_dataset([spec, spec], tmp_path, n_grasps=2)
