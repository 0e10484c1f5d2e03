"""Procedural toy shapes, antipodal grasp labels and the analytic oracle energy."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Mesh, load_mesh, raycast_batch, sample_surface_faces, save_obj
from .grasp_eval import Contact, GripperSpec, collision_check, extract_contacts, force_closure
from .se3 import (
    Pose,
    adjoint,
    compose_matrices,
    inverse_matrices,
    se3_left_jacobian_inv,
    se3_log,
)

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("box", "cylinder", "l_bracket", "two_box", "sphere")
_REQUIRED = {
    "box": ("size",),
    "cylinder": ("radius", "height"),
    "l_bracket": ("length_a", "length_b", "thickness", "depth"),
    "two_box": ("base_width", "base_height", "top_width", "top_height", "depth"),
    "sphere": ("radius",),
}


class InsufficientGrasps(RuntimeError):
    def __init__(self, found: int, wanted: int):
        super().__init__(f"found {found} of {wanted} grasps within the attempt budget")
        self.found = found
        self.wanted = wanted


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    dims: dict
    pose: tuple = tuple(np.eye(4).reshape(-1))
    name: str = ""

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"kind: unknown shape kind {self.kind!r}")
        for key in _REQUIRED[self.kind]:
            if key not in self.dims:
                raise ValueError(f"dims.{key}: missing for {self.kind}")
        for key, val in self.dims.items():
            vals = np.atleast_1d(np.asarray(val, dtype=np.float64))
            if key == "segments":
                if vals.size != 1 or vals[0] < 3 or vals[0] != int(vals[0]):
                    raise ValueError("dims.segments: must be an integer >= 3")
            elif not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ValueError(f"dims.{key}: must be positive")
        if self.kind == "box" and np.asarray(self.dims["size"]).shape != (3,):
            raise ValueError("dims.size: need three extents")
        if self.kind == "two_box" and self.dims["top_width"] >= self.dims["base_width"]:
            raise ValueError("dims.top_width: must be smaller than base_width")
        if self.kind == "l_bracket":
            t = self.dims["thickness"]
            if t >= self.dims["length_a"] or t >= self.dims["length_b"]:
                raise ValueError("dims.thickness: must be smaller than both legs")
        H = np.asarray(self.pose, dtype=np.float64)
        if H.size != 16:
            raise ValueError("pose: need 16 numbers (row-major 4x4)")
        Pose.from_matrix(H.reshape(4, 4))
        object.__setattr__(self, "pose", tuple(float(x) for x in H.reshape(-1)))
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    def to_dict(self) -> dict:
        dims = {k: (list(map(float, v)) if np.ndim(v) else v) for k, v in self.dims.items()}
        return {"name": self.name, "kind": self.kind, "dims": dims, "pose": list(self.pose)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        unknown = set(d) - {"name", "kind", "dims", "pose"}
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown shape field")
        if "kind" not in d:
            raise ValueError("kind: missing")
        if not isinstance(d.get("dims"), dict):
            raise ValueError("dims: must be an object")
        pose = d.get("pose", np.eye(4).reshape(-1))
        return cls(d["kind"], dict(d["dims"]), tuple(np.asarray(pose, dtype=np.float64).reshape(-1)), d.get("name", ""))


# ---------------------------------------------------------------- meshes


def _box_mesh(size) -> tuple[np.ndarray, np.ndarray]:
    h = 0.5 * np.asarray(size, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-h[0], h[0]) for y in (-h[1], h[1]) for z in (-h[2], h[2])])
    f = np.array(
        [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    )
    return v, f


def _ear_clip(poly: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple counter-clockwise polygon."""
    idx = list(range(len(poly)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    while len(idx) > 3:
        for k in range(len(idx)):
            i, j, m = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i], poly[j], poly[m]
            if cross(a, b, c) <= 0:
                continue
            if any(
                cross(a, b, poly[q]) >= 0 and cross(b, c, poly[q]) >= 0 and cross(c, a, poly[q]) >= 0
                for q in idx if q not in (i, j, m)
            ):
                continue
            tris.append((i, j, m))
            idx.pop(k)
            break
        else:
            raise ValueError("polygon is not simple")
    tris.append(tuple(idx))
    return tris


def _extrude(poly, depth: float) -> tuple[np.ndarray, np.ndarray]:
    poly = np.asarray(poly, dtype=np.float64)
    n = len(poly)
    lo = np.column_stack([poly, np.full(n, -0.5 * depth)])
    hi = np.column_stack([poly, np.full(n, 0.5 * depth)])
    v = np.vstack([lo, hi])
    faces = []
    for a, b, c in _ear_clip(poly):
        faces.append((n + a, n + b, n + c))
        faces.append((a, c, b))
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j))
        faces.append((i, n + j, n + i))
    return v, np.array(faces)


def _icosphere(radius: float, subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return radius * np.array(v), np.array(f)


def make_shape(spec: ShapeSpec) -> Mesh:
    """Watertight, outward-wound mesh centred on its bounding box, then posed."""
    d = spec.dims
    if spec.kind == "box":
        v, f = _box_mesh(d["size"])
    elif spec.kind == "cylinder":
        seg = int(d.get("segments", 64))
        ang = 2 * np.pi * np.arange(seg) / seg
        v, f = _extrude(d["radius"] * np.column_stack([np.cos(ang), np.sin(ang)]), d["height"])
    elif spec.kind == "l_bracket":
        a, b, t = d["length_a"], d["length_b"], d["thickness"]
        v, f = _extrude([[0, 0], [a, 0], [a, t], [t, t], [t, b], [0, b]], d["depth"])
    elif spec.kind == "two_box":
        bw, bh, tw, th = d["base_width"], d["base_height"], d["top_width"], d["top_height"]
        poly = [[-bw / 2, 0], [bw / 2, 0], [bw / 2, bh], [tw / 2, bh], [tw / 2, bh + th],
                [-tw / 2, bh + th], [-tw / 2, bh], [-bw / 2, bh]]
        v, f = _extrude(poly, d["depth"])
    else:
        v, f = _icosphere(d["radius"], int(d.get("subdivisions", 2)))
    v = v - 0.5 * (v.min(axis=0) + v.max(axis=0))
    H = np.asarray(spec.pose).reshape(4, 4)
    return Mesh(v @ H[:3, :3].T + H[:3, 3], f)


def default_shapes() -> list[ShapeSpec]:
    """The three desk-scale objects used by the acceptance runs."""
    return [
        ShapeSpec("box", {"size": [0.40, 0.06, 0.06]}, name="long_box"),
        ShapeSpec("cylinder", {"radius": 0.03, "height": 0.35, "segments": 64}, name="cylinder"),
        ShapeSpec("l_bracket", {"length_a": 0.30, "length_b": 0.24, "thickness": 0.05, "depth": 0.05},
                  name="l_bracket"),
    ]


# ---------------------------------------------------------------- grasp labels


@dataclass(frozen=True)
class GraspLabel:
    pose: Pose
    contacts: tuple[Contact, Contact]
    width: float

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_list(),
            "contacts": [
                {"position": c.position.tolist(), "normal": c.normal.tolist(), "mu": c.mu} for c in self.contacts
            ],
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspLabel":
        contacts = tuple(Contact(np.asarray(c["position"]), np.asarray(c["normal"]), c["mu"]) for c in d["contacts"])
        return cls(Pose.from_list(d["pose"]), contacts, float(d["width"]))


class GraspLabels(list):
    """List of labels that remembers whether the requested count was reached."""

    insufficient: bool = False


def _perpendicular_basis(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def _canonical_flip(H: np.ndarray) -> np.ndarray:
    """Use the jaw's half-turn symmetry to keep label rotations away from angle pi.

    Rotating the gripper 180 degrees about its approach axis gives the same
    grasp, and one of the two versions always has a well-defined logarithm.
    """
    if np.trace(H[:3, :3]) < -1.0 + 1e-3:
        H = H.copy()
        H[:3, :2] *= -1.0
    return H


def antipodal_grasps(mesh: Mesh, gripper: GripperSpec, n: int, mu: float, rng: np.random.Generator,
                     max_attempts: int | None = None, batch: int = 64, strict: bool = False) -> GraspLabels:
    """Sample contact pairs across the object and keep collision-free force-closure grasps."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    max_attempts = max_attempts or 100 * n
    cos_cone = np.cos(np.arctan(mu))
    max_width = gripper.max_opening - 2e-3
    out = GraspLabels()
    attempts = 0
    while len(out) < n and attempts < max_attempts:
        cloud, _ = sample_surface_faces(mesh, batch, rng)
        p, nrm = cloud.points, cloud.normals
        t, face = raycast_batch(mesh, p - 1e-6 * nrm, -nrm, max_width)
        spins = rng.uniform(0.0, 2 * np.pi, size=batch)
        for i in range(batch):
            if len(out) >= n or attempts >= max_attempts:
                break
            attempts += 1
            if face[i] < 0:
                continue
            q = p[i] - (t[i] + 1e-6) * nrm[i]
            axis = q - p[i]
            width = float(np.linalg.norm(axis))
            if width <= 1e-6:
                continue
            axis /= width
            # inward normals must lie inside each friction cone around the closing line
            if np.dot(-nrm[i], axis) < cos_cone - 1e-12:
                continue
            if np.dot(-mesh.face_normals[face[i]], -axis) < cos_cone - 1e-12:
                continue
            u, w = _perpendicular_basis(axis)
            approach = np.cos(spins[i]) * u + np.sin(spins[i]) * w
            H = np.eye(4)
            H[:3, 0] = axis
            H[:3, 1] = np.cross(approach, axis)
            H[:3, 2] = approach
            H[:3, 3] = 0.5 * (p[i] + q)
            H = _canonical_flip(H)
            pose = Pose.from_matrix(H)
            if collision_check(mesh, gripper, pose):
                continue
            contacts = extract_contacts(mesh, gripper, pose, mu)
            if len(contacts) != 2 or not force_closure(contacts):
                continue
            out.append(GraspLabel(pose, (contacts[0], contacts[1]), width))
    if len(out) < n:
        out.insufficient = True
        logger.warning("antipodal sampling found %d of %d grasps", len(out), n)
        if strict:
            raise InsufficientGrasps(len(out), n)
    return out


# ---------------------------------------------------------------- oracle energy


def _label_matrices(labels) -> np.ndarray:
    mats = []
    for lab in labels:
        if isinstance(lab, GraspLabel):
            lab = lab.pose
        mats.append(lab.matrix() if isinstance(lab, Pose) else np.asarray(lab, dtype=np.float64).reshape(4, 4))
    return np.array(mats)


def _weighted_logs(H: np.ndarray, L: np.ndarray, length_scale: float):
    """Relative twists ``log(H^-1 L)`` for every (pose, label) pair."""
    rel = compose_matrices(inverse_matrices(H)[:, None], L[None])
    v = se3_log(rel, strict=False)
    w = np.array([1.0, 1.0, 1.0, length_scale, length_scale, length_scale])
    return v, w


def _softmin(d2: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    m = d2.min(axis=-1, keepdims=True)
    z = np.exp(-(d2 - m) / tau)
    s = z.sum(axis=-1, keepdims=True)
    return (m - tau * np.log(s))[..., 0], z / s


def oracle_energy_batch(H: np.ndarray, labels: np.ndarray, length_scale: float = 0.1, tau: float = 0.05) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64).reshape(-1, 4, 4)
    v, w = _weighted_logs(H, labels, length_scale)
    d2 = ((v * w) ** 2).sum(axis=-1)
    return _softmin(d2, tau)[0]


def oracle_gradient_batch(H: np.ndarray, labels: np.ndarray, length_scale: float = 0.1, tau: float = 0.05) -> np.ndarray:
    """Left-trivialised gradient of the softmin energy, one twist per pose."""
    H = np.asarray(H, dtype=np.float64).reshape(-1, 4, 4)
    v, w = _weighted_logs(H, labels, length_scale)
    d2 = ((v * w) ** 2).sum(axis=-1)
    _, p = _softmin(d2, tau)
    # d/dt |W log(H^-1 exp(-t xi) ... )|^2 = -2 (W^2 v)^T Jl^-1(v) Ad_{H^-1} xi
    g = np.einsum("nlji,nlj->nli", se3_left_jacobian_inv(v), (w * w) * v)
    Ad = adjoint(inverse_matrices(H))
    g = -2.0 * np.einsum("nji,nlj->nli", Ad, g)
    return (p[..., None] * g).sum(axis=1)


def oracle_energy(H, labels, length_scale: float = 0.1, tau: float = 0.05) -> float:
    Hm = H.matrix() if isinstance(H, Pose) else np.asarray(H)
    return float(oracle_energy_batch(Hm, _label_matrices(labels), length_scale, tau)[0])


def oracle_gradient(H, labels, length_scale: float = 0.1, tau: float = 0.05):
    from .se3 import Twist

    Hm = H.matrix() if isinstance(H, Pose) else np.asarray(H)
    return Twist.from_vector(oracle_gradient_batch(Hm, _label_matrices(labels), length_scale, tau)[0])


@dataclass
class OracleField:
    """Analytic energy field over ground-truth grasp poses in the normalised frame.

    The energy at noise level ``sigma`` is ``softmin(d^2) / (2 sigma^2)``, the
    negative log-density of a Gaussian mixture around the labels, so its
    gradient is the negative score the sampler expects.
    """

    labels: np.ndarray
    length_scale: float = 1.0
    tau: float = 0.05

    def __post_init__(self):
        self.labels = _label_matrices(self.labels)

    def energy(self, ctx, H: np.ndarray, sigma) -> np.ndarray:
        e = oracle_energy_batch(H, self.labels, self.length_scale, self.tau)
        return e / (2.0 * np.asarray(sigma, dtype=np.float64) ** 2)

    def energy_and_gradient(self, ctx, H: np.ndarray, sigma) -> tuple[np.ndarray, np.ndarray]:
        s2 = 2.0 * np.asarray(sigma, dtype=np.float64) ** 2
        e = oracle_energy_batch(H, self.labels, self.length_scale, self.tau) / s2
        g = oracle_gradient_batch(H, self.labels, self.length_scale, self.tau) / np.reshape(s2, (-1, 1))
        return e, g


# ---------------------------------------------------------------- dataset directory


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_dataset(specs: list[ShapeSpec], out_dir, n_grasps: int = 200, seed: int = 0,
                  gripper: GripperSpec | None = None, mu: float = 0.3) -> dict:
    """Write meshes, grasp labels and a manifest; returns the manifest."""
    gripper = gripper or GripperSpec()
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "grasps").mkdir(parents=True, exist_ok=True)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("name: shape names must be unique")
    entries = []
    for spec, ss in zip(specs, np.random.SeedSequence(seed).spawn(len(specs))):
        mesh = make_shape(spec)
        labels = antipodal_grasps(mesh, gripper, n_grasps, mu, np.random.default_rng(ss))
        for lab in labels:
            assert force_closure(list(lab.contacts)) and not collision_check(mesh, gripper, lab.pose)
        mpath = out / "meshes" / f"{spec.name}.obj"
        gpath = out / "grasps" / f"{spec.name}.json"
        save_obj(mesh, mpath)
        gpath.write_text(json.dumps([lab.to_dict() for lab in labels]))
        entries.append({
            "spec": spec.to_dict(),
            "mesh": f"meshes/{spec.name}.obj",
            "grasps": f"grasps/{spec.name}.json",
            "count": len(labels),
            "insufficient": labels.insufficient,
            "mesh_sha256": _sha256(mpath),
            "grasps_sha256": _sha256(gpath),
        })
    manifest = {"seed": seed, "mu": mu, "n_grasps": n_grasps, "gripper": gripper.to_dict(), "shapes": entries}
    manifest["hash"] = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class ToyObject:
    name: str
    mesh: Mesh
    labels: list[GraspLabel]


def load_dataset(root) -> tuple[dict, list[ToyObject]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    objs = []
    for e in manifest["shapes"]:
        mesh = load_mesh(root / e["mesh"])
        labels = [GraspLabel.from_dict(d) for d in json.loads((root / e["grasps"]).read_text())]
        objs.append(ToyObject(e["spec"]["name"], mesh, labels))
    return manifest, objs
