"""Meshes, point clouds and the queries the rest of the package needs."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .bvh import BVH, closest_brute, count_hits_brute, ray_brute

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-14
# Parity rays for the inside test; generic directions avoid edge grazing.
_PARITY_DIRS = np.array(
    [
        [0.5773502691896258, 0.5773502691896257, 0.5773502691896258],
        [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
        [0.7071067811865475, -0.5656854249492381, 0.4242640687119285],
    ]
)
_PARITY_DIRS /= np.linalg.norm(_PARITY_DIRS, axis=1, keepdims=True)


class ParseError(ValueError):
    pass


class DegenerateMesh(ValueError):
    pass


class DegenerateCloud(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    dropped_faces: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ParseError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ParseError("non-finite vertex coordinates")
        area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
        keep = area > DEGENERATE_AREA
        dropped = int(self.dropped_faces) + int((~keep).sum())
        if dropped > self.dropped_faces:
            logger.warning("dropped %d zero-area faces", dropped - self.dropped_faces)
        f = f[keep]
        if len(f) == 0:
            raise DegenerateMesh("no non-degenerate faces")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "dropped_faces", dropped)

    @property
    def had_degenerate(self) -> bool:
        return self.dropped_faces > 0

    @cached_property
    def tris(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def face_normals(self) -> np.ndarray:
        t = self.tris
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def face_areas(self) -> np.ndarray:
        t = self.tris
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    @cached_property
    def watertight(self) -> bool:
        """Every directed edge appears once and its reverse appears once."""
        f = self.triangles
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        directed, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        fwd = set(map(tuple, directed))
        return all((b, a) in fwd for a, b in fwd)

    @cached_property
    def bvh(self) -> BVH:
        return BVH(self.tris)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def volume(self) -> float:
        t = self.tris
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def euler_characteristic(self) -> int:
        f = self.triangles
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        n_e = len(np.unique(e, axis=0))
        n_v = len(np.unique(f))
        return n_v - n_e + len(f)

    def transformed(self, H: np.ndarray) -> "Mesh":
        return Mesh(self.vertices @ H[:3, :3].T + H[:3, 3], self.triangles)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(p) < 1:
            raise DegenerateCloud("empty point cloud")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=np.float64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class TargetRegion:
    indices: np.ndarray
    points: np.ndarray

    def to_json(self) -> str:
        return json.dumps([int(i) for i in self.indices])


@dataclass(frozen=True)
class RayHit:
    position: np.ndarray
    normal: np.ndarray
    distance: float
    face: int


# ---------------------------------------------------------------- loading


def _parse_obj(text: str) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise ValueError("face needs at least 3 vertices")
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
            elif tok[0] in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l", "vp"):
                continue
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    if not verts or not faces:
        raise ParseError("OBJ has no vertices or faces")
    return np.asarray(verts), np.asarray(faces)


def _parse_ply(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        ply = PlyData.read(str(path))
        vert = ply["vertex"]
        v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
        faces = []
        for poly in ply["face"].data[ply["face"].properties[0].name]:
            poly = [int(i) for i in poly]
            for j in range(1, len(poly) - 1):
                faces.append([poly[0], poly[j], poly[j + 1]])
    except ParseError:
        raise
    except Exception as exc:  # plyfile raises a zoo of types on bad input
        raise ParseError(f"{path}: {exc}") from exc
    if not faces:
        raise ParseError(f"{path}: PLY has no faces")
    return v, np.asarray(faces)


def load_mesh(path) -> Mesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = _parse_obj(path.read_text())
    elif suffix == ".ply":
        v, f = _parse_ply(path)
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")
    return Mesh(v, f)


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def save_mesh_ply(mesh: Mesh, path) -> None:
    v = np.array([tuple(p) for p in mesh.vertices], dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    f = np.array([(list(t),) for t in mesh.triangles.tolist()], dtype=[("vertex_indices", "i4", (3,))])
    PlyData([PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")], text=True).write(str(path))


def save_cloud_ply(points: np.ndarray, path, region_id: np.ndarray | None = None, normals=None) -> None:
    """ASCII PLY; ``region_id`` becomes an integer per-vertex property (-1 = none)."""
    points = np.asarray(points, dtype=np.float64)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if region_id is not None:
        fields.append(("region_id", "i4"))
    data = np.empty(len(points), dtype=fields)
    data["x"], data["y"], data["z"] = points.T
    if normals is not None:
        data["nx"], data["ny"], data["nz"] = np.asarray(normals).T
    if region_id is not None:
        data["region_id"] = np.asarray(region_id, dtype=np.int32)
    PlyData([PlyElement.describe(data, "vertex")], text=True).write(str(path))


def load_cloud(path) -> tuple[PointCloud, np.ndarray | None]:
    """Point cloud from PLY (optional ``region_id``), or from ``.npy``/``.xyz``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        try:
            vert = PlyData.read(str(path))["vertex"]
        except Exception as exc:
            raise ParseError(f"{path}: {exc}") from exc
        pts = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
        names = {p.name for p in vert.properties}
        normals = None
        if {"nx", "ny", "nz"} <= names:
            normals = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
        region = np.asarray(vert["region_id"], dtype=np.int64) if "region_id" in names else None
        return PointCloud(pts, normals), region
    if suffix == ".npy":
        return PointCloud(np.load(path)), None
    if suffix in (".xyz", ".txt"):
        return PointCloud(np.loadtxt(path).reshape(-1, 3)), None
    raise ParseError(f"unsupported cloud format {suffix!r}")


# ---------------------------------------------------------------- queries


def sample_surface_faces(mesh: Mesh, n: int, rng: np.random.Generator) -> tuple[PointCloud, np.ndarray]:
    """Area-weighted surface samples plus the face each one came from."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = mesh.face_areas / mesh.face_areas.sum()
    face = rng.choice(len(p), size=n, p=p)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    t = mesh.tris[face]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return PointCloud(pts, mesh.face_normals[face]), face


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> PointCloud:
    return sample_surface_faces(mesh, n, rng)[0]


def inside(mesh: Mesh, x: np.ndarray) -> np.ndarray:
    """Majority vote over three parity rays."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    votes = np.zeros(len(x), dtype=np.int64)
    for d in _PARITY_DIRS:
        dirs = np.broadcast_to(d, x.shape)
        votes += mesh.bvh.count_hits(x, dirs) % 2
    return votes >= 2


def sdf_query(mesh: Mesh, x) -> np.ndarray | float:
    """Signed distance (negative inside). Unsigned with a warning on open meshes."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    d2, _ = mesh.bvh.closest(pts)
    d = np.sqrt(d2)
    if mesh.watertight:
        d = np.where(inside(mesh, pts), -d, d)
    else:
        logger.warning("mesh is not watertight; returning unsigned distance")
    return float(d[0]) if scalar else d


def sdf_query_brute(mesh: Mesh, x) -> np.ndarray:
    pts = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    d2, _ = closest_brute(pts, mesh.tris)
    votes = np.zeros(len(pts), dtype=np.int64)
    for d in _PARITY_DIRS:
        votes += count_hits_brute(pts, np.ascontiguousarray(np.broadcast_to(d, pts.shape)), mesh.tris) % 2
    d = np.sqrt(d2)
    return np.where(votes >= 2, -d, d) if mesh.watertight else d


def _hits(mesh: Mesh, origins, dirs, t, face) -> list[RayHit | None]:
    out: list[RayHit | None] = []
    for o, d, ti, fi in zip(origins, dirs, t, face):
        if fi < 0 or not np.isfinite(ti):
            out.append(None)
            continue
        out.append(RayHit(o + ti * d, mesh.face_normals[fi].copy(), float(ti), int(fi)))
    return out


def raycast_batch(mesh: Mesh, origins, dirs, tmax=None) -> tuple[np.ndarray, np.ndarray]:
    """Raw batched raycast: hit distances (inf on miss) and face indices (-1)."""
    t, face = mesh.bvh.raycast(origins, dirs, tmax)
    t = np.where(face < 0, np.inf, t)
    return t, face


def raycast(mesh: Mesh, origin, direction, tmax: float | None = None) -> RayHit | None:
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    t, face = raycast_batch(mesh, o, d, tmax)
    return _hits(mesh, o, d, t, face)[0]


def raycast_brute(mesh: Mesh, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    t, face = ray_brute(o, d, np.full(len(o), np.inf), mesh.tris)
    return np.where(face < 0, np.inf, t), face


def farthest_point_sample(cloud: PointCloud | np.ndarray, m: int, seed_index: int = 0) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not 1 <= m <= len(pts):
        raise ValueError("need 1 <= m <= N")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    dist = np.linalg.norm(pts - pts[seed_index], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def knn_region(cloud: PointCloud | np.ndarray, query_index: int, k: int) -> TargetRegion:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not 1 <= k <= len(pts):
        raise ValueError("need 1 <= k <= N")
    d = np.linalg.norm(pts - pts[query_index], axis=1)
    idx = np.argsort(d, kind="stable")[:k]
    return TargetRegion(idx, pts[idx])


def auto_regions(cloud: PointCloud, n_regions: int = 2, k: int = 100, seed_index: int = 0) -> list[TargetRegion]:
    """Farthest-point query points, then a kNN patch around each."""
    queries = farthest_point_sample(cloud, n_regions + 1, seed_index)[1:] if n_regions else []
    return [knn_region(cloud, int(q), k) for q in queries]


@dataclass(frozen=True)
class NormalizeTransform:
    """world -> unit: ``(x - center) * scale``."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) * self.scale

    def to_world(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) / self.scale + self.center

    def pose_to_unit(self, H: np.ndarray) -> np.ndarray:
        H = np.array(H, dtype=np.float64)
        H[..., :3, 3] = self.to_unit(H[..., :3, 3])
        return H

    def pose_to_world(self, H: np.ndarray) -> np.ndarray:
        H = np.array(H, dtype=np.float64)
        H[..., :3, 3] = self.to_world(H[..., :3, 3])
        return H

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizeTransform":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]))


MARGIN = 1.05


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Center on the bounding box and scale its longest side to 1/1.05."""
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateCloud("cloud has zero extent")
    tf = NormalizeTransform(0.5 * (lo + hi), 1.0 / (extent * MARGIN))
    return PointCloud(tf.to_unit(cloud.points), cloud.normals), tf
