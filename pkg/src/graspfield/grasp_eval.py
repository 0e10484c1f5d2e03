"""Analytic grasp metrics: collisions, ray-cast contacts, force closure, TG, pairing, Chamfer."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np
from numba import njit
from scipy.optimize import nnls
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .bvh import ray_triangle
from .geometry import Mesh, inside, raycast_batch

TG_RADIUS = 0.06


@dataclass(frozen=True)
class GripperSpec:
    """Parallel-jaw gripper in its own frame.

    Closing axis is x, approach is +z. The origin sits midway between the two
    finger-pad centres; pads are centred at ``z = 0`` and fingers extend back
    to the palm.
    """

    finger_length: float = 0.06
    max_opening: float = 0.10
    pad_width: float = 0.02
    pad_height: float = 0.01
    finger_thickness: float = 0.01
    palm_thickness: float = 0.01
    rays_across: int = 5
    rays_along: int = 3

    def __post_init__(self):
        for name in ("finger_length", "max_opening", "pad_width", "pad_height", "finger_thickness", "palm_thickness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def tip_z(self) -> float:
        return 0.5 * self.pad_height

    @property
    def base_z(self) -> float:
        return self.tip_z - self.finger_length

    def boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(lo, hi) corners of the two fingers and the palm."""
        w, t = 0.5 * self.max_opening, self.finger_thickness
        hy = 0.5 * self.pad_width
        fingers = [
            (np.array([w, -hy, self.base_z]), np.array([w + t, hy, self.tip_z])),
            (np.array([-w - t, -hy, self.base_z]), np.array([-w, hy, self.tip_z])),
        ]
        palm = (np.array([-w - t, -hy, self.base_z - self.palm_thickness]), np.array([w + t, hy, self.base_z]))
        return fingers + [palm]

    @cached_property
    def collision_tris(self) -> np.ndarray:
        return np.concatenate([_box_tris(lo, hi) for lo, hi in self.boxes()])

    @cached_property
    def corners(self) -> np.ndarray:
        return np.concatenate([_box_corners(lo, hi) for lo, hi in self.boxes()])

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.corners, axis=1).max())

    @property
    def grasp_center(self) -> np.ndarray:
        """Midpoint of the two fingertip pad centres."""
        return np.zeros(3)

    def pad_rays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ray origins, directions and finger id for the inward pad grid."""
        w = 0.5 * self.max_opening
        ys = np.linspace(-0.5 * self.pad_width, 0.5 * self.pad_width, self.rays_across)
        zs = np.linspace(-0.5 * self.pad_height, 0.5 * self.pad_height, self.rays_along)
        yy, zz = np.meshgrid(ys, zs, indexing="ij")
        grid = np.stack([yy.ravel(), zz.ravel()], axis=1)
        o, d, fid = [], [], []
        for finger, sign in enumerate((1.0, -1.0)):
            o.append(np.column_stack([np.full(len(grid), sign * w), grid]))
            d.append(np.tile([-sign, 0.0, 0.0], (len(grid), 1)))
            fid.append(np.full(len(grid), finger))
        return np.concatenate(o), np.concatenate(d), np.concatenate(fid)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _box_corners(lo, hi) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


_BOX_FACES = np.array(
    [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
     [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
)


def _box_tris(lo, hi) -> np.ndarray:
    return _box_corners(lo, hi)[_BOX_FACES]


@dataclass(frozen=True)
class Contact:
    position: np.ndarray
    normal: np.ndarray
    mu: float = 0.3

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("contact normal must be unit length")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "normal", n)


def _pose_matrix(item) -> np.ndarray:
    if hasattr(item, "pose"):
        item = item.pose
    if hasattr(item, "matrix"):
        return item.matrix()
    return np.asarray(item, dtype=np.float64).reshape(4, 4)


# ---------------------------------------------------------------- collision


@njit(cache=True)
def _tri_tri(a, b):
    """Edge-versus-triangle crossing test in both directions."""
    for tri, other in ((a, b), (b, a)):
        for i in range(3):
            p = tri[i]
            q = tri[(i + 1) % 3]
            d = q - p
            t = ray_triangle(p, d, other[0], other[1], other[2])
            if t <= 1.0:
                return True
    return False


@njit(cache=True)
def _any_tri_pair(A, B):
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            if _tri_tri(A[i], B[j]):
                return True
    return False


def _points_in_boxes(points: np.ndarray, boxes) -> bool:
    for lo, hi in boxes:
        if np.any(np.all((points >= lo) & (points <= hi), axis=1)):
            return True
    return False


def _posed_gripper_tris(gripper: GripperSpec, H: np.ndarray) -> np.ndarray:
    return gripper.collision_tris @ H[:3, :3].T + H[:3, 3]


def collision_check(mesh: Mesh, gripper: GripperSpec, H) -> bool:
    """True iff the posed gripper touches or penetrates the object."""
    H = _pose_matrix(H)
    gt = _posed_gripper_tris(gripper, H)
    cand = mesh.bvh.candidates(gt.reshape(-1, 3).min(axis=0), gt.reshape(-1, 3).max(axis=0))
    if len(cand) and _any_tri_pair(np.ascontiguousarray(gt), np.ascontiguousarray(mesh.tris[np.sort(cand)])):
        return True
    return _contained(mesh, gripper, H)


def collision_check_brute(mesh: Mesh, gripper: GripperSpec, H) -> bool:
    H = _pose_matrix(H)
    gt = _posed_gripper_tris(gripper, H)
    if _any_tri_pair(np.ascontiguousarray(gt), np.ascontiguousarray(mesh.tris)):
        return True
    return _contained(mesh, gripper, H)


def _contained(mesh: Mesh, gripper: GripperSpec, H: np.ndarray) -> bool:
    # no surface crossing: either the gripper is inside the object or vice versa
    corners = gripper.corners @ H[:3, :3].T + H[:3, 3]
    if mesh.watertight and np.any(inside(mesh, corners)):
        return True
    local = (mesh.vertices - H[:3, 3]) @ H[:3, :3]
    return _points_in_boxes(local, gripper.boxes())


def grippers_intersect(gripper: GripperSpec, A, B) -> bool:
    A, B = _pose_matrix(A), _pose_matrix(B)
    ta, tb = _posed_gripper_tris(gripper, A), _posed_gripper_tris(gripper, B)
    if _any_tri_pair(np.ascontiguousarray(ta), np.ascontiguousarray(tb)):
        return True
    ca = (gripper.corners @ A[:3, :3].T + A[:3, 3] - B[:3, 3]) @ B[:3, :3]
    cb = (gripper.corners @ B[:3, :3].T + B[:3, 3] - A[:3, 3]) @ A[:3, :3]
    return _points_in_boxes(ca, gripper.boxes()) or _points_in_boxes(cb, gripper.boxes())


# ---------------------------------------------------------------- contacts


def extract_contacts(mesh: Mesh, gripper: GripperSpec, H, mu: float = 0.3) -> list[Contact]:
    """Nearest inward pad-ray hit per finger (0, 1 or 2 contacts)."""
    H = _pose_matrix(H)
    o, d, fid = gripper.pad_rays()
    ow = o @ H[:3, :3].T + H[:3, 3]
    dw = d @ H[:3, :3].T
    t, face = raycast_batch(mesh, ow, dw, gripper.max_opening)
    out = []
    for finger in (0, 1):
        sel = np.flatnonzero((fid == finger) & (face >= 0))
        if len(sel) == 0:
            continue
        j = sel[np.argmin(t[sel])]
        n = mesh.face_normals[face[j]]
        n_in = n if np.dot(n, dw[j]) > 0 else -n
        out.append(Contact(ow[j] + t[j] * dw[j], n_in, mu))
    return out


# ---------------------------------------------------------------- force closure


def contact_frame(normal: np.ndarray) -> np.ndarray:
    """Rotation whose z column is ``normal``."""
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.column_stack([t1, t2, n])


def _reference(contacts, center, length_scale):
    P = np.array([c.position for c in contacts])
    c = P.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    if length_scale is None:
        r = float(np.linalg.norm(P - c, axis=1).max())
        length_scale = r if r > 0 else 1.0
    return P, c, float(length_scale)


def grasp_matrix(contacts: list[Contact], center=None, length_scale: float | None = None) -> np.ndarray:
    """6 x 3c map from contact-frame forces to the object wrench.

    Block i is ``[I; skew(p_i - center) / L] R_i``. ``center`` defaults to the
    contact centroid and ``L`` to the largest contact radius, which makes the
    eigenvalue test scale invariant; pass ``length_scale=1`` for raw units.
    """
    from .se3 import skew

    P, c, L = _reference(contacts, center, length_scale)
    blocks = []
    for p, ct in zip(P, contacts):
        R = contact_frame(ct.normal)
        blocks.append(np.vstack([R, skew((p - c) / L) @ R]))
    return np.hstack(blocks)


def _two_contact_basis(contacts, L, c) -> np.ndarray | None:
    """Orthonormal basis of wrench space minus torque about the contact line.

    Two pads cannot produce that torque as point contacts; pad friction over
    the finite pad area resists it, so it is excluded from the test.
    """
    if len(contacts) != 2:
        return None
    a = contacts[1].position - contacts[0].position
    if np.linalg.norm(a) == 0:
        return None
    u = np.concatenate([np.zeros(3), a / np.linalg.norm(a)])
    Q, _ = np.linalg.qr(np.column_stack([u, np.eye(6)]))
    return Q[:, 1:6]


def fc_eigen_margin(contacts: list[Contact]) -> tuple[float, float]:
    """(min eigenvalue of G G^T on the tested subspace, |G c|)."""
    G = grasp_matrix(contacts)
    M = G @ G.T
    _, c, L = _reference(contacts, None, None)
    B = _two_contact_basis(contacts, L, c)
    if B is not None:
        M = B.T @ M @ B
    lam = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    cone_axes = np.tile([0.0, 0.0, 1.0], len(contacts))
    return lam, float(np.linalg.norm(G @ cone_axes))


def force_closure(contacts: list[Contact], eps: float = 0.01, delta_prime: float = 0.5) -> bool:
    """``G G^T >= eps I`` and ``|G c| < delta_prime``, c the stacked cone axes."""
    if len(contacts) < 2:
        return False
    lam, gc = fc_eigen_margin(contacts)
    return lam >= eps and gc < delta_prime


def contact_wrenches(contacts: list[Contact], edge_count: int = 8) -> np.ndarray:
    """Discretised friction-cone edge wrenches, in the grasp-matrix units."""
    P, c, L = _reference(contacts, None, None)
    ang = 2 * np.pi * np.arange(edge_count) / edge_count
    out = []
    for p, ct in zip(P, contacts):
        R = contact_frame(ct.normal)
        local = np.column_stack([ct.mu * np.cos(ang), ct.mu * np.sin(ang), np.ones(edge_count)])
        f = local @ R.T
        out.append(np.hstack([f, np.cross((p - c) / L, f)]))
    return np.vstack(out)


def hull_margin(contacts: list[Contact], mu: float | None = None, edge_count: int = 8) -> float:
    """Signed distance of the origin to the wrench hull boundary (positive inside)."""
    if len(contacts) < 2:
        return -np.inf
    if mu is not None:
        contacts = [Contact(c.position, c.normal, mu) for c in contacts]
    W = contact_wrenches(contacts, edge_count)
    _, c, L = _reference(contacts, None, None)
    B = _two_contact_basis(contacts, L, c)
    if B is not None:
        W = W @ B
    dim = W.shape[1]
    try:
        hull = ConvexHull(W)
    except QhullError:
        return 0.0
    normals = hull.equations[:, :dim]
    offsets = hull.equations[:, dim]
    inside_dist = -offsets / np.linalg.norm(normals, axis=1)
    if np.all(inside_dist > 0):
        return float(inside_dist.min())
    # outside or on the boundary: distance to the hull by a penalised NNLS
    big = 1e4
    A = np.vstack([W.T, big * np.ones(len(W))])
    b = np.concatenate([np.zeros(dim), [big]])
    lam, _ = nnls(A, b, maxiter=50 * len(W))
    return -float(np.linalg.norm(W.T @ lam))


def force_closure_oracle(contacts: list[Contact], mu: float | None = None, edge_count: int = 8) -> bool:
    """Origin strictly inside the convex hull of the friction-cone wrenches."""
    return hull_margin(contacts, mu, edge_count) > 0.0


# ---------------------------------------------------------------- metrics


@dataclass
class GraspEvaluation:
    collides: bool
    contacts: list[Contact] = field(default_factory=list)
    force_closure: bool = False


def evaluate_grasp(mesh: Mesh, gripper: GripperSpec, H, mu: float = 0.3,
                   eps: float = 0.01, delta_prime: float = 0.5) -> GraspEvaluation:
    H = _pose_matrix(H)
    if collision_check(mesh, gripper, H):
        return GraspEvaluation(True, [], False)
    contacts = extract_contacts(mesh, gripper, H, mu)
    return GraspEvaluation(False, contacts, force_closure(contacts, eps, delta_prime))


def grasp_centers(items, gripper: GripperSpec) -> np.ndarray:
    Hs = np.array([_pose_matrix(it) for it in items]).reshape(-1, 4, 4)
    return Hs[:, :3, :3] @ gripper.grasp_center + Hs[:, :3, 3]


def target_grasp_ratio(items, region_points, gripper: GripperSpec | None = None,
                       radius: float = TG_RADIUS) -> tuple[float, bool]:
    """Percentage of grasps whose centre lies within ``radius`` of the region.

    Returns ``(percentage, empty_flag)``; an empty input gives ``(0.0, True)``.
    """
    items = list(items)
    if not items:
        return 0.0, True
    gripper = gripper or GripperSpec()
    centers = grasp_centers(items, gripper)
    d, _ = cKDTree(np.asarray(region_points, dtype=np.float64)).query(centers)
    return 100.0 * float(np.count_nonzero(d <= radius)) / len(items), False


@dataclass
class GraspPair:
    first: int
    second: int
    contacts: list[Contact]
    force_closure: bool


def pair_dual_arm(items, mesh: Mesh, gripper: GripperSpec, min_separation: float | None = None,
                  mu: float = 0.3, eps: float = 0.01, delta_prime: float = 0.5) -> list[GraspPair]:
    """Unordered, non-interfering grasp pairs with joint four-contact force closure."""
    items = list(items)
    if min_separation is None:
        min_separation = 1.2 * 2.0 * gripper.bounding_radius
    Hs = [_pose_matrix(it) for it in items]
    centers = grasp_centers(Hs, gripper)
    evals = [evaluate_grasp(mesh, gripper, H, mu, eps, delta_prime) for H in Hs]
    pairs = []
    for i, j in combinations(range(len(items)), 2):
        if np.linalg.norm(centers[i] - centers[j]) < min_separation:
            continue
        if grippers_intersect(gripper, Hs[i], Hs[j]):
            continue
        ei, ej = evals[i], evals[j]
        contacts = ei.contacts + ej.contacts
        ok = (not ei.collides and not ej.collides and len(ei.contacts) == 2 and len(ej.contacts) == 2
              and force_closure(contacts, eps, delta_prime))
        pairs.append(GraspPair(i, j, contacts, ok))
    return pairs


def fc_percentage(items) -> float:
    """Share of items flagged force-closure; colliding items count in the denominator."""
    items = list(items)
    if not items:
        return 0.0
    flags = []
    for it in items:
        if isinstance(it, (GraspPair, GraspEvaluation)):
            flags.append(bool(it.force_closure))
        elif isinstance(it, dict):
            flags.append(bool(it.get("force_closure", False)))
        else:
            flags.append(bool(getattr(it, "flags", {}).get("force_closure", False)))
    return 100.0 * sum(flags) / len(flags)


def _nn_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(b).query(a)
    diff = a - b[idx]
    return (diff * diff).sum(axis=1)


def chamfer(a, b, scaled: bool = True) -> float:
    """Symmetric mean of squared nearest-neighbour distances, x1e4 when ``scaled``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cd = 0.5 * (_nn_sq(a, b).mean() + _nn_sq(b, a).mean())
    return float(cd * 1e4) if scaled else float(cd)


def chamfer_brute(a, b, scaled: bool = True) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    ia = d2.argmin(axis=1)
    ib = d2.argmin(axis=0)
    da = a - b[ia]
    db = b - a[ib]
    cd = 0.5 * ((da * da).sum(axis=1).mean() + (db * db).sum(axis=1).mean())
    return float(cd * 1e4) if scaled else float(cd)
