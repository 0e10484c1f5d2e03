"""SE(3) / so(3) arithmetic on numpy arrays.

Twists are ordered ``(rho, phi)``: translational part first, rotational part
(axis-angle, radians) second. All array functions broadcast over leading
dimensions, so a batch of poses is simply a ``(..., 4, 4)`` array.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6
ORTHO_TOL = 1e-9
NEAR_PI = 1e-6


class AngleNearPi(ValueError):
    """The rotation angle is within ``NEAR_PI`` of pi; the log is not canonical."""


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _so3_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series below SMALL_ANGLE."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coeffs(theta)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _so3_coeffs(theta)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def _vinv_coeff(theta: np.ndarray) -> np.ndarray:
    # (1/t^2) * (1 - t sin t / (2 (1 - cos t)))
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    full = (1.0 - t * np.sin(t) / (4.0 * np.sin(0.5 * t) ** 2)) / (t * t)
    return np.where(small, 1.0 / 12.0 + theta * theta / 720.0, full)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + _vinv_coeff(theta)[..., None, None] * (K @ K)


def so3_log(R: np.ndarray, strict: bool = True) -> np.ndarray:
    """Rotation vector of ``R``.

    Near pi the axis is recovered from the symmetric part of ``R`` instead of
    ``R - R^T``. With ``strict`` an :class:`AngleNearPi` is raised when any
    angle is within ``NEAR_PI`` of pi.
    """
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if strict and np.any(theta > np.pi - NEAR_PI):
        raise AngleNearPi(f"rotation angle {float(np.max(theta))!r} too close to pi")

    a, _, _ = _so3_coeffs(theta)
    phi = w / a[..., None]

    near_pi = theta > np.pi - 1e-3
    if np.any(near_pi):
        Rn = R[near_pi]
        th = theta[near_pi]
        # (R + R^T)/2 - cos(t) I = (1 - cos t) a a^T
        S = 0.5 * (Rn + np.swapaxes(Rn, -1, -2)) - np.cos(th)[:, None, None] * np.eye(3)
        S = S / (1.0 - np.cos(th))[:, None, None]
        diag = np.diagonal(S, axis1=-2, axis2=-1)
        col = np.argmax(diag, axis=-1)
        axis = S[np.arange(len(col)), :, col]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        sign = np.sign(np.einsum("ij,ij->i", axis, w[near_pi]))
        sign[sign == 0] = 1.0
        phi[near_pi] = axis * (sign * th)[:, None]
    return phi


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """Twist ``(..., 6)`` to homogeneous matrix ``(..., 4, 4)``."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    a, b, c = _so3_coeffs(theta)
    K = skew(phi)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    H = np.zeros(xi.shape[:-1] + (4, 4))
    H[..., :3, :3] = R
    H[..., :3, 3] = np.einsum("...ij,...j->...i", V, rho)
    H[..., 3, 3] = 1.0
    return H


def se3_log(H: np.ndarray, strict: bool = True) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    phi = so3_log(H[..., :3, :3], strict=strict)
    Vinv = so3_left_jacobian_inv(phi)
    rho = np.einsum("...ij,...j->...i", Vinv, H[..., :3, 3])
    return np.concatenate([rho, phi], axis=-1)


def _q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translational coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-2
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / t**3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0, (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4))
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + c1[..., None, None] * (PR + RP + PRP)
        + c2[..., None, None] * (PP @ Rh + RP @ P - 3.0 * PRP)
        + c3[..., None, None] * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    J = so3_left_jacobian(xi[..., 3:])
    Q = _q_matrix(xi[..., :3], xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., :3, 3:] = Q
    out[..., 3:, 3:] = J
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: ``log(exp(d) X) ~ log X + Jl^-1(log X) d``."""
    xi = np.asarray(xi, dtype=np.float64)
    Jinv = so3_left_jacobian_inv(xi[..., 3:])
    Q = _q_matrix(xi[..., :3], xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., :3, 3:] = -Jinv @ Q @ Jinv
    out[..., 3:, 3:] = Jinv
    return out


def adjoint(H: np.ndarray) -> np.ndarray:
    """``Ad_H`` such that ``H exp(xi) H^-1 = exp(Ad_H xi)``."""
    R = H[..., :3, :3]
    t = H[..., :3, 3]
    out = np.zeros(H.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = skew(t) @ R
    out[..., 3:, 3:] = R
    return out


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar factor) wherever ``R^T R`` drifted past ORTHO_TOL."""
    R = np.array(R, dtype=np.float64)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(axis=(-2, -1))
    bad = err > ORTHO_TOL
    if np.any(bad):
        U, _, Vt = np.linalg.svd(R[bad])
        D = np.ones(U.shape[:-1])
        D[..., -1] = np.sign(np.linalg.det(U @ Vt))
        R[bad] = (U * D[..., None, :]) @ Vt
    return R


def compose_matrices(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    H = np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64)
    H[..., :3, :3] = orthonormalize(H[..., :3, :3])
    return H


def inverse_matrices(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    Rt = np.swapaxes(H[..., :3, :3], -1, -2)
    out = np.zeros_like(H)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, H[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return orthonormalize(R)


def twist_distance_matrices(A, B, length_scale: float = 0.1) -> np.ndarray:
    v = se3_log(compose_matrices(inverse_matrices(A), B), strict=False)
    v[..., 3:] *= length_scale
    return np.linalg.norm(v, axis=-1)


@dataclass(frozen=True)
class Twist:
    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64).reshape(3)
        phi = np.asarray(self.phi, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise ValueError("twist entries must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.as_vector()]

    def __add__(self, other: "Twist") -> "Twist":
        return Twist.from_vector(self.as_vector() + other.as_vector())

    def __neg__(self) -> "Twist":
        return Twist(-self.rho, -self.phi)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.linalg.det(R) <= 0:
            raise ValueError("rotation must have positive determinant")
        object.__setattr__(self, "rotation", orthonormalize(R))
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, H) -> "Pose":
        H = np.asarray(H, dtype=np.float64).reshape(4, 4)
        return cls(H[:3, :3], H[:3, 3])

    def matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.rotation
        H[:3, 3] = self.translation
        return H

    def to_list(self) -> list[float]:
        """Row-major 4x4 homogeneous matrix as 16 floats."""
        return [float(x) for x in self.matrix().reshape(-1)]

    @classmethod
    def from_list(cls, values) -> "Pose":
        return cls.from_matrix(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def expmap(v: Twist) -> Pose:
    return Pose.from_matrix(se3_exp(v.as_vector()))


def logmap(H: Pose) -> Twist:
    return Twist.from_vector(se3_log(H.matrix(), strict=True))


def compose(A: Pose, B: Pose) -> Pose:
    return Pose.from_matrix(compose_matrices(A.matrix(), B.matrix()))


def inverse(H: Pose) -> Pose:
    return Pose.from_matrix(inverse_matrices(H.matrix()))


@dataclass(frozen=True)
class PoseBounds:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h < 0):
            raise ValueError("half_extents must be non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)


def random_pose_matrices(bounds: PoseBounds, rng: np.random.Generator, n: int) -> np.ndarray:
    H = np.zeros((n, 4, 4))
    H[:, :3, :3] = random_rotations(rng, n)
    H[:, :3, 3] = bounds.center + rng.uniform(-1.0, 1.0, size=(n, 3)) * bounds.half_extents
    H[:, 3, 3] = 1.0
    return H


def random_pose(bounds: PoseBounds, rng: np.random.Generator) -> Pose:
    return Pose.from_matrix(random_pose_matrices(bounds, rng, 1)[0])


def perturb_matrices(H: np.ndarray, sigma, rng: np.random.Generator):
    """Global-chart noising of a batch: ``exp(log(H) + eps)``, eps ~ N(0, sigma^2 I).

    ``sigma`` may be a scalar or one value per pose. Returns ``(H_k, eps)``.
    """
    H = np.asarray(H, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    eps = rng.normal(size=H.shape[:-2] + (6,)) * sigma[..., None]
    Hk = se3_exp(se3_log(H, strict=True) + eps)
    return Hk, eps


def perturb(H: Pose, sigma_k: float, rng: np.random.Generator) -> tuple[Pose, Twist]:
    Hk, eps = perturb_matrices(H.matrix()[None], sigma_k, rng)
    return Pose.from_matrix(Hk[0]), Twist.from_vector(eps[0])


def twist_distance(A: Pose, B: Pose, length_scale: float = 0.1) -> float:
    """``|log(A^-1 B)|`` with the rotational part weighted by ``length_scale`` (m/rad)."""
    return float(twist_distance_matrices(A.matrix(), B.matrix(), length_scale))
