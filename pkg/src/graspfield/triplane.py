"""Tri-plane shape encoder: per-point MLP, plane scatter-mean, shared conv stack, interpolated query."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import NormalizeTransform

DOMAIN = 0.55
# (first, second) coordinate axes of the XY, XZ and YZ planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


class NotNormalized(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriPlaneFeatures:
    """Three ``R x R x d`` feature grids over ``[-0.55, 0.55]`` plus the cloud's transform."""

    planes: torch.Tensor
    transform: NormalizeTransform
    interpolation: str = "bilinear"

    @property
    def resolution(self) -> int:
        return int(self.planes.shape[1])

    @property
    def dim(self) -> int:
        return int(self.planes.shape[-1])


def cell_width(resolution: int) -> float:
    return 2.0 * DOMAIN / resolution


def cell_index(u: np.ndarray | torch.Tensor, resolution: int):
    """Integer cell containing coordinate ``u`` (last cell closed on the right)."""
    lib = torch if isinstance(u, torch.Tensor) else np
    i = lib.floor((u + DOMAIN) / cell_width(resolution))
    i = lib.clip(i, 0, resolution - 1)
    return i.long() if lib is torch else i.astype(np.int64)


def scatter_mean(points: torch.Tensor, feats: torch.Tensor, resolution: int) -> torch.Tensor:
    """Average point features per cell on each plane; empty cells stay zero.

    ``points`` must already be in a canonical order so the per-cell sums are
    reproducible bit for bit.
    """
    d = feats.shape[1]
    out = []
    for a, b in PLANE_AXES:
        idx = cell_index(points[:, a], resolution) * resolution + cell_index(points[:, b], resolution)
        acc = feats.new_zeros(resolution * resolution, d).index_add(0, idx, feats)
        cnt = feats.new_zeros(resolution * resolution).index_add(0, idx, torch.ones_like(idx, dtype=feats.dtype))
        out.append((acc / cnt.clamp(min=1.0)[:, None]).view(resolution, resolution, d))
    return torch.stack(out)


class TriPlaneEncoder(nn.Module):
    def __init__(self, dim: int = 32, resolution: int = 64, hidden: int = 64, conv_layers: int = 3,
                 interpolation: str = "bilinear"):
        super().__init__()
        if interpolation not in ("bilinear", "cubic"):
            raise ValueError(f"interpolation: unknown rule {interpolation!r}")
        self.dim = dim
        self.resolution = resolution
        self.interpolation = interpolation
        self.mlp = nn.Sequential(
            nn.Linear(3, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, dim)
        )
        layers = []
        for i in range(conv_layers):
            layers.append(nn.Conv2d(dim, dim, 3, padding=1))
            if i < conv_layers - 1:
                layers.append(nn.SiLU())
        self.conv = nn.Sequential(*layers)

    def raw_planes(self, points: torch.Tensor) -> torch.Tensor:
        """Scattered planes before the convolution stack, shape ``(3, R, R, d)``."""
        if points.numel() and float(points.abs().max()) > DOMAIN:
            raise NotNormalized("points fall outside the normalised volume")
        order = np.lexsort(points.detach().cpu().numpy().T[::-1])
        points = points[torch.as_tensor(order)]
        return scatter_mean(points, self.mlp(points), self.resolution)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        raw = self.raw_planes(points)
        smoothed = self.conv(raw.permute(0, 3, 1, 2))
        return smoothed.permute(0, 2, 3, 1).contiguous()

    def encode(self, points, transform: NormalizeTransform) -> TriPlaneFeatures:
        p = torch.as_tensor(np.asarray(points, dtype=np.float64))
        return TriPlaneFeatures(self(p), transform, self.interpolation)


def bilinear_with_grad(planes: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sum of bilinear samples from the three planes and its spatial derivative.

    Samples are anchored at cell centres; coordinates beyond the outermost
    centres clamp to the edge (zero derivative there). Returns ``(z, dz_dx,
    clamped)`` with ``z`` of shape ``(M, d)``, ``dz_dx`` of shape ``(M, d, 3)``.
    """
    R = planes.shape[1]
    h = cell_width(R)
    flat = planes.reshape(3, R * R, -1)
    z = 0.0
    grad = x.new_zeros(x.shape[0], planes.shape[-1], 3)
    clamped = torch.zeros(x.shape[0], dtype=torch.bool)
    for p, (a, b) in enumerate(PLANE_AXES):
        uv = (x[:, [a, b]] + DOMAIN) / h - 0.5
        inside = (uv >= 0) & (uv <= R - 1)
        clamped |= ~inside.all(dim=1)
        uv = uv.clamp(0.0, R - 1.0)
        i0 = torch.floor(uv).clamp(max=R - 2).long()
        f = uv - i0
        fu, fv = f[:, :1], f[:, 1:]
        base = i0[:, 0] * R + i0[:, 1]
        f00 = flat[p, base]
        f01 = flat[p, base + 1]
        f10 = flat[p, base + R]
        f11 = flat[p, base + R + 1]
        z = z + (1 - fu) * (1 - fv) * f00 + (1 - fu) * fv * f01 + fu * (1 - fv) * f10 + fu * fv * f11
        du = ((1 - fv) * (f10 - f00) + fv * (f11 - f01)) * inside[:, :1] / h
        dv = ((1 - fu) * (f01 - f00) + fu * (f11 - f10)) * inside[:, 1:] / h
        grad[:, :, a] += du
        grad[:, :, b] += dv
    return z, grad, clamped


def _cubic_weights(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Catmull-Rom weights for taps ``i-1 .. i+2`` and their derivatives in ``t``."""
    t2, t3 = t * t, t * t * t
    w = torch.stack([(-t3 + 2 * t2 - t), (3 * t3 - 5 * t2 + 2), (-3 * t3 + 4 * t2 + t), (t3 - t2)], dim=-1) / 2
    dw = torch.stack([(-3 * t2 + 4 * t - 1), (9 * t2 - 10 * t), (-9 * t2 + 8 * t + 1), (3 * t2 - 2 * t)], dim=-1) / 2
    return w, dw


def cubic_with_grad(planes: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Same contract as :func:`bilinear_with_grad` with Catmull-Rom interpolation.

    The sample passes through every cell-centre value and reproduces
    constants, like the bilinear rule, but its spatial derivative is
    continuous, so pose gradients have no jumps at cell boundaries.
    """
    R = planes.shape[1]
    h = cell_width(R)
    flat = planes.reshape(3, R * R, -1)
    taps = torch.arange(-1, 3)
    z = 0.0
    grad = x.new_zeros(x.shape[0], planes.shape[-1], 3)
    clamped = torch.zeros(x.shape[0], dtype=torch.bool)
    for p, (a, b) in enumerate(PLANE_AXES):
        uv = (x[:, [a, b]] + DOMAIN) / h - 0.5
        inside = (uv >= 0) & (uv <= R - 1)
        clamped |= ~inside.all(dim=1)
        uv = uv.clamp(0.0, R - 1.0)
        i0 = torch.floor(uv).clamp(max=R - 2).long()
        f = uv - i0
        wu, dwu = _cubic_weights(f[:, 0])
        wv, dwv = _cubic_weights(f[:, 1])
        iu = (i0[:, :1] + taps).clamp(0, R - 1)
        iv = (i0[:, 1:] + taps).clamp(0, R - 1)
        # (M, 4, 4, d) neighbourhood
        nb = flat[p][(iu[:, :, None] * R + iv[:, None, :]).reshape(-1)].reshape(x.shape[0], 4, 4, -1)
        z = z + torch.einsum("ma,mb,mabd->md", wu, wv, nb)
        grad[:, :, a] += torch.einsum("ma,mb,mabd->md", dwu, wv, nb) * inside[:, :1] / h
        grad[:, :, b] += torch.einsum("ma,mb,mabd->md", wu, dwv, nb) * inside[:, 1:] / h
    return z, grad, clamped


INTERPOLATORS = {"bilinear": bilinear_with_grad, "cubic": cubic_with_grad}


def query_features(features: TriPlaneFeatures, x) -> np.ndarray:
    """Summed plane features at normalised points ``x`` (``(M, 3)`` or ``(3,)``)."""
    arr = np.asarray(x, dtype=np.float64)
    pts = torch.as_tensor(arr.reshape(-1, 3))
    with torch.no_grad():
        z, _, _ = INTERPOLATORS[features.interpolation](features.planes, pts)
    z = z.numpy()
    return z[0] if arr.ndim == 1 else z
