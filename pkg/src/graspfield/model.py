"""Pose-energy model: tri-plane context, point descriptors with an SDF head, pose energy and its twist gradient."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import NormalizeTransform, PointCloud, normalize_cloud
from .triplane import INTERPOLATORS, TriPlaneEncoder, TriPlaneFeatures

MAGIC = b"CGDF"
VERSION = 1


def default_query_points() -> np.ndarray:
    """30 gripper-frame points (metres): finger pads, palm bar and the closing-gap axis."""
    zs = np.linspace(0.005, -0.055, 7)
    fingers = [[sx, 0.0, z] for sx in (0.05, -0.05) for z in zs]
    palm = [[x, 0.0, -0.06] for x in np.linspace(-0.05, 0.05, 6)]
    axis = [[0.0, 0.0, z] for z in np.linspace(0.005, -0.055, 10)]
    return np.array(fingers + palm + axis, dtype=np.float64)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    resolution: int = 64
    encoder_hidden: int = 64
    conv_layers: int = 3
    point_hidden: int = 128
    psi_dim: int = 64
    decoder_hidden: int = 256
    time_dim: int = 16
    interpolation: str = "cubic"
    coord_scale: float = 32.0

    def __post_init__(self):
        if self.interpolation not in INTERPOLATORS:
            raise ValueError(f"interpolation: must be one of {sorted(INTERPOLATORS)}")
        if not self.coord_scale > 0:
            raise ValueError("coord_scale: must be positive")
        for k, v in asdict(self).items():
            if k in ("interpolation", "coord_scale"):
                continue
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{k}: must be a positive integer")
        if self.time_dim % 2:
            raise ValueError("time_dim: must be even")
        if self.resolution < 2:
            raise ValueError("resolution: must be at least 2")


@dataclass(frozen=True, eq=False)
class ShapeContext:
    """Encoded cloud shared by every pose evaluated against it."""

    features: TriPlaneFeatures
    cloud_hash: str

    @property
    def transform(self) -> NormalizeTransform:
        return self.features.transform

    @property
    def planes(self) -> torch.Tensor:
        return self.features.planes


@dataclass(frozen=True)
class PointDescriptor:
    sdf: float
    psi: np.ndarray


def _dsilu(a: torch.Tensor) -> torch.Tensor:
    s = torch.sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def cloud_hash(points: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(points, dtype=np.float64).tobytes()).hexdigest()


class EnergyModel(nn.Module):
    """Energy of a gripper pose given a shape context and a noise level.

    All poses are in the context's normalised frame. The query cloud is stored
    in metres and scaled by the context's normalisation factor.

    The network output ``raw`` is trained so that its pose gradient predicts
    the twist noise; near a grasp it behaves like half the squared twist
    distance to that grasp. The field exposed to samplers is
    ``raw / sigma**2``, whose gradient estimates the negative score.
    """

    def __init__(self, config: ModelConfig | None = None, query_points: np.ndarray | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        q = default_query_points() if query_points is None else np.asarray(query_points, dtype=np.float64)
        self.register_buffer("query_points", torch.as_tensor(q.copy()))
        half = c.time_dim // 2
        self.register_buffer("time_freqs", torch.exp(torch.linspace(np.log(0.25), np.log(16.0), half, dtype=torch.float64)))
        self.encoder = TriPlaneEncoder(c.dim, c.resolution, c.encoder_hidden, c.conv_layers, c.interpolation)
        self._interpolate = INTERPOLATORS[c.interpolation]
        self.point1 = nn.Linear(c.dim + 3 + c.time_dim, c.point_hidden)
        self.point2 = nn.Linear(c.point_hidden, c.point_hidden)
        self.point3 = nn.Linear(c.point_hidden, 1 + c.psi_dim)
        self.dec1 = nn.Linear(self.n_query * (1 + c.psi_dim), c.decoder_hidden)
        self.dec2 = nn.Linear(c.decoder_hidden, 1)
        # start close to the zero-gradient predictor so the first loss is the no-skill baseline
        nn.init.normal_(self.dec2.weight, std=1e-4)
        nn.init.zeros_(self.dec2.bias)
        self.double()

    @classmethod
    def create(cls, config: ModelConfig | None = None, seed: int = 0) -> "EnergyModel":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            return cls(config)
        finally:
            torch.random.set_rng_state(gen_state)

    @property
    def n_query(self) -> int:
        return int(self.query_points.shape[0])

    @property
    def descriptor_width(self) -> int:
        return 1 + self.config.psi_dim

    # ------------------------------------------------------------ context

    def context(self, points, transform: NormalizeTransform | None = None) -> ShapeContext:
        """Encode a world-frame cloud; reuse ``transform`` to share another cloud's frame."""
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        if transform is None:
            _, transform = normalize_cloud(PointCloud(pts))
        unit = transform.to_unit(pts)
        feats = self.encoder.encode(unit, transform)
        return ShapeContext(feats, cloud_hash(pts))

    # ------------------------------------------------------------ forward pieces

    def time_embedding(self, sigma: torch.Tensor) -> torch.Tensor:
        arg = torch.log(sigma)[:, None] * self.time_freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)

    def _point_forward(self, planes, x, temb):
        z, dz, clamped = self._interpolate(planes, x)
        h0 = torch.cat([z, self.config.coord_scale * x, temb], dim=1)
        a1 = self.point1(h0)
        s1 = F.silu(a1)
        a2 = self.point2(s1)
        s2 = F.silu(a2)
        out = self.point3(s2)
        return out, (dz, a1, a2, clamped)

    def _query_world(self, ctx: ShapeContext, H: torch.Tensor) -> torch.Tensor:
        q = self.query_points * float(ctx.transform.scale)
        return torch.einsum("bij,nj->bni", H[:, :3, :3], q) + H[:, None, :3, 3]

    def point_descriptors(self, ctx: ShapeContext, x, sigma) -> torch.Tensor:
        """``(M, 1 + psi)`` rows of (sdf, psi) at normalised points."""
        x = torch.as_tensor(np.asarray(x, dtype=np.float64)).reshape(-1, 3)
        sig = torch.as_tensor(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)).copy())
        out, _ = self._point_forward(ctx.planes, x, self.time_embedding(sig))
        return out

    def energy_and_grad(self, ctx: ShapeContext, H: torch.Tensor, sigma: torch.Tensor, with_grad: bool = True):
        """Energies ``(B,)`` and left-trivialised twist gradients ``(B, 6)``.

        The gradient is written out layer by layer, so it stays differentiable
        with respect to the weights for training.
        """
        B, nq = H.shape[0], self.n_query
        X = self._query_world(ctx, H)
        x = X.reshape(-1, 3)
        temb = self.time_embedding(sigma).repeat_interleave(nq, dim=0)
        out, (dz, a1, a2, _) = self._point_forward(ctx.planes, x, temb)
        g1 = self.dec1(out.reshape(B, -1))
        energy = self.dec2(F.silu(g1))[:, 0]
        if not with_grad:
            return energy, None
        dg1 = self.dec2.weight[0] * _dsilu(g1)
        dout = (dg1 @ self.dec1.weight).reshape(-1, self.descriptor_width)
        da2 = (dout @ self.point3.weight) * _dsilu(a2)
        da1 = (da2 @ self.point2.weight) * _dsilu(a1)
        dh0 = da1 @ self.point1.weight
        d = self.config.dim
        dx = self.config.coord_scale * dh0[:, d:d + 3] + torch.einsum("md,mdk->mk", dh0[:, :d], dz)
        dx = dx.reshape(B, nq, 3)
        grad = torch.cat([dx.sum(dim=1), torch.linalg.cross(X, dx, dim=-1).sum(dim=1)], dim=1)
        return energy, grad

    # ------------------------------------------------------------ numpy-facing field API

    def energy(self, ctx: ShapeContext, H, sigma) -> np.ndarray:
        Ht, st = _as_batch(H, sigma)
        with torch.no_grad():
            e, _ = self.energy_and_grad(ctx, Ht, st, with_grad=False)
        return (e / st**2).numpy()

    def energy_and_gradient(self, ctx: ShapeContext, H, sigma) -> tuple[np.ndarray, np.ndarray]:
        Ht, st = _as_batch(H, sigma)
        with torch.no_grad():
            e, g = self.energy_and_grad(ctx, Ht, st)
        s2 = st**2
        return (e / s2).numpy(), (g / s2[:, None]).numpy()

    def pose_descriptor(self, ctx: ShapeContext, H, sigma) -> np.ndarray:
        Ht, st = _as_batch(H, sigma)
        with torch.no_grad():
            X = self._query_world(ctx, Ht).reshape(-1, 3)
            temb = self.time_embedding(st).repeat_interleave(self.n_query, dim=0)
            out, _ = self._point_forward(ctx.planes, X, temb)
        return out.reshape(Ht.shape[0], -1).numpy()

    def point_descriptor(self, ctx: ShapeContext, x, sigma) -> PointDescriptor:
        with torch.no_grad():
            row = self.point_descriptors(ctx, x, sigma)[0].numpy()
        return PointDescriptor(float(row[0]), row[1:].copy())

    def sdf(self, ctx: ShapeContext, x, sigma) -> np.ndarray:
        with torch.no_grad():
            return self.point_descriptors(ctx, x, sigma)[:, 0].numpy()

    # ------------------------------------------------------------ checkpoints

    def save(self, path, sigmas=(), train_config: dict | None = None) -> None:
        """Binary checkpoint plus a ``.json`` sidecar with the training configuration."""
        path = Path(path)
        state = self.state_dict()
        names = [k for k in state if k not in ("query_points", "time_freqs")]
        header = {
            "model": asdict(self.config),
            "layers": [[k, list(state[k].shape)] for k in names],
            "n_query": self.n_query,
            "resolution": self.config.resolution,
            "dim": self.config.dim,
            "sigmas": [float(s) for s in sigmas],
            "dtype": "<f8",
        }
        hb = json.dumps(header, sort_keys=True).encode()
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(hb)))
            fh.write(hb)
            for k in names:
                fh.write(state[k].detach().numpy().astype("<f8").tobytes())
            fh.write(self.query_points.numpy().astype("<f8").tobytes())
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(train_config or {}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["EnergyModel", dict]:
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", data[4:12])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[12:12 + hlen])
        off = 12 + hlen
        blocks = {}
        for name, shape in header["layers"]:
            n = int(np.prod(shape)) if shape else 1
            blocks[name] = np.frombuffer(data, "<f8", n, off).reshape(shape)
            off += 8 * n
        q = np.frombuffer(data, "<f8", 3 * header["n_query"], off).reshape(-1, 3)
        model = cls(ModelConfig(**header["model"]), q)
        state = model.state_dict()
        for name, arr in blocks.items():
            state[name] = torch.as_tensor(arr.copy())
        model.load_state_dict(state)
        return model, header


def _as_batch(H, sigma) -> tuple[torch.Tensor, torch.Tensor]:
    Hn = np.asarray(H, dtype=np.float64).reshape(-1, 4, 4)
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (Hn.shape[0],)).copy()
    return torch.as_tensor(Hn), torch.as_tensor(s)
