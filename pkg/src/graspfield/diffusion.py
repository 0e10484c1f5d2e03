"""Noise schedule, denoising training, annealed Langevin sampling on SE(3), part-guided composition."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from threadpoolctl import threadpool_limits

from .dataset import ToyObject
from .geometry import NormalizeTransform, PointCloud, normalize_cloud, sample_surface, sdf_query
from .model import EnergyModel, ShapeContext
from .se3 import Pose, PoseBounds, compose_matrices, perturb_matrices, random_pose_matrices, se3_exp

logger = logging.getLogger(__name__)

CHAIN_BLOCK = 16


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise levels and Langevin step sizes.

    ``step_size(k) = eta * sigma_k^2 / sigma_min^2`` is the drift coefficient;
    the injected noise has standard deviation ``sqrt(2 * step_size(k))``.
    """

    levels: int = 50
    sigma_max: float = 1.0
    sigma_min: float = 0.01
    eta: float = 2e-5
    steps_per_level: int = 5
    inject_noise: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels: must be >= 1")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("sigma_min: need 0 < sigma_min <= sigma_max")
        if self.levels > 1 and self.sigma_min == self.sigma_max:
            raise ValueError("sigma_max: must exceed sigma_min when levels > 1")
        if self.eta <= 0:
            raise ValueError("eta: must be positive")
        if self.steps_per_level < 1:
            raise ValueError("steps_per_level: must be >= 1")

    @property
    def sigmas(self) -> np.ndarray:
        """Decreasing from ``sigma_max`` to ``sigma_min``."""
        if self.levels == 1:
            return np.array([self.sigma_min])
        return np.geomspace(self.sigma_max, self.sigma_min, self.levels)

    @property
    def step_sizes(self) -> np.ndarray:
        return self.eta * self.sigmas**2 / self.sigma_min**2

    @property
    def noise_scales(self) -> np.ndarray:
        """Zero when noise injection is off, which turns sampling into gradient descent."""
        return np.sqrt(2.0 * self.step_sizes) * float(self.inject_noise)

    def to_dict(self) -> dict:
        return asdict(self)


class EnergyField(Protocol):
    def energy(self, ctx, H: np.ndarray, sigma) -> np.ndarray: ...

    def energy_and_gradient(self, ctx, H: np.ndarray, sigma) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class GraspCandidate:
    pose: Pose
    energy: float
    provenance: str
    energy_full: float | None = None
    energy_target: float | None = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_list(),
            "energy_full": self.energy_full,
            "energy_target": self.energy_target,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspCandidate":
        ef, et = d.get("energy_full"), d.get("energy_target")
        energies = [e for e in (ef, et) if e is not None]
        return cls(Pose.from_list(d["pose"]), max(energies) if energies else math.nan,
                   d.get("provenance", "unconstrained"), ef, et)


def write_grasps_json(candidates: list[GraspCandidate], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in candidates], indent=1))


def read_grasps_json(path) -> list[GraspCandidate]:
    return [GraspCandidate.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-4
    sdf_weight: float = 0.5
    scaled_loss: bool = True
    clouds_per_object: int = 4
    cloud_points: int = 1000
    sdf_points: int = 256
    rotation_augment: bool = False
    checkpoint_every: int = 50
    grad_clip: float = 10.0

    def __post_init__(self):
        for k in ("epochs", "batch_size", "clouds_per_object", "cloud_points", "sdf_points"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k}: must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("lr: must be positive")
        if self.sdf_weight < 0:
            raise ValueError("sdf_weight: must be non-negative")


@dataclass
class TrainBatch:
    """Normalised-frame training data for one object view."""

    cloud: np.ndarray
    transform: NormalizeTransform
    poses: np.ndarray
    sigma: np.ndarray
    sdf_points: np.ndarray
    sdf_values: np.ndarray


@dataclass
class _ObjectData:
    clouds: list[np.ndarray]
    poses: np.ndarray
    sdf_points: np.ndarray
    sdf_values: np.ndarray
    center: np.ndarray


def _prepare(obj: ToyObject, cfg: TrainConfig, rng: np.random.Generator) -> _ObjectData:
    clouds = [sample_surface(obj.mesh, cfg.cloud_points, rng).points for _ in range(cfg.clouds_per_object)]
    lo, hi = obj.mesh.bounds
    n_near = 4 * cfg.sdf_points
    near = sample_surface(obj.mesh, n_near, rng).points + rng.normal(scale=0.01, size=(n_near, 3))
    far = lo - 0.05 + rng.uniform(size=(n_near, 3)) * (hi - lo + 0.1)
    pts = np.vstack([near, far])
    return _ObjectData(clouds, np.array([lab.pose.matrix() for lab in obj.labels]), pts,
                       sdf_query(obj.mesh, pts), 0.5 * (lo + hi))


def make_batch(data: _ObjectData, schedule: NoiseSchedule, cfg: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    cloud = data.clouds[rng.integers(len(data.clouds))]
    poses = data.poses[rng.integers(len(data.poses), size=cfg.batch_size)]
    sel = rng.choice(len(data.sdf_points), size=cfg.sdf_points, replace=False)
    sdf_pts = data.sdf_points[sel]
    if cfg.rotation_augment:
        from .se3 import random_rotations

        R = random_rotations(rng, 1)[0]
        A = np.eye(4)
        A[:3, :3] = R
        A[:3, 3] = data.center - R @ data.center
        cloud = cloud @ R.T + A[:3, 3]
        sdf_pts = sdf_pts @ R.T + A[:3, 3]
        poses = A @ poses
    _, tf = normalize_cloud(PointCloud(cloud))
    sigmas = schedule.sigmas[rng.integers(schedule.levels, size=cfg.batch_size)]
    return TrainBatch(cloud, tf, tf.pose_to_unit(poses), sigmas, tf.to_unit(sdf_pts),
                      data.sdf_values[sel] * tf.scale)


def training_loss(model: EnergyModel, batch: TrainBatch, rng: np.random.Generator,
                  scaled_loss: bool = True, sdf_sigma: float = 0.01) -> tuple[torch.Tensor, torch.Tensor]:
    """(denoising L1 loss, SDF L1 loss) for one batch; both differentiable."""
    ctx = model.context(batch.cloud, batch.transform)
    Hk, eps = perturb_matrices(batch.poses, batch.sigma, rng)
    sig = torch.as_tensor(batch.sigma)
    _, grad = model.energy_and_grad(ctx, torch.as_tensor(Hk), sig)
    resid = grad - torch.as_tensor(eps)
    if scaled_loss:
        resid = resid / sig[:, None]
    loss_diff = resid.abs().sum(dim=1).mean()
    pred = model.point_descriptors(ctx, batch.sdf_points, sdf_sigma)[:, 0]
    loss_sdf = (pred - torch.as_tensor(batch.sdf_values)).abs().mean()
    return loss_diff, loss_sdf


def train(model: EnergyModel, objects: list[ToyObject], cfg: TrainConfig, schedule: NoiseSchedule,
          seed: int = 0, log_path=None, checkpoint_path=None, start_epoch: int = 0,
          optimizer_state: dict | None = None) -> list[dict]:
    """Adam over the denoising + SDF objective; returns one log row per epoch.

    Each step encodes one view of one object and regresses a batch of its
    perturbed grasps. An epoch is enough steps to cover every label once.
    """
    if not objects or not any(len(o.labels) for o in objects):
        raise ValueError("dataset is empty")
    objects = [o for o in objects if len(o.labels)]
    torch.set_num_threads(1)
    prep_ss = np.random.SeedSequence([seed, 0x5EED])
    data = [_prepare(o, cfg, np.random.default_rng(s)) for o, s in zip(objects, prep_ss.spawn(len(objects)))]
    total = sum(len(o.labels) for o in objects)
    steps_per_epoch = max(1, math.ceil(total / cfg.batch_size))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    total_steps = cfg.epochs * steps_per_epoch
    rows = []
    log_file = Path(log_path) if log_path else None
    if log_file and start_epoch == 0:
        log_file.write_text("epoch,loss,loss_diff,loss_sdf,lr\n")
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([seed, epoch])
        sums = np.zeros(3)
        for step in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + step
            frac = global_step / max(1, total_steps - 1)
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
            for g in opt.param_groups:
                g["lr"] = lr
            obj = global_step % len(data)
            batch = make_batch(data[obj], schedule, cfg, rng)
            loss_diff, loss_sdf = training_loss(model, batch, rng, cfg.scaled_loss, schedule.sigma_min)
            loss = loss_diff + cfg.sdf_weight * loss_sdf
            if not torch.isfinite(loss):
                raise Diverged(f"loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sums += [loss.item(), loss_diff.item(), loss_sdf.item()]
        row = {"epoch": epoch, "loss": sums[0] / steps_per_epoch, "loss_diff": sums[1] / steps_per_epoch,
               "loss_sdf": sums[2] / steps_per_epoch, "lr": lr}
        rows.append(row)
        if log_file:
            with log_file.open("a", newline="") as fh:
                csv.writer(fh).writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["loss_diff"])),
                                         repr(float(row["loss_sdf"])), repr(float(row["lr"]))])
        if checkpoint_path and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            model.save(checkpoint_path, schedule.sigmas, {
                "train": asdict(cfg), "schedule": schedule.to_dict(), "seed": seed, "epoch": epoch + 1,
            })
            torch.save(opt.state_dict(), str(checkpoint_path) + ".optim")
        logger.info("epoch %d loss %.5f", epoch, row["loss"])
    return rows


# ---------------------------------------------------------------- sampling


def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("CGDF_THREADS", "1"))
    return max(1, int(threads))


def _init_poses(rngs, inflate: float) -> np.ndarray:
    bounds = PoseBounds(np.zeros(3), np.full(3, 0.5 * inflate))
    return np.concatenate([random_pose_matrices(bounds, r, 1) for r in rngs])


def _run_chains(step_fn, final_fn, rngs, schedule: NoiseSchedule, inflate: float):
    H = _init_poses(rngs, inflate)
    for sigma, step, noise in zip(schedule.sigmas, schedule.step_sizes, schedule.noise_scales):
        for _ in range(schedule.steps_per_level):
            drift = step_fn(H, sigma)
            z = np.stack([r.normal(size=6) for r in rngs])
            xi = -step * drift + noise * z
            H = compose_matrices(se3_exp(xi), H)
    return H, final_fn(H, schedule.sigma_min)


def _score(fld, ctx, H, sigma) -> tuple[np.ndarray, np.ndarray]:
    return fld.energy_and_gradient(ctx, H, np.full(len(H), sigma))


def _parallel(blocks, fn, threads):
    threads = _thread_count(threads)
    torch.set_num_threads(1)
    with threadpool_limits(1):
        if threads == 1:
            return [fn(b) for b in blocks]
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, blocks))


def _chain_rngs(seed, m: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(m)]


def sample(fld: EnergyField, ctx, m: int, schedule: NoiseSchedule, seed: int = 0, threads: int | None = None,
           inflate: float = 1.5, provenance: str = "unconstrained") -> list[GraspCandidate]:
    """``m`` independent annealed Langevin chains; poses returned in the world frame."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rngs = _chain_rngs(seed, m)
    blocks = [rngs[i:i + CHAIN_BLOCK] for i in range(0, m, CHAIN_BLOCK)]

    def run(block):
        return _run_chains(lambda H, s: _score(fld, ctx, H, s)[1],
                           lambda H, s: fld.energy(ctx, H, np.full(len(H), s)), block, schedule, inflate)

    out = []
    tf = _transform_of(ctx)
    for H, e in _parallel(blocks, run, threads):
        for Hi, ei in zip(H, e):
            out.append(GraspCandidate(Pose.from_matrix(tf.pose_to_world(Hi)), float(ei), provenance, float(ei), None))
    return out


def select_gradient(e_full: np.ndarray, g_full: np.ndarray, e_target: np.ndarray, g_target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the larger energy per pose; ties go to the full-object context."""
    use_target = e_target > e_full
    return np.where(use_target[:, None], g_target, g_full), use_target


def sample_constrained(fld: EnergyField, ctx_full, ctx_target, m: int, schedule: NoiseSchedule, seed: int = 0,
                       threads: int | None = None, inflate: float = 1.5) -> list[GraspCandidate]:
    """Part-guided chains following the gradient of ``max(E_full, E_target)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rngs = _chain_rngs(seed, m)
    blocks = [rngs[i:i + CHAIN_BLOCK] for i in range(0, m, CHAIN_BLOCK)]

    def step(H, s):
        e1, g1 = _score(fld, ctx_full, H, s)
        e2, g2 = _score(fld, ctx_target, H, s)
        return select_gradient(e1, g1, e2, g2)[0]

    def final(H, s):
        sig = np.full(len(H), s)
        return np.stack([fld.energy(ctx_full, H, sig), fld.energy(ctx_target, H, sig)], axis=1)

    def run(block):
        return _run_chains(step, final, block, schedule, inflate)

    out = []
    tf = _transform_of(ctx_full)
    for H, e in _parallel(blocks, run, threads):
        for Hi, (ef, et) in zip(H, e):
            out.append(GraspCandidate(Pose.from_matrix(tf.pose_to_world(Hi)), float(max(ef, et)), "part_guided",
                                      float(ef), float(et)))
    return out


def sample_naive_target(fld: EnergyField, ctx_full, ctx_target, m: int, schedule: NoiseSchedule, seed: int = 0,
                        threads: int | None = None, inflate: float = 1.5) -> list[GraspCandidate]:
    """Baseline: sample on the target cloud alone, then score with both contexts."""
    cands = sample(fld, ctx_target, m, schedule, seed, threads, inflate, provenance="naive_target")
    return rescore(fld, ctx_full, ctx_target, cands, schedule.sigma_min, "naive_target")


def rescore(fld: EnergyField, ctx_full, ctx_target, cands: list[GraspCandidate], sigma: float,
            provenance: str | None = None) -> list[GraspCandidate]:
    tf = _transform_of(ctx_full)
    H = tf.pose_to_unit(np.array([c.pose.matrix() for c in cands]))
    sig = np.full(len(H), sigma)
    ef = fld.energy(ctx_full, H, sig)
    et = fld.energy(ctx_target, H, sig) if ctx_target is not None else None
    out = []
    for i, c in enumerate(cands):
        t = None if et is None else float(et[i])
        e = float(ef[i]) if t is None else max(float(ef[i]), t)
        out.append(GraspCandidate(c.pose, e, provenance or c.provenance, float(ef[i]), t, dict(c.flags)))
    return out


def _transform_of(ctx) -> NormalizeTransform:
    if isinstance(ctx, NormalizeTransform):
        return ctx
    if isinstance(ctx, ShapeContext):
        return ctx.transform
    tf = getattr(ctx, "transform", None)
    return tf if tf is not None else NormalizeTransform()


def threshold_grasps(candidates: list[GraspCandidate], delta: float) -> tuple[list[GraspCandidate], float]:
    """Keep candidates whose (max) energy is below ``delta``; returns (kept, SE in percent)."""
    if not candidates:
        return [], 0.0
    kept = [c for c in candidates if _max_energy(c) < delta]
    return kept, 100.0 * len(kept) / len(candidates)


def _max_energy(c: GraspCandidate) -> float:
    vals = [e for e in (c.energy_full, c.energy_target) if e is not None]
    return max(vals) if vals else c.energy


def calibrate_delta(energies, percentile: float = 90.0) -> float:
    """Energy threshold at ``percentile`` of known-good grasp energies."""
    e = np.asarray(energies, dtype=np.float64)
    if e.size == 0:
        raise ValueError("need at least one validation energy")
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must be within [0, 100]")
    return float(np.percentile(e, percentile))


def validation_energies(fld: EnergyField, ctx_full, poses_world, sigma: float, ctx_target=None) -> np.ndarray:
    """Energies of world-frame poses; the max over both contexts when a target is given."""
    tf = _transform_of(ctx_full)
    H = tf.pose_to_unit(np.asarray(poses_world, dtype=np.float64).reshape(-1, 4, 4))
    sig = np.full(len(H), sigma)
    e = fld.energy(ctx_full, H, sig)
    if ctx_target is not None:
        e = np.maximum(e, fld.energy(ctx_target, H, sig))
    return e
