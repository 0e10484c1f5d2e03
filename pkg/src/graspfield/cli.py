"""Command-line entry point: dataset, train, sample, sample-constrained, eval, reconstruct.

Exit codes: 0 success, 2 bad configuration or input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .dataset import InsufficientGrasps, ShapeSpec, build_dataset, default_shapes, load_dataset
from .diffusion import (
    Diverged,
    NoiseSchedule,
    TrainConfig,
    read_grasps_json,
    sample,
    sample_constrained,
    threshold_grasps,
    train,
    write_grasps_json,
)
from .geometry import (
    DegenerateMesh,
    ParseError,
    PointCloud,
    TargetRegion,
    auto_regions,
    load_cloud,
    load_mesh,
    normalize_cloud,
    sample_surface,
    save_cloud_ply,
)
from .grasp_eval import (
    GripperSpec,
    chamfer,
    evaluate_grasp,
    fc_percentage,
    grasp_centers,
    pair_dual_arm,
    target_grasp_ratio,
)
from .model import EnergyModel, ModelConfig, default_query_points
from .se3 import AngleNearPi

logger = logging.getLogger("graspfield")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- argument plumbing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $CGDF_THREADS or 1)")
    p.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _schedule_args(p: argparse.ArgumentParser) -> None:
    d = NoiseSchedule()
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--sigma-max", type=float, default=d.sigma_max)
    p.add_argument("--sigma-min", type=float, default=d.sigma_min)
    p.add_argument("--eta", type=float, default=d.eta)
    p.add_argument("--steps-per-level", type=int, default=d.steps_per_level)


def _shape_input(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", type=Path, help="OBJ/PLY mesh; a surface cloud is sampled from it")
    src.add_argument("--cloud", type=Path, help="point cloud (PLY, .npy or .xyz)")
    p.add_argument("--cloud-points", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graspfield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate toy shapes with antipodal grasp labels")
    _common(p)
    p.add_argument("--spec", type=Path, default=None, help="JSON list of shape specs (default: built-in set)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-grasps", type=int, default=200)
    p.add_argument("--mu", type=float, default=0.3)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the energy model on a dataset directory")
    _common(p)
    t, m = TrainConfig(), ModelConfig()
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="CSV log (default: <out>.csv)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    for name in ("epochs", "batch_size", "lr", "lr_final", "sdf_weight", "clouds_per_object",
                 "cloud_points", "sdf_points", "checkpoint_every"):
        default = getattr(t, name)
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)
    for name in ("dim", "resolution", "encoder_hidden", "conv_layers", "point_hidden", "psi_dim", "decoder_hidden"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(m, name))
    p.add_argument("--interpolation", choices=["bilinear", "cubic"], default=m.interpolation)
    p.add_argument("--coord-scale", type=float, default=m.coord_scale)
    _schedule_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("sample", cmd_sample, "sample grasps for a whole object"),
                             ("sample-constrained", cmd_sample_constrained, "sample grasps on target regions")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        _shape_input(p)
        p.add_argument("--m", type=int, default=8, help="chains (grasps) per run or per region")
        p.add_argument("--out", type=Path, required=True, help="grasps JSON")
        p.add_argument("--markers", type=Path, default=None, help="gripper marker PLY (default: <out>.ply)")
        _schedule_args(p)
        if name == "sample-constrained":
            reg = p.add_mutually_exclusive_group(required=True)
            reg.add_argument("--region-file", type=Path, action="append",
                             help="JSON list of cloud indices; repeat for several regions")
            reg.add_argument("--auto-regions", type=int, nargs="?", const=2, default=None,
                             help="pick this many regions by farthest-point sampling (default 2)")
            p.add_argument("--k", type=int, default=100, help="points per automatic region")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score sampled grasps against a mesh")
    _common(p)
    p.add_argument("--grasps", type=Path, required=True)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--cloud", type=Path, default=None, help="cloud the region files index into")
    p.add_argument("--region-file", type=Path, action="append", default=None)
    p.add_argument("--delta", type=float, default=None, help="energy threshold for the success rate")
    p.add_argument("--reconstruction", type=Path, default=None, help="reconstructed PLY for the chamfer distance")
    p.add_argument("--mu", type=float, default=0.3)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--delta-prime", type=float, default=0.5)
    p.add_argument("--dual-arm", action="store_true", help="also score non-interfering grasp pairs")
    p.add_argument("--out", type=Path, required=True, help="report JSON")
    p.add_argument("--csv", type=Path, default=None, help="append a summary row here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="extract the zero level set of the learned SDF")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    _shape_input(p)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", type=Path, required=True, help="reconstructed mesh PLY")
    p.add_argument("--report", type=Path, default=None, help="JSON with the chamfer distance")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be a JSON object")
    known = set(vars(args)) - {"command", "func", "config"}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    # re-parse so that explicit flags override the file
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _schedule(args) -> NoiseSchedule:
    return NoiseSchedule(args.levels, args.sigma_max, args.sigma_min, args.eta, args.steps_per_level)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("CGDF_THREADS", "1")))


def _input_cloud(args) -> tuple[PointCloud, np.ndarray | None, object]:
    """(cloud, per-point region ids or None, mesh or None)."""
    if args.mesh is not None:
        mesh = load_mesh(args.mesh)
        return sample_surface(mesh, args.cloud_points, np.random.default_rng(args.seed)), None, mesh
    cloud, region_id = load_cloud(args.cloud)
    return cloud, region_id, None


def marker_points(poses) -> tuple[np.ndarray, np.ndarray]:
    """Gripper skeleton points for each pose and the index of the grasp they belong to."""
    q = default_query_points()
    Hs = np.asarray(poses, dtype=np.float64).reshape(-1, 4, 4)
    pts = np.einsum("bij,nj->bni", Hs[:, :3, :3], q) + Hs[:, None, :3, 3]
    return pts.reshape(-1, 3), np.repeat(np.arange(len(Hs)), len(q))


# ---------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    if args.spec is None:
        specs = default_shapes()
    else:
        try:
            raw = json.loads(args.spec.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"spec: cannot read {args.spec}: {exc}") from exc
        if isinstance(raw, dict):
            raw = raw.get("shapes", raw)
        if not isinstance(raw, list):
            raise ConfigError("spec: expected a list of shape specs")
        specs = []
        for i, d in enumerate(raw):
            try:
                specs.append(ShapeSpec.from_dict(d))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"spec[{i}].{exc}") from exc
    manifest = build_dataset(specs, args.out, args.n_grasps, args.seed, mu=args.mu)
    for e in manifest["shapes"]:
        if e["insufficient"]:
            logger.warning("%s: only %d grasps found", e["spec"]["name"], e["count"])
    print(json.dumps({"out": str(args.out), "hash": manifest["hash"],
                      "counts": {e["spec"]["name"]: e["count"] for e in manifest["shapes"]}}))
    return 0


def cmd_train(args) -> int:
    _, objects = load_dataset(args.dataset)
    schedule = _schedule(args)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_final=args.lr_final,
                      sdf_weight=args.sdf_weight, clouds_per_object=args.clouds_per_object,
                      cloud_points=args.cloud_points, sdf_points=args.sdf_points,
                      checkpoint_every=args.checkpoint_every)
    log = args.log or args.out.with_suffix(args.out.suffix + ".csv")
    start, opt_state = 0, None
    if args.resume:
        if not args.out.exists():
            raise ConfigError(f"resume: no checkpoint at {args.out}")
        model, _ = EnergyModel.load(args.out)
        sidecar = json.loads(args.out.with_suffix(args.out.suffix + ".json").read_text())
        start = int(sidecar.get("epoch", 0))
        optim = Path(str(args.out) + ".optim")
        if optim.exists():
            opt_state = torch.load(optim, weights_only=True)
    else:
        mcfg = ModelConfig(dim=args.dim, resolution=args.resolution, encoder_hidden=args.encoder_hidden,
                           conv_layers=args.conv_layers, point_hidden=args.point_hidden, psi_dim=args.psi_dim,
                           decoder_hidden=args.decoder_hidden, interpolation=args.interpolation,
                           coord_scale=args.coord_scale)
        model = EnergyModel.create(mcfg, seed=args.seed)
    rows = train(model, objects, cfg, schedule, seed=args.seed, log_path=log, checkpoint_path=args.out,
                 start_epoch=start, optimizer_state=opt_state)
    last = rows[-1] if rows else {"epoch": start - 1, "loss": float("nan")}
    print(json.dumps({"checkpoint": str(args.out), "log": str(log), "epoch": last["epoch"] + 1,
                      "loss": last["loss"]}))
    return 0


def _write_outputs(args, cands, extra: dict | None = None) -> None:
    write_grasps_json(cands, args.out)
    markers = args.markers or args.out.with_suffix(".ply")
    pts, ids = marker_points([c.pose.matrix() for c in cands])
    save_cloud_ply(pts, markers, ids)
    print(json.dumps({"grasps": str(args.out), "markers": str(markers), "count": len(cands), **(extra or {})}))


def cmd_sample(args) -> int:
    model, _ = EnergyModel.load(args.checkpoint)
    cloud, _, _ = _input_cloud(args)
    ctx = model.context(cloud)
    cands = sample(model, ctx, args.m, _schedule(args), seed=args.seed, threads=_threads(args))
    _write_outputs(args, cands)
    return 0


def _regions(args, cloud: PointCloud) -> list[TargetRegion]:
    if args.auto_regions is not None:
        regions = auto_regions(cloud, args.auto_regions, min(args.k, len(cloud.points)))
        stem = args.out.with_suffix("")
        for r, reg in enumerate(regions):
            Path(f"{stem}.region{r}.json").write_text(reg.to_json())
        ids = np.full(len(cloud.points), -1, dtype=np.int64)
        for r, reg in enumerate(regions):
            ids[reg.indices] = r
        save_cloud_ply(cloud.points, f"{stem}.cloud.ply", ids)
        return regions
    regions = []
    for path in args.region_file:
        try:
            idx = np.asarray(json.loads(Path(path).read_text()), dtype=np.int64)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise ConfigError(f"region-file: cannot read {path}: {exc}") from exc
        if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= len(cloud.points):
            raise ConfigError(f"region-file: {path} must list indices into the {len(cloud.points)}-point cloud")
        regions.append(TargetRegion(idx, cloud.points[idx]))
    return regions


def cmd_sample_constrained(args) -> int:
    model, _ = EnergyModel.load(args.checkpoint)
    cloud, _, _ = _input_cloud(args)
    regions = _regions(args, cloud)
    ctx = model.context(cloud)
    schedule = _schedule(args)
    cands = []
    for r, reg in enumerate(regions):
        ctx_t = model.context(reg.points, ctx.transform)
        out = sample_constrained(model, ctx, ctx_t, args.m, schedule, seed=[args.seed, r], threads=_threads(args))
        for c in out:
            c.flags["region"] = r
        cands.extend(out)
    write_grasps_json(cands, args.out)
    # regions are recorded in a sidecar so the grasps file keeps the plain candidate layout
    args.out.with_suffix(".regions.json").write_text(json.dumps([c.flags["region"] for c in cands]))
    markers = args.markers or args.out.with_suffix(".ply")
    pts, ids = marker_points([c.pose.matrix() for c in cands])
    save_cloud_ply(pts, markers, ids)
    print(json.dumps({"grasps": str(args.out), "markers": str(markers), "count": len(cands),
                      "regions": len(regions)}))
    return 0


def cmd_eval(args) -> int:
    mesh = load_mesh(args.mesh)
    cands = read_grasps_json(args.grasps)
    gripper = GripperSpec()
    poses = [c.pose.matrix() for c in cands]
    evals = [evaluate_grasp(mesh, gripper, H, args.mu, args.eps, args.delta_prime) for H in poses]
    centers = grasp_centers(poses, gripper) if poses else np.zeros((0, 3))
    region_pts = None
    if args.region_file:
        if args.cloud is None:
            raise ConfigError("region-file: --cloud is required to resolve region indices")
        cloud, _ = load_cloud(args.cloud)
        idx = np.concatenate([np.asarray(json.loads(Path(p).read_text()), dtype=np.int64) for p in args.region_file])
        if idx.size == 0 or idx.min() < 0 or idx.max() >= len(cloud.points):
            raise ConfigError("region-file: indices out of range for --cloud")
        region_pts = cloud.points[idx]
    tg = None if region_pts is None else target_grasp_ratio(poses, region_pts, gripper)[0]
    se = None if args.delta is None else threshold_grasps(cands, args.delta)[1]
    cd = None
    if args.reconstruction is not None:
        recon, _ = load_cloud(args.reconstruction)
        surface = sample_surface(mesh, len(recon.points), np.random.default_rng(args.seed)).points
        _, tf = normalize_cloud(PointCloud(surface))
        cd = chamfer(tf.to_unit(recon.points), tf.to_unit(surface))
    report = {
        "fc_pct": fc_percentage(evals),
        "tg_pct": tg,
        "se_pct": se,
        "cd": cd,
        "count": len(cands),
        "per_candidate": [
            {"energy": c.energy, "collides": ev.collides, "contacts": len(ev.contacts),
             "force_closure": ev.force_closure, "center": [float(v) for v in ctr]}
            for c, ev, ctr in zip(cands, evals, centers)
        ],
    }
    if args.dual_arm:
        pairs = pair_dual_arm(poses, mesh, gripper, mu=args.mu, eps=args.eps, delta_prime=args.delta_prime)
        report["pair_fc_pct"] = fc_percentage(pairs)
        report["pairs"] = len(pairs)
    args.out.write_text(json.dumps(report, indent=1))
    if args.csv is not None:
        new = not args.csv.exists()
        with args.csv.open("a") as fh:
            if new:
                fh.write("grasps,count,fc_pct,tg_pct,se_pct,cd\n")
            fh.write(",".join(str(v) for v in (args.grasps, len(cands), report["fc_pct"], tg, se, cd)) + "\n")
    print(json.dumps({k: report[k] for k in ("fc_pct", "tg_pct", "se_pct", "cd", "count")}))
    return 0


def reconstruct_surface(model: EnergyModel, ctx, resolution: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Marching cubes on the learned SDF over the normalised volume; vertices in world units."""
    from skimage.measure import marching_cubes

    axis = np.linspace(-0.5, 0.5, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.concatenate([model.sdf(ctx, chunk, sigma) for chunk in np.array_split(grid, max(1, len(grid) // 65536))])
    volume = values.reshape(resolution, resolution, resolution)
    if not volume.min() < 0 < volume.max():
        raise DegenerateMesh("learned SDF has no zero crossing inside the volume")
    step = axis[1] - axis[0]
    verts, faces, _, _ = marching_cubes(volume, 0.0, spacing=(step, step, step))
    verts = verts - 0.5
    return ctx.transform.to_world(verts), faces.astype(np.int64)


def _save_mesh_ply(verts: np.ndarray, faces: np.ndarray, path) -> None:
    from plyfile import PlyData, PlyElement

    v = np.array([tuple(p) for p in verts], dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    f = np.empty(len(faces), dtype=[("vertex_indices", "i4", (3,))])
    f["vertex_indices"] = faces
    PlyData([PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")], text=True).write(str(path))


def cmd_reconstruct(args) -> int:
    model, header = EnergyModel.load(args.checkpoint)
    cloud, _, mesh = _input_cloud(args)
    ctx = model.context(cloud)
    sigma = min(header["sigmas"]) if header.get("sigmas") else NoiseSchedule().sigma_min
    verts, faces = reconstruct_surface(model, ctx, args.resolution, sigma)
    _save_mesh_ply(verts, faces, args.out)
    reference = (sample_surface(mesh, len(cloud.points), np.random.default_rng(args.seed + 1)).points
                 if mesh is not None else cloud.points)
    # compare in the normalised frame so the number does not depend on object size
    tf = ctx.transform
    cd = chamfer(tf.to_unit(verts), tf.to_unit(reference))
    result = {"mesh": str(args.out), "vertices": len(verts), "faces": len(faces), "cd": cd}
    if args.report is not None:
        args.report.write_text(json.dumps(result, indent=1))
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------- entry point


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (Diverged, AngleNearPi, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, DegenerateMesh, InsufficientGrasps, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
