"""Command-line pipeline: phantom generation, scan simulation, training,
rendering, evaluation, benchmarking, hashing, retrieval, refinement, and
the HTTP service."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ContractError, FileFormatError, SonomapError
from .field import GridConfig, ImpedanceField, domain_from_poses
from .geometry import Pose, ProbeGeometry, euler_zyx_to_matrix, pose_angular_error_deg
from .image import psnr, read_pgm, ssim, write_pgm
from .dataset import DatasetEntry, ScanDataset, read_manifest, write_manifest
from .localizer import ConvEncoder, Gallery, LocalizerConfig, retrieve, train_localizer
from .phantom import (PhantomVolume, default_phantom_spec, export_dataset, gen_phantom,
                      gen_trajectory, phantom_spec_from_obj)
from .refine import RefineConfig, refine
from .train import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONTRACT = 4


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def parse_pose(text: str) -> Pose:
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 6:
        raise ContractError("pose must be 'px,py,pz,rz,ry,rx' (mm, radians)")
    return Pose(vals[:3], vals[3:])


def format_pose(pose: Pose) -> str:
    return ",".join(f"{x:.9g}" for x in pose.as_params())


def pose_obj(pose: Pose) -> dict:
    return {
        "position_mm": [float(x) for x in pose.position],
        "euler_zyx_rad": [float(x) for x in pose.euler_zyx],
    }


def _traj_from_args(args, base_pose=None):
    kind = args.trajectory.replace("-", "_")
    kwargs = dict(count=args.count, z_mm=args.traj_z_mm)
    if kind == "circular":
        kwargs.update(diameter_mm=args.diameter_mm, center_depth_mm=args.center_depth_mm)
    elif kind == "fixed_rotation":
        kwargs.update(step_deg=args.step_deg, base_pose=base_pose)
    elif kind == "rotation_tilt_grid":
        kwargs.update(step_deg=args.step_deg, tilt_count=args.tilt_count,
                      tilt_step_deg=args.tilt_step_deg, base_pose=base_pose)
    return gen_trajectory(kind, **kwargs)


def _geom_from_args(args) -> ProbeGeometry:
    return ProbeGeometry(
        kind=args.probe, width_mm=args.width_mm, depth_mm=args.depth_mm,
        image_w=args.image_w, image_h=args.image_h, apex_offset_mm=args.apex_offset_mm,
    )


def _add_traj_args(p):
    p.add_argument("--trajectory", default="circular",
                   choices=["circular", "fixed-rotation", "rotation-tilt-grid"])
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--diameter-mm", type=float, default=20.0)
    p.add_argument("--center-depth-mm", type=float, default=30.0)
    p.add_argument("--step-deg", type=float, default=5.0)
    p.add_argument("--tilt-count", type=int, default=5)
    p.add_argument("--tilt-step-deg", type=float, default=5.0)
    p.add_argument("--traj-z-mm", type=float, default=0.0)


def _add_geom_args(p):
    p.add_argument("--probe", default="linear", choices=["linear", "convex"])
    p.add_argument("--width-mm", type=float, default=40.0)
    p.add_argument("--depth-mm", type=float, default=48.0)
    p.add_argument("--image-w", type=int, default=128)
    p.add_argument("--image-h", type=int, default=96)
    p.add_argument("--apex-offset-mm", type=float, default=30.0)


class _SubRegistry:
    """add_parser passthrough that remembers every subparser, so config-file
    defaults can be applied to all of them (argparse subparsers would
    otherwise clobber set_defaults on the root parser)."""

    def __init__(self, action):
        self._action = action
        self.parsers = []

    def add_parser(self, *a, **kw):
        p = self._action.add_parser(*a, **kw)
        self.parsers.append(p)
        return p


def build_parser():
    parser = argparse.ArgumentParser(prog="sonomap")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of default overrides (keys = option names)")
    parser.add_argument("--out", type=Path, default=Path("."))
    parser.add_argument("--threads", type=int, default=None)
    sub = _SubRegistry(parser.add_subparsers(dest="command", required=True))

    p = sub.add_parser("gen-phantom", help="voxelize a procedural impedance phantom")
    p.add_argument("--spec", type=Path, default=None)

    p = sub.add_parser("simulate-scan", help="simulate a posed scan of a phantom")
    p.add_argument("--phantom", type=Path, required=True)
    p.add_argument("--speckle", type=float, default=0.1)
    _add_traj_args(p)
    _add_geom_args(p)

    p = sub.add_parser("train", help="reconstruct a field from a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--pixels", type=int, default=4096)
    p.add_argument("--lr-tables", type=float, default=1e-2)
    p.add_argument("--lr-mlp", type=float, default=1e-3)
    p.add_argument("--val-every", type=int, default=250)
    p.add_argument("--levels", type=int, default=12)
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--table-size", type=int, default=1 << 17)
    p.add_argument("--res-min", type=int, default=16)
    p.add_argument("--res-max", type=int, default=256)

    p = sub.add_parser("render", help="render poses from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True,
                   help="manifest supplying the probe geometry")
    p.add_argument("--pose", type=str, default=None, help="px,py,pz,rz,ry,rx")
    p.add_argument("--output", type=Path, default=None, help="PGM path for --pose mode")
    _add_traj_args(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of renders or paired datasets")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--ref", type=Path, default=None, help="compare against this dataset")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])

    p = sub.add_parser("bench", help="direct vs ray-march renderer timings")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--compare-backends", action="store_true")

    p = sub.add_parser("train-hash", help="train the retrieval encoder + gallery")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--q", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("retrieve", help="look up the pose of a query image")
    p.add_argument("--query", type=Path, required=True)
    p.add_argument("--encoder", type=Path, required=True)
    p.add_argument("--gallery", type=Path, required=True)
    p.add_argument("--truth-pose", type=str, default=None)

    p = sub.add_parser("refine", help="photometric pose refinement")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--pose", type=str, required=True)
    p.add_argument("--iterations", type=int, default=120)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--pixels", type=int, default=512)

    p = sub.add_parser("serve", help="HTTP service over trained artifacts")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--encoder", type=Path, default=None)
    p.add_argument("--gallery", type=Path, default=None)
    p.add_argument("--metrics", type=Path, default=None)
    p.add_argument("--port", type=int, default=8080)
    return parser, sub.parsers


def _cmd_gen_phantom(args) -> int:
    if args.spec is not None:
        spec = phantom_spec_from_obj(json.loads(args.spec.read_text()))
    else:
        spec = default_phantom_spec(seed=args.seed)
    vol = gen_phantom(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "phantom.aipz"
    vol.save(path)
    print(f"wrote {path} dims={vol.dims} spacing={tuple(vol.spacing)}")
    return EXIT_OK


def _cmd_simulate_scan(args) -> int:
    vol = PhantomVolume.load(args.phantom)
    geom = _geom_from_args(args)
    poses = _traj_from_args(args)
    manifest = export_dataset(vol, poses, geom, args.out, seed=args.seed,
                              speckle_amp=args.speckle)
    print(f"wrote {manifest} ({len(poses)} images)")
    return EXIT_OK


def _cmd_train(args) -> int:
    ds = read_manifest(args.dataset / "manifest.json" if args.dataset.is_dir() else args.dataset)
    poses = [e.pose for e in ds.entries]
    dmin, dmax = domain_from_poses(poses, ds.geometry)
    cfg = GridConfig(levels=args.levels, feature_dim=args.features,
                     table_size=args.table_size, res_min=args.res_min,
                     res_max=args.res_max, domain_min=dmin, domain_max=dmax)
    field = ImpedanceField(cfg, seed=args.seed)
    tcfg = TrainConfig(iterations=args.iterations, pixels_per_step=args.pixels,
                       lr_tables=args.lr_tables, lr_mlp=args.lr_mlp,
                       seed=args.seed, val_every=args.val_every)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(ds, field, tcfg, metrics_path=args.out / "metrics.log",
                   progress=lambda s, p, v, l: print(f"step {s} psnr={p:.3f} ssim={v:.4f} loss={l:.6f}"))
    ckpt = args.out / "checkpoint.aiau"
    field.save(ckpt)
    print(f"wrote {ckpt} final_loss={result.final_loss:.6f}")
    return EXIT_OK


def _load_dataset(path: Path) -> ScanDataset:
    return read_manifest(path / "manifest.json" if path.is_dir() else path)


def _cmd_render(args) -> int:
    field = ImpedanceField.load(args.checkpoint)
    ds = _load_dataset(args.dataset)
    geom = ds.geometry
    if args.pose is not None:
        img = field.render_image(parse_pose(args.pose), geom)
        out = args.output or (args.out / "render.pgm")
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_pgm(img, out)
        print(f"wrote {out}")
        return EXIT_OK
    poses = _traj_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pose in enumerate(poses):
        img = field.render_image(pose, geom)
        name = f"render_{i:04d}.pgm"
        write_pgm(img, args.out / name)
        entries.append(DatasetEntry(file=name, pose=pose, split="train", class_index=i))
    out_ds = ScanDataset(geometry=geom, entries=entries, root=args.out)
    write_manifest(out_ds, args.out / "manifest.json")
    print(f"wrote {args.out / 'manifest.json'} ({len(poses)} images)")
    return EXIT_OK


def _fmt_metric(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def _cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    entries = ds.entries if args.split == "all" else ds.split_entries(args.split)
    if not entries:
        raise ContractError(f"dataset has no {args.split!r} entries")
    if args.ref is None and args.checkpoint is None:
        raise ContractError("eval needs --checkpoint or --ref")
    ref_ds = _load_dataset(args.ref) if args.ref is not None else None
    field = ImpedanceField.load(args.checkpoint) if args.checkpoint is not None else None
    ps, ss = [], []
    for e in entries:
        img = ds.load_image(e)
        if ref_ds is not None:
            ref_by_class = {r.class_index: r for r in ref_ds.entries}
            other = ref_ds.load_image(ref_by_class[e.class_index])
        else:
            other = field.render_image(e.pose, ds.geometry)
        p = psnr(other, img)
        s = ssim(other, img)
        ps.append(p)
        ss.append(s)
        print(f"{e.file} psnr={_fmt_metric(p)} ssim={s:.4f}")
    print(f"mean psnr={_fmt_metric(float(np.mean(ps)))} ssim={float(np.mean(ss)):.4f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .bench import bench_backends, bench_renderers

    field = ImpedanceField.load(args.checkpoint)
    ds = _load_dataset(args.dataset)
    poses = [e.pose for e in ds.entries[: args.images]]
    if len(poses) < args.images:
        poses = (poses * (args.images // max(1, len(poses)) + 1))[: args.images]
    r = bench_renderers(field, ds.geometry, poses, k=args.k)
    print(f"direct_ms={r['direct_ms']:.3f} raymarch_ms={r['raymarch_ms']:.3f} "
          f"speedup={r['speedup']:.2f} k={r['k']} images={r['images']}")
    if args.compare_backends:
        b = bench_backends(field, ds.geometry, poses)
        print(" ".join(f"{k}={v:.3f}" for k, v in sorted(b.items())))
    return EXIT_OK


def _cmd_train_hash(args) -> int:
    ds = _load_dataset(args.dataset)
    images = [ds.load_image(e) for e in ds.entries]
    poses = [e.pose for e in ds.entries]
    cfg = LocalizerConfig(q=args.q, batch_size=args.batch, iterations=args.iterations,
                          lr=args.lr, seed=args.seed)
    encoder, _, gallery, trace = train_localizer(images, poses, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    encoder.save(args.out / "encoder.aiae")
    gallery.save(args.out / "gallery.aiag")
    print(f"wrote {args.out / 'encoder.aiae'} and gallery "
          f"({gallery.codes.shape[0]} codes), loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return EXIT_OK


def _cmd_retrieve(args) -> int:
    encoder = ConvEncoder.load(args.encoder)
    gallery = Gallery.load(args.gallery)
    query = read_pgm(args.query)
    pose, cls, dist = retrieve(query, encoder, gallery)
    line = f"class={cls} hamming={dist} pose={format_pose(pose)}"
    if args.truth_pose is not None:
        err = pose_angular_error_deg(parse_pose(args.truth_pose), pose)
        line += f" angular_error_deg={err:.4f}"
    print(line)
    return EXIT_OK


def _cmd_refine(args) -> int:
    field = ImpedanceField.load(args.checkpoint)
    ds = _load_dataset(args.dataset)
    observed = read_pgm(args.image)
    cfg = RefineConfig(max_iterations=args.iterations, restarts=args.restarts,
                       pixels_per_step=args.pixels, seed=args.seed)
    result = refine(parse_pose(args.pose), observed, field, ds.geometry, cfg)
    print(json.dumps({
        "pose": pose_obj(result.pose),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "iterations": result.iterations,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .service import serve

    serve(checkpoint=args.checkpoint, dataset=args.dataset, encoder=args.encoder,
          gallery=args.gallery, metrics=args.metrics, port=args.port)
    return EXIT_OK


_COMMANDS = {
    "gen-phantom": _cmd_gen_phantom,
    "simulate-scan": _cmd_simulate_scan,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "train-hash": _cmd_train_hash,
    "retrieve": _cmd_retrieve,
    "refine": _cmd_refine,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    # --config supplies defaults, so peel it off before the real parse
    pre, _ = parser.parse_known_args(argv)
    if pre.config is not None:
        try:
            overrides = json.loads(Path(pre.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            return _fail("io", f"cannot read config: {e}", EXIT_IO)
        defaults = {k.replace("-", "_"): v for k, v in overrides.items()}
        parser.set_defaults(**defaults)
        for sp in subparsers:
            sp.set_defaults(**defaults)
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("AIA_THREADS", "1"))
    K.set_num_threads(threads)
    try:
        return _COMMANDS[args.command](args)
    except FileFormatError as e:
        return _fail("io", str(e), EXIT_IO)
    except OSError as e:
        return _fail("io", str(e), EXIT_IO)
    except ContractError as e:
        return _fail("contract", str(e), EXIT_CONTRACT)
    except SonomapError as e:
        return _fail("contract", str(e), EXIT_CONTRACT)


if __name__ == "__main__":
    sys.exit(main())
