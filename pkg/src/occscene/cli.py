"""``occscene`` command line: convert, render, warp, lidar, raycast-oracle, edit, metrics.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import OccSceneError
from .evalkit import bev_histogram, iou_miou, jsd, mmd, DEFAULT_BINS, DEFAULT_RANGE
from .formats import (decode_latent, decode_pfm, decode_ply, encode_latent, encode_pfm,
                      encode_pgm, encode_ply)
from .geomwarp import LatentImage, NoiseSpec, build_noise_prior, warp_latent
from .gsrender import parse_camera_rig, project_road_lines, render_views
from .lidarsim import (DEFAULT_PRESAMPLES, DEFAULT_RESAMPLES, DROP_MODES, decode_lidar_head,
                       parse_rig_config, raycast_cloud, simulate)
from .occdiff import TOY_DENOISERS, edit_pipeline, make_schedule, make_toy_denoiser
from .voxgrid import (ClassEmbeddingTable, SemanticOccupancyGrid, decode_bvl,
                      decode_cemb, decode_svo, embed_labels, encode_svo, unembed_labels,
                      voxel_centers)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage problems exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class DataError(Exception):
    """A validation failure tied to a specific input file."""

    def __init__(self, path, exc):
        super().__init__(f"{path}: {exc}")


def _load(path, decoder, *, text: bool = False):
    try:
        raw = Path(path).read_text() if text else Path(path).read_bytes()
        return decoder(raw)
    except (OccSceneError, OSError, UnicodeDecodeError) as exc:
        raise DataError(path, exc) from None


def _write(path: Path, data: bytes, outputs: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    outputs.append(str(path))


def _write_manifest(path: Path, args, inputs, outputs, started):
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {
        "command": args.command,
        "params": params,
        "inputs": inputs,
        "outputs": outputs,
        "seed": args.seed,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 6),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _manifest_for_file(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _report(values: dict, as_json: bool):
    if as_json:
        print(json.dumps(values, sort_keys=True))
    else:
        for k in sorted(values):
            v = values[k]
            print(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}")


# --------------------------------------------------------------------------- commands


def cmd_convert(args):
    src, dst = Path(args.input), Path(args.out)
    if src.suffix == ".svo" and dst.suffix == ".ply":
        grid = _load(src, decode_svo)
        idx = np.argwhere(grid.occupied)
        c = voxel_centers(grid, idx)
        verts = np.empty(len(idx), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "u1")])
        verts["x"], verts["y"], verts["z"] = c.T
        verts["label"] = grid.labels[tuple(idx.T)]
        data = encode_ply(verts)
    elif src.suffix == ".ply" and dst.suffix == ".svo":
        if args.dims is None:
            raise UsageError("PLY to SVO needs --dims H W D")
        verts = _load(src, decode_ply)
        if "label" not in (verts.dtype.names or ()):
            raise DataError(src, "vertex element has no 'label' property")
        labels = np.zeros(tuple(args.dims), dtype=np.uint8)
        pts = np.stack([verts["x"], verts["y"], verts["z"]], 1).astype(np.float64)
        ijk = np.floor((pts - np.asarray(args.origin)) / args.voxel_size).astype(np.int64)
        ok = ((ijk >= 0) & (ijk < np.asarray(args.dims))).all(axis=1)
        if not ok.all():
            raise DataError(src, f"{int((~ok).sum())} vertices fall outside the grid")
        labels[tuple(ijk.T)] = verts["label"]
        try:
            grid = SemanticOccupancyGrid(labels, args.voxel_size, tuple(args.origin), args.num_classes)
        except OccSceneError as exc:
            raise DataError(src, exc) from None
        data = encode_svo(grid)
    else:
        raise UsageError("convert supports .svo -> .ply and .ply -> .svo")
    outputs = []
    _write(dst, data, outputs)
    return [str(src)], outputs, _manifest_for_file(dst)


def cmd_render(args):
    grid = _load(args.grid, decode_svo)
    cams = _load(args.cams, parse_camera_rig, text=True)
    inputs = [args.grid, args.cams]
    if args.layout:
        layout = _load(args.layout, decode_bvl)
        inputs.append(args.layout)
        try:
            grid = project_road_lines(grid, layout, args.line_label)
        except OccSceneError as exc:
            raise DataError(args.layout, exc) from None
    out = Path(args.out_dir)
    outputs = []
    results = render_views(grid, cams, opacity=args.opacity, scale_factor=args.scale_factor,
                           normalize_depth=args.normalize_depth, threads=args.threads)
    for cam, (depth, sem) in zip(cams, results):
        _write(out / f"{cam.name}_depth.pfm", encode_pfm(depth.values), outputs)
        _write(out / f"{cam.name}_sem.pgm", encode_pgm(sem.labels), outputs)
    return inputs, outputs, out / "manifest.json"


def cmd_warp(args):
    lat = _load(args.latent, decode_latent)
    depth = _load(args.depth, decode_pfm)
    cams = {c.name: c for c in _load(args.cams, parse_camera_rig, text=True)}
    for name in (args.ref, args.tgt):
        if name not in cams:
            raise DataError(args.cams, f"no camera named {name!r}")
    try:
        z_c = LatentImage(lat[args.frame], args.downsample)
        spec = NoiseSpec(args.lam, args.seed, args.mode)
        warped, valid = warp_latent(z_c, depth.astype(np.float64), cams[args.ref], cams[args.tgt])
        prior = build_noise_prior(z_c, depth.astype(np.float64), cams[args.ref], cams[args.tgt], spec)
    except OccSceneError as exc:
        raise DataError(args.latent, exc) from None
    out = Path(args.out_dir)
    outputs = []
    for c in range(warped.values.shape[0]):
        _write(out / f"warp_c{c}.pfm", encode_pfm(warped.values[c]), outputs)
        _write(out / f"prior_c{c}.pfm", encode_pfm(prior.values[c]), outputs)
    _write(out / "valid.pgm", encode_pgm(valid.astype(np.uint8) * 255), outputs)
    return [args.latent, args.depth, args.cams], outputs, out / "manifest.json"


def cmd_lidar(args):
    grid = _load(args.grid, decode_svo)
    rig = _load(args.rig, parse_rig_config, text=True)
    inputs = [args.grid, args.rig]
    head = None
    if args.head:
        head = _load(args.head, decode_lidar_head)
        inputs.append(args.head)
    try:
        cloud = simulate(grid, rig, head=head, M=args.presamples, n=args.resamples,
                         seed=args.seed, drop_mode=args.drop_mode, threads=args.threads)
    except OccSceneError as exc:
        raise DataError(args.head or args.grid, exc) from None
    outputs = []
    _write(Path(args.out), encode_ply(cloud.vertices(args.include_dropped)), outputs)
    return inputs, outputs, _manifest_for_file(args.out)


def cmd_raycast(args):
    grid = _load(args.grid, decode_svo)
    rig = _load(args.rig, parse_rig_config, text=True)
    cloud = raycast_cloud(grid, rig)
    outputs = []
    _write(Path(args.out), encode_ply(cloud.vertices()), outputs)
    return [args.grid, args.rig], outputs, _manifest_for_file(args.out)


def cmd_edit(args):
    grid = _load(args.grid, decode_svo)
    b_ori = _load(args.layout_ori, decode_bvl)
    b_new = _load(args.layout_new, decode_bvl)
    inputs = [args.grid, args.layout_ori, args.layout_new]
    if args.table:
        table = _load(args.table, decode_cemb)
        inputs.append(args.table)
    else:
        table = ClassEmbeddingTable.orthonormal(grid.num_classes, args.embed_dim)
    try:
        fmap = embed_labels(grid, table)
    except OccSceneError as exc:
        raise DataError(args.table or args.grid, exc) from None
    if b_ori.dims != b_new.dims or b_ori.palette_size != b_new.palette_size:
        raise DataError(args.layout_new, f"layout dims {b_new.dims} differ from {b_ori.dims}")
    H, W, D = grid.dims
    z = np.moveaxis(fmap.values, -1, 0)[None]  # (1, D*C', H, W)
    den = make_toy_denoiser(args.denoiser, z.shape[1], b_ori.palette_size, args.seed)
    sched = make_schedule(args.schedule_steps)
    try:
        z_new = edit_pipeline(z, b_ori, b_new, den, sched, args.steps, args.guidance).values
    except OccSceneError as exc:
        raise DataError(args.layout_new, exc) from None
    new_fmap = type(fmap)(np.moveaxis(z_new[0], 0, -1), D)
    new_grid = unembed_labels(new_fmap, table, D, grid.voxel_size, grid.origin)
    if new_grid.num_classes != grid.num_classes:
        new_grid = SemanticOccupancyGrid(new_grid.labels, grid.voxel_size, grid.origin,
                                         grid.num_classes)
    outputs = []
    _write(Path(args.out_latent), encode_latent(z_new), outputs)
    _write(Path(args.out_grid), encode_svo(new_grid), outputs)
    return inputs, outputs, _manifest_for_file(args.out_grid)


def _cloud_points(path):
    v = _load(path, decode_ply)
    return np.stack([v["x"], v["y"]], 1).astype(np.float64)


def cmd_metrics(args):
    values = {}
    inputs = []
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt go together")
        pred, gt = _load(args.pred, decode_svo), _load(args.gt, decode_svo)
        inputs += [args.pred, args.gt]
        try:
            rep = iou_miou(pred, gt)
        except OccSceneError as exc:
            raise DataError(args.pred, exc) from None
        values["iou"] = rep.iou
        values["miou"] = rep.miou
        for c, v in enumerate(rep.per_class):
            if not np.isnan(v):
                values[f"iou_class_{c}"] = float(v)
    if args.set_a or args.set_b:
        if not (args.set_a and args.set_b):
            raise UsageError("--set-a and --set-b go together")
        hist = lambda p: bev_histogram(_cloud_points(p), tuple(args.bins), DEFAULT_RANGE)
        ha = [hist(p) for p in args.set_a]
        hb = [hist(p) for p in args.set_b]
        inputs += list(args.set_a) + list(args.set_b)
        values["mmd"] = mmd(ha, hb, args.bandwidth)
        pool = lambda hs: bev_histogram(np.concatenate([_cloud_points(p) for p in hs]),
                                        tuple(args.bins), DEFAULT_RANGE)
        pa, pb = pool(args.set_a), pool(args.set_b)
        values["jsd"] = jsd(pa, pb) if pa.total > 0 and pb.total > 0 else float("nan")
    if not values:
        raise UsageError("metrics needs --pred/--gt or --set-a/--set-b")
    _report(values, args.json)
    outputs = []
    if args.out:
        _write(Path(args.out), (json.dumps(values, sort_keys=True) + "\n").encode(), outputs)
        return inputs, outputs, _manifest_for_file(args.out)
    return inputs, outputs, None


# --------------------------------------------------------------------------- parser


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("OCCSCENE_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=_default_threads())
    common.add_argument("--json", action="store_true", help="machine-readable report")

    p = _Parser(prog="occscene", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("convert", parents=[common], help="SVO <-> PLY voxel-centre export")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, nargs=3, metavar=("H", "W", "D"))
    s.add_argument("--voxel-size", type=float, default=1.0)
    s.add_argument("--origin", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    s.add_argument("--num-classes", type=int, default=17)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("render", parents=[common], help="depth (PFM) and semantics (PGM) per camera")
    s.add_argument("--grid", required=True)
    s.add_argument("--cams", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--opacity", type=float, default=0.99)
    s.add_argument("--scale-factor", type=float, default=0.5)
    s.add_argument("--normalize-depth", action="store_true")
    s.add_argument("--layout", help="BVL layout whose line codes are painted onto the ground")
    s.add_argument("--line-label", type=int, default=12,
                   help="semantic class painted on line cells (default 12, other_flat)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("warp", parents=[common], help="warp a latent frame and build its noise prior")
    s.add_argument("--latent", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--depth", required=True, help="target-view depth PFM")
    s.add_argument("--cams", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--downsample", type=int, default=1)
    s.add_argument("--lam", type=float, default=0.3)
    s.add_argument("--mode", choices=("vanilla", "geometric"), default="geometric")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("lidar", parents=[common], help="simulate a LiDAR sweep to PLY")
    s.add_argument("--grid", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--head", help="LHED weights (default: analytic head)")
    s.add_argument("--presamples", "-M", type=int, default=DEFAULT_PRESAMPLES)
    s.add_argument("--resamples", "-n", type=int, default=DEFAULT_RESAMPLES)
    s.add_argument("--drop-mode", choices=DROP_MODES, default="threshold")
    s.add_argument("--include-dropped", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lidar)

    s = sub.add_parser("raycast-oracle", parents=[common], help="hard DDA ray cast to PLY")
    s.add_argument("--grid", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_raycast)

    s = sub.add_parser("edit", parents=[common], help="BEV edit via DDIM inversion and resampling")
    s.add_argument("--grid", required=True)
    s.add_argument("--layout-ori", required=True)
    s.add_argument("--layout-new", required=True)
    s.add_argument("--table", help="CEMB class-embedding table (default: orthonormal)")
    s.add_argument("--embed-dim", type=int, default=8)
    s.add_argument("--denoiser", choices=TOY_DENOISERS, default="linear")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--schedule-steps", type=int, default=1000)
    s.add_argument("--guidance", type=float, default=1.0)
    s.add_argument("--out-latent", required=True)
    s.add_argument("--out-grid", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("metrics", parents=[common], help="IoU/mIoU for grids, MMD/JSD for clouds")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--set-a", nargs="+")
    s.add_argument("--set-b", nargs="+")
    s.add_argument("--bins", type=int, nargs=2, default=list(DEFAULT_BINS))
    s.add_argument("--bandwidth", type=float)
    s.add_argument("--out", help="also write the report as JSON (with a manifest)")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("occscene: error: --threads must be >= 1", file=sys.stderr)
        return 1
    started = time.perf_counter()
    try:
        inputs, outputs, manifest = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"occscene {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"occscene {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OccSceneError, OSError) as exc:
        print(f"occscene {args.command}: {exc}", file=sys.stderr)
        return 2
    if manifest is not None:
        _write_manifest(Path(manifest), args, [str(i) for i in inputs], outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
