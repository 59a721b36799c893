"""Command-line interface: ``epimvs {synth,estimate,fuse,eval,gradcheck,bench}``.

Every command writes into a scratch directory next to ``--output`` and only
moves the results into place when it succeeds, so a failing run leaves no
partial artifacts.  Failures print one line ``error: <Kind>: <message>`` to
stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as eio
from . import synth
from .cascade import PipelineConfig, run_pipeline, stage_scale
from .errors import ConfigurationError, UsageError
from .fusion import (
    CONFIDENCE_THRESHOLD,
    MIN_CONSISTENT,
    REL_DEPTH_TOL,
    REPROJ_PX_TOL,
    cloud_metrics,
    depth_metrics,
    fuse_point_cloud,
    geometric_filter,
    photometric_filter,
)

THREADS_ENV = "EPIMVS_THREADS"
logger = logging.getLogger("epimvs")


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be >= 1")
    return n


# --- view directories ------------------------------------------------------------
#
#   <views>/images/<id>.npy        H x W x 3 float image in [0, 1]
#   <views>/cams/<id>_cam.txt      camera text
#   <views>/depths_gt/<id>.pfm     optional ground truth


def view_ids(views: Path):
    ids = sorted(p.stem for p in (views / "images").glob("*.npy"))
    if not ids:
        raise UsageError(f"no images found under {views / 'images'}")
    return ids


def load_views(views: Path):
    views = Path(views)
    ids = view_ids(views)
    images, cams, d_mins = [], [], []
    for vid in ids:
        img = np.load(views / "images" / f"{vid}.npy")
        cam_path = views / "cams" / f"{vid}_cam.txt"
        if not cam_path.exists():
            raise UsageError(f"missing camera file {cam_path}")
        cam, d_min, _ = eio.read_camera(cam_path, img.shape[1], img.shape[0])
        images.append(img)
        cams.append(cam)
        d_mins.append(d_min)
    return ids, images, cams


def load_gt(views: Path, vid: str):
    p = Path(views) / "depths_gt" / f"{vid}.pfm"
    return eio.read_pfm(p).astype(np.float64) if p.exists() else None


# --- atomic output -------------------------------------------------------------


class StagedOutput:
    """Collect outputs in a scratch directory; publish on success, discard on failure."""

    def __init__(self, target: Path, is_file: bool = False):
        self.target = Path(target)
        self.is_file = is_file
        parent = self.target.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self):
        if self.is_file:
            os.replace(self.tmp / self.target.name, self.target)
            for extra in self.tmp.iterdir():
                os.replace(extra, self.target.parent / extra.name)
            self.tmp.rmdir()
            return
        self.target.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.tmp.rglob("*")):
            if src.is_file():
                dst = self.target / src.relative_to(self.tmp)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
        shutil.rmtree(self.tmp)

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def run_staged(target, is_file, body):
    out = StagedOutput(target, is_file)
    try:
        result = body(out)
    except BaseException:
        out.discard()
        raise
    out.publish()
    return result


# --- configuration ----------------------------------------------------------------


def pipeline_config(args) -> PipelineConfig:
    values = eio.read_kv(args.config) if args.config else {}
    cfg = PipelineConfig.from_dict(values)
    over = {"threads": args.threads if args.threads is not None else default_threads()}
    if args.fusion:
        over["fusion"] = args.fusion
    if args.stages is not None:
        over["stages"] = args.stages
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(cfg, **over)


# --- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        spec = eio.scene_from_kv(eio.read_kv(args.spec))
    else:
        seed = args.seed or 0
        makers = {"plane": lambda: synth.plane_scene(), "three-plane": lambda: synth.three_plane_scene(seed),
                  "occluding": lambda: synth.occluding_planes_scene(seed)}
        spec = makers[args.scene]()
        if args.width or args.height:
            spec = replace(spec, width=args.width or spec.width, height=args.height or spec.height,
                           focal=spec.focal * (args.width or spec.width) / spec.width)
        if args.noise:
            spec = synth.with_noise(spec)

    def body(out):
        eio.write_kv(out.path("scene.cfg"), eio.scene_to_kv(spec))
        names = []
        for v in range(spec.num_views):
            img, depth, cam = synth.render(spec, v)
            vid = f"{v:08d}"
            np.save(out.path(f"images/{vid}.npy"), img)
            eio.write_camera(out.path(f"cams/{vid}_cam.txt"), cam, spec.d_min, 0.0)
            eio.write_pfm(out.path(f"depths_gt/{vid}.pfm"), depth)
            names += [f"images/{vid}.npy", f"cams/{vid}_cam.txt", f"depths_gt/{vid}.pfm"]
        man = eio.RunManifest("synth", [args.spec] if args.spec else [], args.spec or "", str(args.output), names,
                              eio.scene_to_kv(spec))
        man.write(out.path("manifest.txt"))

    run_staged(args.output, False, body)
    print(f"wrote {spec.num_views} views to {args.output}")
    return 0


def _select_refs(arg, ids):
    if arg in (None, "all"):
        return list(range(len(ids)))
    refs = []
    for tok in arg.split(","):
        if tok not in ids and not tok.isdigit():
            raise UsageError(f"unknown reference view {tok!r}")
        refs.append(ids.index(tok) if tok in ids else int(tok))
    for r in refs:
        if not 0 <= r < len(ids):
            raise UsageError(f"reference index {r} out of range")
    return refs


def cmd_estimate(args) -> int:
    cfg = pipeline_config(args)
    man = eio.RunManifest("estimate", [str(args.views)], args.config or "", str(args.output), [], cfg.to_dict())
    man.check_inputs()
    ids, images, cams = load_views(Path(args.views))
    refs = _select_refs(args.refs, ids)

    def body(out):
        report = []
        for r in refs:
            vid = ids[r]
            res = run_pipeline(images, cams, cfg, ref=r)
            for k, dm in enumerate(res.stages):
                name = f"depth/{vid}_stage{k}.pfm"
                eio.write_pfm(out.path(name), np.where(dm.valid, dm.depth, 0.0))
                man.artifacts.append(name)
            eio.write_pfm(out.path(f"depth/{vid}.pfm"), np.where(res.final.valid, res.final.depth, 0.0))
            eio.write_pfm(out.path(f"confidence/{vid}.pfm"), res.final.confidence)
            man.artifacts += [f"depth/{vid}.pfm", f"confidence/{vid}.pfm"]
            gt = load_gt(args.views, vid)
            if gt is not None:
                for k, dm in enumerate(res.stages):
                    s = stage_scale(k)
                    g = gt[::s, ::s]
                    epe, e1, e3 = depth_metrics(dm.depth, g, dm.valid & (g > 0))
                    report.append(f"view={vid} stage={k} epe={epe:.6f} e1={e1:.6f} e3={e3:.6f}")
        if report:
            text = f"fusion={cfg.fusion}\n" + "\n".join(report) + "\n"
            out.path("metrics.txt").write_text(text)
            man.artifacts.append("metrics.txt")
        man.write(out.path("manifest.txt"))
        return report

    report = run_staged(args.output, False, body)
    for line in report:
        print(line)
    print(f"estimated {len(refs)} view(s) into {args.output}")
    return 0


def cmd_fuse(args) -> int:
    ids, images, cams = load_views(Path(args.views))
    depth_dir = Path(args.depths)
    depths, confs = [], []
    for vid in ids:
        depths.append(eio.read_pfm(depth_dir / "depth" / f"{vid}.pfm").astype(np.float64))
        cp = depth_dir / "confidence" / f"{vid}.pfm"
        confs.append(eio.read_pfm(cp).astype(np.float64) if cp.exists() else np.ones_like(depths[-1]))
    H, W = depths[0].shape
    if (H, W) != images[0].shape[:2]:
        raise UsageError(f"depth maps {W}x{H} do not match images")
    photo = [photometric_filter(c, args.conf_threshold, d > 0) for c, d in zip(confs, depths)]
    masked = [np.where(m, d, 0.0) for m, d in zip(photo, depths)]
    filt = geometric_filter(masked, cams, args.reproj_tol, args.rel_tol, args.min_consistent)
    cloud = fuse_point_cloud(masked, cams, filt.masks, filt, images=images)
    target = Path(args.output)

    def body(out):
        eio.write_ply(out.path(target.name), cloud, binary=not args.ascii)
        cfg = {"conf_threshold": args.conf_threshold, "reproj_tol": args.reproj_tol, "rel_tol": args.rel_tol,
               "min_consistent": args.min_consistent, "points": len(cloud)}
        eio.RunManifest("fuse", [str(args.views), str(args.depths)], "", str(target.parent), [target.name], cfg).write(
            out.path(target.stem + ".manifest.txt"))

    run_staged(target, True, body)
    print(f"fused {len(cloud)} points into {target}")
    return 0


def cmd_eval(args) -> int:
    lines = []
    if args.pred:
        pred = eio.read_pfm(args.pred).astype(np.float64)
        gt = eio.read_pfm(args.gt).astype(np.float64)
        epe, e1, e3 = depth_metrics(pred, gt, (gt > 0) & (pred > 0))
        lines.append(f"epe={epe:.6f} e1={e1:.6f} e3={e3:.6f}")
    if args.cloud:
        acc, comp, overall = cloud_metrics(eio.read_ply(args.cloud), eio.read_ply(args.gt_cloud), args.dist_cap)
        lines.append(f"accuracy={acc:.6f} completeness={comp:.6f} overall={overall:.6f}")
    if not lines:
        raise UsageError("eval needs --pred/--gt and/or --cloud/--gt-cloud")
    for ln in lines:
        print(ln)
    if args.output:
        run_staged(Path(args.output), True, lambda out: out.path(Path(args.output).name).write_text("\n".join(lines) + "\n"))
    return 0


def cmd_gradcheck(args) -> int:
    from .ot import gradcheck

    worst, converged = gradcheck(args.instances, D=8, seed=args.seed or 0)
    print(f"max_rel_error={worst:.3e} instances={args.instances} converged={str(converged).lower()}")
    return 0 if worst <= 1e-4 and converged else 1


def cmd_bench(args) -> int:
    cfg = pipeline_config(args)
    ids, images, cams = load_views(Path(args.views))
    from .cascade import feature_bundle, run_stage
    from .features import extract_pyramid

    bundle = feature_bundle(cfg)
    times = {"features": []}
    for k in range(cfg.stages):
        times[f"stage{k}"] = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        pyramids = [extract_pyramid(im, bundle) for im in images]
        times["features"].append(time.perf_counter() - t0)
        prev = None
        src = list(range(1, len(images)))
        for k in range(cfg.stages):
            s = stage_scale(k)
            lvl = 3 - k
            t0 = time.perf_counter()
            out = run_stage(k, pyramids[0][lvl], [pyramids[i][lvl] for i in src], cams[0].scaled(s),
                            [cams[i].scaled(s) for i in src], cfg, prev)
            times[f"stage{k}"].append(time.perf_counter() - t0)
            prev = out.depth
    for name, ts in times.items():
        print(f"{name} median_s={np.median(ts):.4f} repeats={len(ts)}")
    return 0


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value pipeline config")
    common.add_argument("--views", type=Path, help="view directory (images/, cams/, depths_gt/)")
    common.add_argument("--output", type=Path, help="output directory or file")
    common.add_argument("--fusion", choices=("epipolar", "variance"))
    common.add_argument("--stages", type=int, help="number of cascade stages to run (1-4)")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="epimvs", description="Cascade MVS with epipolar-attention view fusion.")
    p.add_argument("--version", action="version", version=f"epimvs {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene to disk")
    s.add_argument("--spec", help="scene file in key = value form")
    s.add_argument("--scene", choices=("plane", "three-plane", "occluding"), default="three-plane")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--noise", action="store_true", help="10%% gain jitter and sigma 0.02 noise")
    s.set_defaults(func=cmd_synth, needs=("output",))

    e = sub.add_parser("estimate", parents=[common], help="run the cascade on a view directory")
    e.add_argument("--refs", default="all", help="comma-separated reference views (ids or indices) or 'all'")
    e.set_defaults(func=cmd_estimate, needs=("views", "output"))

    f = sub.add_parser("fuse", parents=[common], help="filter depth maps and export a PLY cloud")
    f.add_argument("--depths", type=Path, required=True, help="estimate output directory")
    f.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    f.add_argument("--min-consistent", type=int, default=MIN_CONSISTENT)
    f.add_argument("--conf-threshold", type=float, default=CONFIDENCE_THRESHOLD)
    f.add_argument("--reproj-tol", type=float, default=REPROJ_PX_TOL)
    f.add_argument("--rel-tol", type=float, default=REL_DEPTH_TOL)
    f.set_defaults(func=cmd_fuse, needs=("views", "output"))

    v = sub.add_parser("eval", parents=[common], help="depth or cloud metrics")
    v.add_argument("--pred")
    v.add_argument("--gt")
    v.add_argument("--cloud")
    v.add_argument("--gt-cloud")
    v.add_argument("--dist-cap", type=float, default=20.0)
    v.set_defaults(func=cmd_eval, needs=())

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the OT gradient")
    g.add_argument("--instances", type=int, default=200)
    g.set_defaults(func=cmd_gradcheck, needs=())

    b = sub.add_parser("bench", parents=[common], help="time each pipeline stage")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench, needs=("views",))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        for name in args.needs:
            if getattr(args, name) is None:
                raise UsageError(f"--{name} is required for {args.command}")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except Exception as exc:  # one machine-parsable line, never a traceback
        logger.debug("failure", exc_info=True)
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, (UsageError, ConfigurationError)) else 1


if __name__ == "__main__":
    sys.exit(main())
