"""Command-line interface: simulate, build, query, mesh, eval, bench.

Exit codes: 0 success, 2 configuration error, 3 data error. Log verbosity
comes from ``GPSDF_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io, metrics, scenes
from .config import Config
from .errors import ConfigError, DataError, GpsdfError
from .mapping import KernelSdfMap
from .surface import read_ply, write_ply

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
LOG_ENV = "GPSDF_LOG_LEVEL"

log = logging.getLogger("gpsdf")


def _load_config(path: str | None, threads: int | None) -> Config:
    cfg = Config.load(path) if path else Config()
    if threads is not None:
        cfg.octree.threads = threads
    return cfg.validate()


def _read_scene(path) -> scenes.Scene:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read scene {path}: {exc.strerror}") from None
    return scenes.parse_scene(text, str(path))


# ----------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    scene = _read_scene(args.scene)
    try:
        text = Path(args.trajectory).read_text()
    except OSError as exc:
        raise DataError(f"cannot read trajectory {args.trajectory}: {exc.strerror}") from None
    traj = io.parse_trajectory(text, str(args.trajectory))
    if args.seed is not None:
        traj.seed = args.seed
    if args.noise is not None:
        traj.noise_k = args.noise
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = io.simulate(scene, traj)
    for f in frames:
        io.write_frame(f, out / io.frame_name(f.t))
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def build_map(frame_dir, cfg: Config) -> tuple[KernelSdfMap, list]:
    files = io.list_frames(frame_dir)
    if not files:
        raise DataError(f"{frame_dir}: no frames")
    m = KernelSdfMap(cfg)
    reports = []
    for path in files:
        t0 = time.perf_counter()
        frame = io.read_frame(path)
        m.events.append(metrics.TimingEvent("load", time.perf_counter() - t0))
        reports.append(m.integrate_frame(frame))
        log.info("frame %d: %d new partitions, %d EM passes, tasks %s", frame.t,
                 len(reports[-1].new_partitions), reports[-1].em_passes, reports[-1].task_counts())
    m.flush()
    return m, reports


def cmd_build(args) -> int:
    cfg = _load_config(args.config, args.threads)
    m, reports = build_map(args.frames, cfg)
    digest = io.save_snapshot(m, args.out)
    lines = ["# t seconds new_partitions em_passes march buffer train"]
    for r in reports:
        c = r.task_counts()
        lines.append(f"{r.t} {r.seconds:.6f} {len(r.new_partitions)} {r.em_passes} "
                     f"{c['march']} {c['buffer']} {c['train']}")
    timing = metrics.timing_report(m.events)
    lines.append(f"# frames {timing.n_frames} mean_fpt_s {timing.frame_seconds:.6f}")
    lines.append(f"# partitions {len(m.partitions)} snapshot_sha256 {digest}")
    report = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(report)
    print(f"snapshot {args.out} sha256 {digest}")
    print(f"frames {timing.n_frames} mean FPT {timing.frame_seconds * 1e3:.2f} ms, partitions {len(m.partitions)}")
    return EXIT_OK


def cmd_query(args) -> int:
    m = io.load_snapshot(args.snapshot)
    if args.threads is not None:
        m.config.octree.threads = args.threads
    if args.grid:
        pts = io.parse_grid_spec(args.grid, m.dim)
    else:
        pts = io.read_points(args.points, m.dim)
    res = m.query_batch(pts)
    io.write_query_results(pts, res, args.out)
    bad = sum(not r.valid for r in res)
    print(f"wrote {len(res)} rows to {args.out} ({bad} invalid)")
    return EXIT_OK


def cmd_mesh(args) -> int:
    m = io.load_snapshot(args.snapshot)
    mesh = m.extract_global_mesh()
    write_ply(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def _is_scene(path) -> bool:
    try:
        head = Path(path).read_text()[:4096]
    except (OSError, UnicodeDecodeError):
        return False
    return any(ln.split("#")[0].strip().startswith(("dim", "sphere", "box", "halfspace"))
               for ln in head.splitlines())


def _ply_points(path, n: int, seed: int) -> np.ndarray:
    probe = read_ply(path, 3)
    dim = 2 if probe.faces.shape[1] == 2 and np.all(probe.vertices[:, 2] == 0) else 3
    mesh = read_ply(path, dim)
    return metrics.sample_mesh_surface(mesh.vertices, mesh.faces, n, seed)


def cmd_eval(args) -> int:
    if args.kind == "sdf":
        pred = io.read_query_results(args.pred)
        if _is_scene(args.gt):
            scene = _read_scene(args.gt)
            if scene.dim != pred.dim:
                raise DataError("scene and query dimensions differ")
            gt_sdf = scenes.analytic_sdf(scene, pred.points)
            gt_grad = scenes.analytic_gradient(scene, pred.points)
        else:
            gt = io.read_query_results(args.gt)
            if gt.points.shape != pred.points.shape or not np.allclose(gt.points, pred.points):
                raise DataError("prediction and ground-truth query points differ")
            gt_sdf, gt_grad = gt.sdf, gt.gradient
        rep = metrics.sdf_metrics(pred.sdf, pred.gradient, pred.valid, gt_sdf, gt_grad, args.near)
        title = "SDF metrics (cm, rad)"
    else:
        pred = _ply_points(args.pred, args.samples, args.seed)
        if _is_scene(args.gt):
            scene = _read_scene(args.gt)
            gt = scenes.sample_boundary(scene, args.gt_spacing)
        else:
            gt = _ply_points(args.gt, args.samples, args.seed + 1)
        rep = metrics.mesh_metrics(pred, gt, args.delta)
        title = "Mesh metrics (%, cm)"
    print(metrics.report_table(rep, title), end="")
    if args.out:
        Path(args.out).write_text(metrics.report_to_kv(rep))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, args.threads)
    m, _ = build_map(args.frames, cfg)
    pts = m.surface_points()
    if len(pts) == 0:
        raise DataError("map has no surface; nothing to query")
    rng = np.random.default_rng(args.seed)
    lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
    q = rng.uniform(lo, hi, (args.queries, m.dim))
    m.query_batch(q)
    t = metrics.timing_report(m.events)
    print(f"FPT {t.frame_seconds * 1e3:.3f} ms over {t.n_frames} frames")
    print(f"QT-1k {t.query_1k_seconds:.3f} s over {t.n_queries} queries")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpsdf", description="Incremental kernel-regression SDF mapping.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (1 = fully sequential)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="ray-cast a scene along a trajectory into frame files")
    s.add_argument("--scene", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="override the trajectory noise seed")
    s.add_argument("--noise", type=float, default=None, help="override the axial noise coefficient")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build", help="integrate a frame directory into a map snapshot")
    s.add_argument("--frames", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help="snapshot path")
    s.add_argument("--report", default=None, help="per-frame update report path")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("query", help="query SDF values from a snapshot")
    s.add_argument("--snapshot", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--points", help="text file with one position per line")
    g.add_argument("--grid", help="lo:hi:res, e.g. --grid=-1,-1:1,1:0.1 (use = when lo is negative)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("mesh", help="export the global mesh as PLY")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", help="SDF or mesh metrics against ground truth")
    s.add_argument("kind", choices=("sdf", "mesh"))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True, help="scene file, query export (sdf) or PLY (mesh)")
    s.add_argument("--near", type=float, default=0.2, help="near-surface threshold (m)")
    s.add_argument("--delta", type=float, default=0.05, help="mesh distance threshold (m)")
    s.add_argument("--samples", type=int, default=50_000)
    s.add_argument("--gt-spacing", type=float, default=0.01, help="analytic surface sample spacing (m)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="key = value report path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time frame integration and 1k-query batches")
    s.add_argument("--frames", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--queries", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GpsdfError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
