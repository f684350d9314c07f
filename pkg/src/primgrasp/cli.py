"""Command-line entry point: ``primgrasp <subcommand> ...``.

Exit codes: 0 ok, 2 no feasible grasp, 3 fit failure, 4 input/output or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .depth import load_labels
from .errors import (BundleError, ConfigError, DegenerateGeometryError, FitFailedError,
                     InsufficientPointsError, NoFeasibleGraspError, NoInstancesError, PlacementError)
from .families import candidate_from_dict
from .fit import ransac_fit
from .geometry import PointCloud
from .metrics import format_report, per_class_report, success_ci
from .pipeline import benchmark, degrade, fit_to_dict, resolve_threads, run_pipeline
from .rank import rank_and_select, result_to_dict
from .serialize import read_json, read_ply, write_json
from .shapes import ShapeClass
from .synth import generate_scenes, save_scene

EXIT_OK = 0
EXIT_NO_GRASP = 2
EXIT_FIT = 3
EXIT_IO = 4

log = logging.getLogger("primgrasp")


def cmd_synth(args, cfg):
    synth = cfg.synth
    if args.elevation is not None:
        synth = replace(synth, elevation_deg=args.elevation)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    for k, scene in enumerate(generate_scenes(synth, args.count, seed)):
        save_scene(out / f"scene_{k:04d}", scene)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_fit(args, cfg):
    cloud = read_ply(args.cloud)
    if args.viewpoint is not None:
        cloud = PointCloud(cloud.points, cloud.frame, None, args.viewpoint)
    params = cfg.ransac if args.seed is None else replace(cfg.ransac, seed=args.seed)
    res = ransac_fit(cloud, ShapeClass.parse(args.shape_class), params)
    write_json(args.out, fit_to_dict(0, res))
    print(f"{res.shape.kind.value}: inliers {res.inlier_fraction:.3f}, rms {res.rms_residual * 1000:.2f} mm")
    return EXIT_OK


def _load_candidates(path):
    data = read_json(path)
    items = data.get("candidates", data.get("ranked")) if isinstance(data, dict) else data
    if not isinstance(items, list):
        raise BundleError(f"{path}: expected a candidate list")
    try:
        return [candidate_from_dict(c.get("candidate", c)) for c in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{path}: bad candidate ({exc})") from exc


def cmd_rank(args, cfg):
    cands = _load_candidates(args.candidates)
    if not cands:
        raise BundleError(f"{args.candidates}: no candidates")
    cloud = read_ply(args.cloud)
    opts = cfg.pipeline
    # without per-object clouds the scene cloud stands in for every target
    res = rank_and_select(cands, cloud.points, cloud.points, cfg.gripper, cfg.weights, cfg.workspace,
                          None, opts.table_height, opts.reference_quat, resolve_threads(args.threads),
                          opts.normalize_pool)
    write_json(args.out, result_to_dict(res))
    if res.selected is None:
        print("no feasible grasp", file=sys.stderr)
        return EXIT_NO_GRASP
    best = res.best
    print(f"selected rank {best.rank}: {best.candidate.family} gamma {best.gamma:.4f}")
    return EXIT_OK


def cmd_pipeline(args, cfg):
    from .synth import load_scene

    scene = load_scene(args.scene)
    depth = degrade(scene.depth, scene.instance_labels) if args.corrupt else scene.depth
    res = run_pipeline(depth, scene.class_labels, scene.instance_labels, cfg, scene.camera_pose,
                       out_dir=args.out, threads=args.threads, ply=args.ply)
    t = res.timings
    print(f"{len(res.fits)} fitted, {len(res.failures)} failed; "
          f"{t['total']:.2f} s total, {t['per_object']:.2f} s per object")
    if res.selected is None:
        print("no feasible grasp", file=sys.stderr)
        return EXIT_NO_GRASP
    sel = res.selected
    print(f"selected shape {sel.candidate.shape_id} {sel.candidate.family} gamma {sel.gamma:.4f}")
    return EXIT_OK


def cmd_benchmark(args, cfg):
    out = benchmark(args.scenes, cfg, args.out, args.threads, args.corrupt)
    s = out["summary"]
    print(f"{s['scenes']} scenes: " + ", ".join(f"{k} {v}" for k, v in s["status_counts"].items()))
    if s["median_param_error"] is not None:
        print(f"median parameter error {100 * s['median_param_error']:.2f}%, "
              f"median axis error {s['median_axis_error_deg']:.2f} deg")
    return EXIT_OK


def _label_files(root: Path) -> list:
    files = sorted(root.rglob("class.pgm"))
    return files or sorted(root.glob("*.pgm"))


def cmd_eval_seg(args, cfg):
    pred_root, truth_root = Path(args.pred), Path(args.truth)
    for d in (pred_root, truth_root):
        if not d.is_dir():
            raise BundleError(f"{d} is not a directory")
    truth_files = _label_files(truth_root)
    if not truth_files:
        raise BundleError(f"{truth_root} holds no label rasters")
    pairs = []
    for tf in truth_files:
        rel = tf.relative_to(truth_root)
        pf = pred_root / rel
        if not pf.exists():
            raise BundleError(f"prediction {pf} missing")
        truth, pred = load_labels(tf), load_labels(pf)
        if truth.shape != pred.shape:
            raise BundleError(f"{rel}: raster sizes differ")
        present = sorted((set(np.unique(truth)) | set(np.unique(pred))) - {0})
        for lab in present:
            name = ShapeClass.from_label(int(lab)).title
            pairs.append((name, (pred == lab).astype(float), truth == lab))
    if not pairs:
        raise BundleError("no labelled pixels in predictions or truth")
    report = per_class_report(pairs, beta=args.beta)
    write_json(args.out, report)
    print(format_report(report), end="")
    return EXIT_OK


def cmd_eval_trials(args, cfg):
    try:
        with open(args.trials, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise BundleError(f"cannot read {args.trials}: {exc}") from exc
    out, tot_s, tot_n = [], 0, 0
    for r in rows:
        try:
            s, n = int(r["successes"]), int(r["attempts"])
            name = r["object"]
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"{args.trials}: bad row {r} ({exc})") from exc
        rate, half = success_ci(s, n, args.method)
        out.append({"object": name, "successes": s, "attempts": n, "rate": rate, "ci": half})
        tot_s += s
        tot_n += n
    if not out:
        raise BundleError(f"{args.trials}: no trials")
    rate, half = success_ci(tot_s, tot_n, args.method)
    out.append({"object": "All", "successes": tot_s, "attempts": tot_n, "rate": rate, "ci": half})
    for r in out:
        print(f"{r['object']:>16}: {r['rate']:.1f} +/- {r['ci']:.1f} ({r['successes']}/{r['attempts']})")
    if args.out:
        write_json(args.out, {"method": args.method, "rows": out})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="primgrasp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat dotted TOML config file")
        return sp

    sp = common(sub.add_parser("synth", help="generate labelled scenes"))
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--elevation", type=float, help="principal camera elevation, degrees")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("fit", help="fit one shape class to a PLY cloud"))
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--class", dest="shape_class", required=True)
    sp.add_argument("--viewpoint", type=float, nargs=3, help="sensor origin in the cloud frame")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("rank", help="rank grasp candidates against a scene cloud"))
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_rank)

    sp = common(sub.add_parser("pipeline", help="run the full pipeline on a scene bundle"))
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--ply", action="store_true", help="also dump clouds as PLY")
    sp.add_argument("--corrupt", action="store_true", help="corrupt then denoise the depth first")
    sp.set_defaults(func=cmd_pipeline)

    sp = common(sub.add_parser("benchmark", help="run the pipeline over a directory of bundles"))
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--corrupt", action="store_true")
    sp.set_defaults(func=cmd_benchmark)

    sp = common(sub.add_parser("eval-seg", help="weighted F-measure of class label rasters"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.set_defaults(func=cmd_eval_seg)

    sp = common(sub.add_parser("eval-trials", help="success rates with confidence intervals"))
    sp.add_argument("--trials", required=True, help="CSV with object,successes,attempts")
    sp.add_argument("--out")
    sp.add_argument("--method", choices=("wald", "exact"), default="wald")
    sp.set_defaults(func=cmd_eval_trials)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except NoFeasibleGraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_GRASP
    except (FitFailedError, InsufficientPointsError, DegenerateGeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ConfigError, BundleError, NoInstancesError, PlacementError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
