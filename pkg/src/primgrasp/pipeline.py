"""End-to-end pipeline: segmented depth -> shape fits -> grasp candidates -> ranked selection."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .depth import DepthImage, backproject, clip, corrupt, denoise
from .errors import (BundleError, DegenerateGeometryError, FitFailedError, InsufficientPointsError,
                     NoInstancesError)
from .families import candidates_for
from .fit import FitResult, classify_and_fit
from .geometry import PointCloud, Pose
from .metrics import shape_errors
from .rank import RankResult, rank_and_select, result_to_dict
from .serialize import shape_to_dict, write_json, write_ply
from .shapes import ShapeClass
from .synth import load_scene

log = logging.getLogger(__name__)

THREADS_ENV = "PRIMGRASP_THREADS"


def resolve_threads(requested=None) -> int:
    """Thread count from the argument, else the environment, else 1; never above the env cap."""
    env = os.environ.get(THREADS_ENV)
    cap = None
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    n = requested if requested is not None else (cap or 1)
    n = max(1, int(n))
    return min(n, cap) if cap else n


def instance_seed(seed: int, instance_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(instance_id)]).generate_state(1)[0])


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """First point (in input order) of every occupied voxel."""
    if voxel <= 0 or not len(points):
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    result: RankResult | None
    fits: dict  # instance id -> FitResult
    classes: dict  # instance id -> labelled ShapeClass
    failures: dict  # instance id -> message
    dropped: dict  # instance id -> dropped family tags
    timings: dict = field(default_factory=dict)
    clouds: dict = field(default_factory=dict)

    @property
    def selected(self):
        return None if self.result is None or self.result.selected is None else self.result.best

    def ranked_dict(self) -> dict:
        out = result_to_dict(self.result) if self.result is not None else {"ranked": [], "selected": None}
        out["fit_failures"] = {str(k): v for k, v in sorted(self.failures.items())}
        out["dropped_families"] = {str(k): list(v) for k, v in sorted(self.dropped.items())}
        return out


def fit_to_dict(instance_id: int, fit: FitResult) -> dict:
    return {"id": int(instance_id), "shape": shape_to_dict(fit.shape),
            "inlier_count": int(fit.inlier_count), "inlier_fraction": float(fit.inlier_fraction),
            "rms_residual": float(fit.rms_residual), "warnings": list(fit.warnings)}


def _instance_class(class_labels, mask) -> ShapeClass:
    vals = np.asarray(class_labels)[mask]
    vals = vals[vals > 0]
    if not len(vals):
        raise InsufficientPointsError("instance has no class label")
    counts = np.bincount(vals.astype(np.int64))
    return ShapeClass.from_label(int(np.argmax(counts)))


def run_pipeline(depth: DepthImage, class_labels, instance_labels, config: PipelineConfig,
                 camera_pose: Pose, out_dir=None, threads=None, ply: bool = False) -> PipelineResult:
    """Fit every labelled instance, pool their grasp candidates and rank them over the scene.

    Raises ``NoInstancesError`` when no instance is labelled and
    ``FitFailedError`` when every fit fails.  A run without a feasible
    grasp returns normally with ``result.selected`` set to None.  With
    ``out_dir`` it writes ``ranked.json``, ``fit_<id>.json``,
    ``timings.json`` and, with ``ply``, the clouds as PLY files.
    """
    threads = resolve_threads(threads)
    opts = config.pipeline
    inst = np.asarray(instance_labels)
    if inst.shape != depth.data.shape or np.asarray(class_labels).shape != depth.data.shape:
        raise ValueError("label rasters and depth image differ in size")
    timings = {}
    t0 = time.perf_counter()
    img = clip(depth, opts.clip_near, opts.clip_far)
    ids = [int(i) for i in np.unique(inst[img.valid]) if i > 0]
    if not ids:
        raise NoInstancesError("no labelled instance with valid depth")
    scene = backproject(img, camera_pose, labels=inst)
    clouds = {}
    for i in ids:
        clouds[i] = scene.subset(scene.labels == i)
    timings["backproject"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    classes, failures = {}, {}

    def fit_one(i):
        cloud = clouds[i]
        try:
            kind = _instance_class(class_labels, inst == i)
            if len(cloud) < opts.min_points:
                raise InsufficientPointsError(f"{len(cloud)} points < {opts.min_points}")
            params = replace(config.ransac, seed=instance_seed(config.seed, i))
            return kind, classify_and_fit(cloud, kind, params)
        except (FitFailedError, InsufficientPointsError, DegenerateGeometryError) as exc:
            return None, exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(fit_one, ids))
    else:
        outs = [fit_one(i) for i in ids]
    fits = {}
    for i, (kind, res) in zip(ids, outs):
        if isinstance(res, FitResult):
            fits[i] = res
            classes[i] = kind
        else:
            failures[i] = f"{type(res).__name__}: {res}"
    timings["fit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cands, dropped = [], {}
    for i in ids:
        if i not in fits:
            continue
        c, d = candidates_for(fits[i].shape, config.gripper, i, opts.small_object, opts.standoff)
        cands.extend(c)
        if d:
            dropped[i] = d
    timings["families"] = time.perf_counter() - t0

    result = None
    t0 = time.perf_counter()
    if not fits:
        out = PipelineResult(None, fits, classes, failures, dropped, timings, clouds)
        if out_dir is not None:
            _write_outputs(out_dir, out, scene, ply)
        raise FitFailedError("every instance fit failed: " + "; ".join(
            f"{k}: {v}" for k, v in sorted(failures.items())))
    if cands:
        scene_pts = voxel_downsample(scene.points, opts.voxel)
        result = rank_and_select(cands, {i: clouds[i] for i in fits}, scene_pts, config.gripper,
                                 config.weights, config.workspace,
                                 {i: f.shape for i, f in fits.items()}, opts.table_height,
                                 opts.reference_quat, threads, opts.normalize_pool)
    else:
        result = RankResult((), None)
    timings["rank"] = time.perf_counter() - t0
    timings["total"] = sum(timings.values())
    timings["per_object"] = timings["total"] / len(ids)
    out = PipelineResult(result, fits, classes, failures, dropped, timings, clouds)
    if out_dir is not None:
        _write_outputs(out_dir, out, scene, ply)
    return out


def _write_outputs(out_dir, res: PipelineResult, scene: PointCloud, ply: bool) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "ranked.json", res.ranked_dict())
    for i, fit in sorted(res.fits.items()):
        write_json(d / f"fit_{i}.json", fit_to_dict(i, fit))
    write_json(d / "timings.json", res.timings)
    if ply:
        write_ply(d / "scene.ply", scene)
        for i, cloud in sorted(res.clouds.items()):
            write_ply(d / f"cloud_{i}.ply", cloud)


def degrade(depth: DepthImage, instance_labels, frames: int = 1) -> DepthImage:
    """Boundary corruption followed by the denoising chain."""
    bad = corrupt(depth, instance_labels)
    return denoise([bad] * frames)


BENCH_FIELDS = ("scene", "status", "instances", "fitted", "selected_family", "selected_shape",
                "gamma", "median_param_error", "max_param_error", "median_axis_error_deg",
                "t_fit", "t_rank", "t_total", "t_per_object")


def scene_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise BundleError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "depth.pgm").exists())
    if not dirs:
        raise BundleError(f"{root} holds no scene bundles")
    return dirs


def benchmark(scene_dir, config: PipelineConfig, out_dir=None, threads=None,
              corrupted: bool = False) -> dict:
    """Run the pipeline over every bundle in ``scene_dir`` and summarize.

    Returns ``{"rows": [...], "fit_errors": [...], "summary": {...}}``;
    with ``out_dir`` also writes ``benchmark.csv`` and ``summary.json``.
    """
    rows, errors = [], []
    for d in scene_dirs(scene_dir):
        scene = load_scene(d)
        depth = degrade(scene.depth, scene.instance_labels) if corrupted else scene.depth
        row = {"scene": d.name}
        try:
            res = run_pipeline(depth, scene.class_labels, scene.instance_labels, config,
                               scene.camera_pose, threads=threads)
            row["status"] = "ok" if res.selected is not None else "no_feasible_grasp"
        except FitFailedError as exc:
            row.update(status="fit_failure", instances="", fitted=0)
            log.info("%s: %s", d.name, exc)
            rows.append(row)
            continue
        except NoInstancesError:
            row.update(status="no_instances", instances=0, fitted=0)
            rows.append(row)
            continue
        truth = dict(scene.shapes)
        perr, aerr = [], []
        for i, fit in sorted(res.fits.items()):
            if i in truth and truth[i].kind == fit.shape.kind:
                pe, ae = shape_errors(truth[i], fit.shape)
                perr.append(pe)
                aerr.append(ae)
                errors.append({"scene": d.name, "id": i, "class": fit.shape.kind.value,
                               "param_error": pe, "axis_error_deg": ae})
            elif i in truth:
                errors.append({"scene": d.name, "id": i, "class": truth[i].kind.value,
                               "param_error": None, "axis_error_deg": None,
                               "fitted_as": fit.shape.kind.value})
        sel = res.selected
        row.update(instances=len(res.clouds), fitted=len(res.fits),
                   selected_family=sel.candidate.family if sel else "",
                   selected_shape=sel.candidate.shape_id if sel else "",
                   gamma=sel.gamma if sel else "",
                   median_param_error=float(np.median(perr)) if perr else "",
                   max_param_error=max(perr) if perr else "",
                   median_axis_error_deg=float(np.median(aerr)) if aerr else "",
                   t_fit=res.timings["fit"], t_rank=res.timings["rank"],
                   t_total=res.timings["total"], t_per_object=res.timings["per_object"])
        rows.append(row)
    pe = [e["param_error"] for e in errors if e["param_error"] is not None]
    ae = [e["axis_error_deg"] for e in errors if e["axis_error_deg"] is not None]
    tot = [r["t_total"] for r in rows if "t_total" in r]
    summary = {"scenes": len(rows),
               "status_counts": {s: sum(r["status"] == s for r in rows)
                                 for s in sorted({r["status"] for r in rows})},
               "fits": len(errors),
               "misclassified": sum(e["param_error"] is None for e in errors),
               "median_param_error": float(np.median(pe)) if pe else None,
               "p90_param_error": float(np.percentile(pe, 90)) if pe else None,
               "median_axis_error_deg": float(np.median(ae)) if ae else None,
               "mean_time_per_scene": float(np.mean(tot)) if tot else None,
               "corrupted": corrupted}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "benchmark.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, restval="")
            w.writeheader()
            w.writerows(rows)
        write_json(out / "summary.json", {"summary": summary, "fit_errors": errors})
    return {"rows": rows, "fit_errors": errors, "summary": summary}
