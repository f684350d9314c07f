import csv
import filecmp
import json

import numpy as np
import pytest

from primgrasp.config import PipelineConfig, PipelineOptions
from primgrasp.errors import BundleError, FitFailedError, NoInstancesError
from primgrasp.families import antipodal_ok
from primgrasp.pipeline import (THREADS_ENV, benchmark, degrade, instance_seed, resolve_threads, run_pipeline,
                                voxel_downsample)
from primgrasp.synth import SceneConfig, generate_scene, save_scene

CFG = PipelineConfig()
RESTING = ("free_fall", "upright_on_table")


def single(kind, seed):
    return generate_scene(SceneConfig(classes=(kind,), modes=RESTING), np.random.default_rng(seed))


def run(scene, **kw):
    return run_pipeline(scene.depth, scene.class_labels, scene.instance_labels, CFG, scene.camera_pose, **kw)


# helpers ---------------------------------------------------------------------------

def test_resolve_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads() == 1
    assert resolve_threads(6) == 6
    assert resolve_threads(0) == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert resolve_threads() == 4
    assert resolve_threads(8) == 4
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    assert resolve_threads(3) == 3


def test_instance_seed():
    assert instance_seed(0, 1) == instance_seed(0, 1)
    assert len({instance_seed(s, i) for s in range(5) for i in range(1, 7)}) == 30


def test_voxel_downsample(rng):
    pts = rng.uniform(0, 0.05, (500, 3))
    out = voxel_downsample(pts, 0.01)
    seen, expect = set(), []
    for p in pts:
        k = tuple(int(v) for v in np.floor(p / 0.01))
        if k not in seen:
            seen.add(k)
            expect.append(p)
    assert np.array_equal(out, np.array(expect))
    assert voxel_downsample(pts, 0.0) is pts


def test_degrade_keeps_raster():
    scene = single("cylinder", 3)
    out = degrade(scene.depth, scene.instance_labels)
    assert out.data.shape == scene.depth.data.shape


# single-object scenes ---------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sphere_scene(seed):
    scene = single("sphere", 100 + seed)
    sel = run(scene).selected
    assert sel.candidate.family in ("SphereTop", "SphereSide")
    # weighting favours approaching from above
    assert np.degrees(np.arccos(-sel.candidate.approach[2])) <= 15.0
    assert antipodal_ok(sel.candidate, scene.shapes[0][1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stick_scene(seed):
    scene = single("stick", 200 + seed)
    sel = run(scene).selected
    assert sel.candidate.family == "StickSide"
    assert antipodal_ok(sel.candidate, scene.shapes[0][1])


def test_outputs_written(tmp_path):
    scene = single("cuboid", 5)
    res = run(scene, out_dir=tmp_path, ply=True)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"ranked.json", "fit_1.json", "timings.json", "scene.ply", "cloud_1.ply"} <= names
    ranked = json.loads((tmp_path / "ranked.json").read_text())
    assert len(ranked["ranked"]) == len(res.result.ranked)
    assert ranked["selected"] == res.result.selected
    timings = json.loads((tmp_path / "timings.json").read_text())
    assert {"backproject", "fit", "families", "rank", "total", "per_object"} <= set(timings)


def test_deterministic_across_threads(tmp_path):
    scene = generate_scene(SceneConfig(), np.random.default_rng(7))
    dirs = []
    for k, threads in enumerate((1, 4, 1)):
        d = tmp_path / f"run{k}"
        run(scene, out_dir=d, threads=threads)
        dirs.append(d)
    names = sorted(p.name for p in dirs[0].iterdir() if p.name != "timings.json")
    assert len(names) >= 2
    for d in dirs[1:]:
        assert all(filecmp.cmp(dirs[0] / n, d / n, shallow=False) for n in names)


# errors ------------------------------------------------------------------------------------

def test_no_instances():
    scene = single("sphere", 1)
    with pytest.raises(NoInstancesError):
        run_pipeline(scene.depth, scene.class_labels, np.zeros_like(scene.instance_labels), CFG,
                     scene.camera_pose)


def test_label_size_mismatch():
    scene = single("sphere", 1)
    with pytest.raises(ValueError):
        run_pipeline(scene.depth, scene.class_labels[:-1], scene.instance_labels, CFG, scene.camera_pose)


def test_all_fits_fail():
    scene = single("sphere", 1)
    cfg = PipelineConfig(pipeline=PipelineOptions(min_points=10**7))
    with pytest.raises(FitFailedError):
        run_pipeline(scene.depth, scene.class_labels, scene.instance_labels, cfg, scene.camera_pose)


# benchmark ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    cfg = SceneConfig(classes=("sphere", "cylinder", "cuboid"))
    for k in range(10):
        save_scene(root / f"scene_{k:02d}", generate_scene(cfg, np.random.default_rng(50 + k)))
    return root


def test_benchmark_clean(scene_dir, tmp_path):
    out = benchmark(scene_dir, CFG, tmp_path)
    rows = out["rows"]
    assert len(rows) == 10
    assert not [r for r in rows if r["status"] in ("fit_failure", "no_instances")]
    with open(tmp_path / "benchmark.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 10
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]
    assert summary["scenes"] == 10
    assert summary["median_param_error"] is not None


def test_benchmark_corrupted(scene_dir):
    out = benchmark(scene_dir, CFG, corrupted=True)
    assert len(out["rows"]) == 10
    assert out["summary"]["corrupted"] is True
    assert out["fit_errors"]


def test_benchmark_empty_dir(tmp_path):
    with pytest.raises(BundleError):
        benchmark(tmp_path, CFG)
    with pytest.raises(BundleError):
        benchmark(tmp_path / "missing", CFG)
