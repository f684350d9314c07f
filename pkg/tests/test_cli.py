import json

import numpy as np
import pytest

from primgrasp.cli import EXIT_FIT, EXIT_IO, EXIT_NO_GRASP, EXIT_OK, main
from primgrasp.families import candidate_to_dict, candidates_for
from primgrasp.geometry import PointCloud
from primgrasp.serialize import write_ply
from primgrasp.synth import SceneConfig, generate_scene, load_scene, partial_cloud, save_scene


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle") / "scene_0000"
    cfg = SceneConfig(classes=("sphere", "stick"), modes=("free_fall", "upright_on_table"))
    save_scene(d, generate_scene(cfg, np.random.default_rng(11)))
    return d


def config(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return str(p)


def test_synth(tmp_path):
    out = tmp_path / "scenes"
    assert main(["synth", "--count", "2", "--seed", "4", "--out", str(out), "--elevation", "60"]) == EXIT_OK
    dirs = sorted(out.iterdir())
    assert [d.name for d in dirs] == ["scene_0000", "scene_0001"]
    assert load_scene(dirs[0]).config["elevation_deg"] == 60.0


def test_pipeline_ok(scene, tmp_path):
    assert main(["pipeline", "--scene", str(scene), "--out", str(tmp_path), "--threads", "2"]) == EXIT_OK
    ranked = json.loads((tmp_path / "ranked.json").read_text())
    assert ranked["selected"] is not None


def test_pipeline_corrupt(scene, tmp_path):
    assert main(["pipeline", "--scene", str(scene), "--out", str(tmp_path), "--corrupt"]) == EXIT_OK


def test_pipeline_no_feasible(scene, tmp_path):
    cfg = config(tmp_path, "workspace.lo = [5.0, 5.0, 5.0]\nworkspace.hi = [6.0, 6.0, 6.0]\n")
    assert main(["pipeline", "--scene", str(scene), "--out", str(tmp_path / "o"), "--config", cfg]) == EXIT_NO_GRASP


def test_pipeline_fit_failure(scene, tmp_path):
    cfg = config(tmp_path, "pipeline.min_points = 10000000\n")
    assert main(["pipeline", "--scene", str(scene), "--out", str(tmp_path / "o"), "--config", cfg]) == EXIT_FIT


def test_pipeline_io_errors(scene, tmp_path):
    assert main(["pipeline", "--scene", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_IO
    bad = config(tmp_path, "gripper.no_such_key = 1\n")
    assert main(["pipeline", "--scene", str(scene), "--out", str(tmp_path), "--config", bad]) == EXIT_IO


def test_pipeline_no_instances(scene, tmp_path):
    s = load_scene(scene)
    empty = type(s)(s.depth, s.class_labels, np.zeros_like(s.instance_labels), s.shapes, s.camera_pose)
    save_scene(tmp_path / "empty", empty)
    assert main(["pipeline", "--scene", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_fit(tmp_path):
    truth, cloud = partial_cloud("cylinder", 3)
    write_ply(tmp_path / "c.ply", cloud)
    out = tmp_path / "fit.json"
    vp = [str(v) for v in cloud.viewpoint]
    assert main(["fit", "--cloud", str(tmp_path / "c.ply"), "--class", "cylinder", "--viewpoint", *vp,
                 "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["shape"]["class"] == "cylinder"
    write_ply(tmp_path / "tiny.ply", PointCloud(cloud.points[:2], "world"))
    assert main(["fit", "--cloud", str(tmp_path / "tiny.ply"), "--class", "sphere",
                 "--out", str(out)]) == EXIT_FIT


def _rank_inputs(tmp_path, closing_dim=None):
    truth, cloud = partial_cloud("sphere", 2, outlier_fraction=0.0)
    cands, _ = candidates_for(truth)
    items = [candidate_to_dict(c) for c in cands]
    if closing_dim is not None:
        for d in items:
            d["closing_dim"] = closing_dim
    (tmp_path / "c.json").write_text(json.dumps({"candidates": items}))
    write_ply(tmp_path / "scene.ply", cloud)
    return ["rank", "--candidates", str(tmp_path / "c.json"), "--cloud", str(tmp_path / "scene.ply"),
            "--out", str(tmp_path / "ranked.json")]


def test_rank(tmp_path):
    assert main(_rank_inputs(tmp_path)) == EXIT_OK
    ranked = json.loads((tmp_path / "ranked.json").read_text())
    assert ranked["ranked"][0]["rank"] == 1


def test_rank_all_gated(tmp_path):
    assert main(_rank_inputs(tmp_path, closing_dim=0.5)) == EXIT_NO_GRASP


def test_rank_bad_candidates(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"candidates": [{"family": "Nope"}]}))
    write_ply(tmp_path / "s.ply", PointCloud(np.zeros((3, 3)), "world"))
    assert main(["rank", "--candidates", str(tmp_path / "c.json"), "--cloud", str(tmp_path / "s.ply"),
                 "--out", str(tmp_path / "r.json")]) == EXIT_IO


def test_benchmark(scene, tmp_path):
    assert main(["benchmark", "--scenes", str(scene.parent), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "benchmark.csv").exists()
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["benchmark", "--scenes", str(empty), "--out", str(tmp_path)]) == EXIT_IO


def test_eval_seg(scene, tmp_path):
    out = tmp_path / "report.json"
    assert main(["eval-seg", "--pred", str(scene.parent), "--truth", str(scene.parent),
                 "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["All"] == 1.0
    assert set(report) == {"Sphere", "Stick", "All"}
    assert main(["eval-seg", "--pred", str(tmp_path / "x"), "--truth", str(scene.parent),
                 "--out", str(out)]) == EXIT_IO


def test_eval_trials(tmp_path, capsys):
    p = tmp_path / "trials.csv"
    p.write_text("object,successes,attempts\nCylinder,59,60\nRing,93,100\n")
    out = tmp_path / "ci.json"
    assert main(["eval-trials", "--trials", str(p), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "98.3 +/- 3.2" in text and "93.0 +/- 5.0" in text
    rows = json.loads(out.read_text())["rows"]
    assert rows[-1]["object"] == "All" and rows[-1]["attempts"] == 160
    p.write_text("object,successes,attempts\nCylinder,61,60\n")
    assert main(["eval-trials", "--trials", str(p)]) == EXIT_IO
    assert main(["eval-trials", "--trials", str(tmp_path / "none.csv")]) == EXIT_IO


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
