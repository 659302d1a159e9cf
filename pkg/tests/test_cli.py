"""End-to-end command-line contract: flags, exit codes, artifacts."""

import json

import numpy as np
import pytest

from mapfm.cli import main
from mapfm.core import MapClass, MapElement, ScoredMap, VectorMap, map_to_dict
from mapfm.scenes import dataset_digest

SCENE_TOML = """\
[grid]
rows = 30
cols = 15
x_range = [-30.0, 30.0]
y_range = [-15.0, 15.0]
resolution = 2.0

[rig]
num_cameras = 2
image_size = [32, 64]
focal_px = 32.0
"""

TRAIN_TOML = """\
learning_rate = 0.002
steps = 3
seed = 5
holdout_fraction = 0.25

[grid]
rows = 30
cols = 15
x_range = [-30.0, 30.0]
y_range = [-15.0, 15.0]
resolution = 2.0

[backbone]
embed_dim = 8
num_blocks = 2
num_heads = 2

[bev]
bev_channels = 8
num_heads = 2

[decoder]
num_instances = 6
points_per_element = 4
num_layers = 1
num_heads = 2
channels = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    (ws / "scene.toml").write_text(SCENE_TOML)
    (ws / "train.toml").write_text(TRAIN_TOML)
    code = main(
        ["gen", "--seed", "3", "--num-scenes", "4",
         "--config", str(ws / "scene.toml"), "--out", str(ws / "data")]
    )
    assert code == 0
    return ws


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1  # missing --data
    assert main(["gen", "--num-scenes", "2", "--out", str(tmp_path), "--bogus"]) == 1
    assert main(["gen", "--num-scenes", "0", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err
    assert "--num-scenes must be at least 1" in err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "gen" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    assert "--data" in capsys.readouterr().out


def test_gen_writes_manifest_and_summary(workspace, capsys):
    assert (workspace / "data" / "manifest.json").exists()
    assert (workspace / "data" / "scene_3" / "gt_map.json").exists()
    code = main(
        ["gen", "--seed", "3", "--num-scenes", "2",
         "--config", str(workspace / "scene.toml"), "--out", str(workspace / "data2")]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["num_scenes"] == 2
    assert summary["dataset_sha256"] == dataset_digest(workspace / "data2")


def test_gen_reproducible(workspace, tmp_path):
    args = ["gen", "--seed", "9", "--num-scenes", "2", "--config", str(workspace / "scene.toml")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")


def test_train_and_plot_pipeline(workspace, capsys):
    run = workspace / "run"
    code = main(
        ["train", "--config", str(workspace / "train.toml"),
         "--data", str(workspace / "data"), "--out", str(run)]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "mAP" in out
    assert (run / "metrics.jsonl").exists()
    assert (run / "eval_final.json").exists()
    summary = json.loads((run / "train_summary.json").read_text())
    assert summary["steps"] == 3
    assert summary["dataset_sha256"] == dataset_digest(workspace / "data")
    assert summary["eval_indices"] == [3]  # last 25% of 4 scenes

    plot_out = workspace / "plots"
    code = main(["plot", "--metrics", str(run / "metrics.jsonl"), "--out", str(plot_out)])
    assert code == 0
    assert (plot_out / "loss_curves.svg").exists()
    assert (plot_out / "loss_data.json").exists()
    # eval_final.json sits next to the metrics, so AP bars come along
    assert (plot_out / "ap_bars.svg").exists()


def test_train_grid_mismatch_exit_2(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(TRAIN_TOML.replace("rows = 30", "rows = 16", 1))
    code = main(
        ["train", "--config", str(bad), "--data", str(workspace / "data"),
         "--out", str(tmp_path / "run")]
    )
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_eval_identity_scores_full_marks(tmp_path, capsys):
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [10.0, 2.0]])
    elem = MapElement(MapClass.DIVIDER, pts)
    (tmp_path / "g.json").write_text(json.dumps({"samples": [map_to_dict(VectorMap([elem]))]}))
    (tmp_path / "p.json").write_text(
        json.dumps({"samples": [map_to_dict(ScoredMap([(elem, 1.0)]))]})
    )
    code = main(
        ["eval", "--pred", str(tmp_path / "p.json"), "--gt", str(tmp_path / "g.json"),
         "--out", str(tmp_path / "ev")]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "mAP 1.000" in out
    assert "AP_div" in out
    report = json.loads((tmp_path / "ev" / "eval_report.json").read_text())
    assert report["map"] == 1.0


def test_eval_sample_mismatch_exit_2(tmp_path, capsys):
    pts = np.array([[0.0, 0.0], [5.0, 0.0]])
    elem = MapElement(MapClass.DIVIDER, pts)
    one = {"samples": [map_to_dict(VectorMap([elem]))]}
    two = {"samples": [map_to_dict(ScoredMap([(elem, 1.0)]))] * 2}
    (tmp_path / "g.json").write_text(json.dumps(one))
    (tmp_path / "p.json").write_text(json.dumps(two))
    assert main(["eval", "--pred", str(tmp_path / "p.json"), "--gt", str(tmp_path / "g.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_eval_custom_thresholds(tmp_path, capsys):
    pts = np.array([[0.0, 0.0], [5.0, 1.0]])
    elem = MapElement(MapClass.BOUNDARY, pts)
    (tmp_path / "g.json").write_text(json.dumps(map_to_dict(VectorMap([elem]))))
    (tmp_path / "p.json").write_text(json.dumps(map_to_dict(ScoredMap([(elem, 0.9)]))))
    code = main(
        ["eval", "--pred", str(tmp_path / "p.json"), "--gt", str(tmp_path / "g.json"),
         "--thresholds", "0.2,0.4", "--out", str(tmp_path / "r.json")]
    )
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert set(report["ap"]["boundary"]) == {"0.2", "0.4"}
    capsys.readouterr()


def test_ablate_cli(workspace, tmp_path, capsys):
    code = main(
        ["ablate", "--variant", "arss_on_off", "--config", str(workspace / "train.toml"),
         "--data", str(workspace / "data"), "--out", str(tmp_path / "ab")]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "arss_on" in out and "arss_off" in out
    table = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert table["variant"] == "arss_on_off"
    assert "delta_map" in table


def test_bad_threads_env_exit_2(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MAPFM_THREADS", "many")
    code = main(["plot", "--metrics", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)])
    assert code == 2
    assert "MAPFM_THREADS" in capsys.readouterr().err


def test_plot_missing_metrics_exit_2(tmp_path, capsys):
    assert main(["plot", "--metrics", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
    capsys.readouterr()
