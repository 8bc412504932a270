import json
import subprocess
import sys

import numpy as np
import pytest

from hsissl.cli import main
from hsissl.hsicore import LabelMap, read_cube, read_labels, write_labels

SMALL = ["--set", "scene.height=20", "--set", "scene.width=20", "--set", "scene.bands=5",
         "--set", "scene.num_classes=3", "--set", "scene.region_granularity=150",
         "--set", "model.patch_size=3", "--set", "model.hidden=8", "--set", "easlp.per_class=20",
         "--set", "easlp.eps=20", "--set", "labels_per_class=5", "--set", "dhp.l_min=2",
         "--set", "dhp.l_max=6"]


def run(*args):
    return main([str(a) for a in args])


def test_gen_scene_round_trip(tmp_path):
    assert run("gen-scene", "--out", tmp_path, *SMALL) == 0
    cube = read_cube(tmp_path / "scene.hsi")
    truth = read_labels(tmp_path / "truth.lab")
    train = read_labels(tmp_path / "train.lab")
    assert (cube.height, cube.width, cube.bands) == (20, 20, 5)
    assert cube.data.min() == 0 and cube.data.max() == 1
    assert np.array_equal(np.bincount(train.labels.ravel())[1:], [5, 5, 5])
    assert np.all(truth.labels[train.labels > 0] == train.labels[train.labels > 0])
    run_json = json.loads((tmp_path / "run.json").read_text())
    assert run_json["command"] == "gen-scene" and run_json["config"]["scene"]["height"] == 20


def test_gen_scene_seed_determinism(tmp_path):
    for name in ("a", "b", "c"):
        (tmp_path / name).mkdir()
    run("gen-scene", "--out", tmp_path / "a", "--seed", 7, *SMALL)
    run("gen-scene", "--out", tmp_path / "b", "--seed", 7, *SMALL)
    run("gen-scene", "--out", tmp_path / "c", "--seed", 8, *SMALL)
    for f in ("scene.hsi", "truth.lab", "train.lab"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "scene.hsi").read_bytes() != (tmp_path / "c" / "scene.hsi").read_bytes()


def test_missing_output_dir_fails(tmp_path, capsys):
    assert run("gen-scene", "--out", tmp_path / "nope") != 0
    assert "does not exist" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("epochs: 5\ndhp:\n  alpha_max: 2\n")
    assert run("train", "--out", tmp_path, "--config", tmp_path / "c.yaml") != 0
    assert "c.yaml:3" in capsys.readouterr().err


def test_train_smoke_and_rerun_from_run_json(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run("train", "--out", a, "--repeats", 1, "--epochs", 5, "--dump-dhp", *SMALL) == 0
    for f in ("run.json", "metrics.json", "log_00.csv", "dhp_00.csv", "checkpoint/params.bin",
              "checkpoint/manifest.json"):
        assert (a / f).exists(), f
    m = json.loads((a / "metrics.json").read_text())
    assert 0 <= m["oa"] <= 1 and m["repeats"] == 1 and len(m["per_repeat_oa"]) == 1
    assert len((a / "log_00.csv").read_text().splitlines()) == 6
    # the run record alone reproduces the run bit for bit
    assert run("train", "--out", b, "--config", a / "run.json") == 0
    for f in ("metrics.json", "log_00.csv", "checkpoint/params.bin"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_train_ablate_flag(tmp_path):
    assert run("train", "--out", tmp_path, "--epochs", 2, "--ablate", "no-dhp", *SMALL) == 0
    cfg = json.loads((tmp_path / "run.json").read_text())["config"]
    assert cfg["ablation"] == {"easlp": True, "dhp": False, "atsc": True, "unlabeled": True}
    with open(tmp_path / "log_00.csv") as fh:
        rows = fh.read().splitlines()
    alpha_col = rows[0].split(",").index("alpha_t")
    assert all(float(r.split(",")[alpha_col]) == 0.0 for r in rows[1:])


def test_ablate_command(tmp_path):
    assert run("ablate", "--out", tmp_path, "--epochs", 2, "--repeats", 2,
               "--variants", "full,no-atsc,supervised", *SMALL) == 0
    summary = json.loads((tmp_path / "ablation.json").read_text())
    assert set(summary) == {"full", "no-atsc", "supervised"}
    assert 0 <= summary["supervised"]["full_wins"] <= 2
    assert (tmp_path / "no-atsc" / "metrics.json").exists()
    assert run("ablate", "--out", tmp_path, "--variants", "bogus") != 0


def test_sweep_grid_shape(tmp_path):
    assert run("sweep", "--out", tmp_path, "--epochs", 2, "--sweep", "alpha-max",
               "0.2,0.3,0.4,0.5,0.6", *SMALL) == 0
    s = json.loads((tmp_path / "sweep.json").read_text())
    assert s["key"] == "dhp.alpha_max"
    assert [r["value"] for r in s["results"]] == [0.2, 0.3, 0.4, 0.5, 0.6]
    cfg = json.loads((tmp_path / "alpha-max=0.3" / "run.json").read_text())["config"]
    assert cfg["dhp"]["alpha_max"] == 0.3 and cfg["dhp"]["alpha_min"] == 0.1
    assert run("sweep", "--out", tmp_path, "--sweep", "nothing", "1") != 0


def test_easlp_command_stages(tmp_path):
    scene = tmp_path / "scene"
    scene.mkdir()
    run("gen-scene", "--out", scene, *SMALL, "--set", "scene.noise_sigma=0")
    assert run("easlp", "--out", tmp_path, "--cube", scene / "scene.hsi", "--labels",
               scene / "train.lab", "--truth", scene / "truth.lab", "--dump-easlp-stages",
               *SMALL) == 0
    for f in ("stage1.lab", "stage2.lab", "provenance.lab", "pseudo.lab"):
        assert read_labels(tmp_path / f).labels.shape == (20, 20)
    rep = json.loads((tmp_path / "easlp.json").read_text())
    assert rep["stage1_accuracy"] == 1.0
    assert sum(rep["provenance_counts"].values()) == rep["num_regions"]


def test_easlp_reference_scene_is_exact(tmp_path):
    # default scene with zero noise
    assert run("easlp", "--out", tmp_path, "--set", "scene.noise_sigma=0") == 0
    rep = json.loads((tmp_path / "easlp.json").read_text())
    assert rep["stage2_accuracy"] == 1.0


def test_easlp_without_labels_fails(tmp_path, capsys):
    scene = tmp_path / "scene"
    scene.mkdir()
    run("gen-scene", "--out", scene, *SMALL)
    write_labels(LabelMap(np.zeros((20, 20), dtype=np.uint16)), tmp_path / "empty.lab")
    assert run("easlp", "--out", tmp_path, "--cube", scene / "scene.hsi",
               "--labels", tmp_path / "empty.lab") != 0
    assert "no labeled pixels" in capsys.readouterr().err


def test_eval_command(tmp_path):
    scene, train = tmp_path / "scene", tmp_path / "train"
    scene.mkdir()
    train.mkdir()
    run("gen-scene", "--out", scene, *SMALL)
    run("train", "--out", train, "--epochs", 3, *SMALL)
    assert run("eval", "--out", tmp_path, "--checkpoint", train / "checkpoint",
               "--cube", scene / "scene.hsi", "--labels", scene / "truth.lab") == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert 0 <= m["oa"] <= 1 and len(m["confusion"]) == 3


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hsissl.cli", "gen-scene", "--out", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "error" in r.stderr
    r = subprocess.run([sys.executable, "-m", "hsissl.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
