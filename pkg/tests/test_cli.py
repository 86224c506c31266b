import json
import os

import numpy as np
import pytest

from advcompose.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from advcompose.classifier import evaluate, load_checkpoint
from advcompose.imagecore import load_ppm, save_ppm, synth_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    cfg = d / "train.json"
    cfg.write_text(json.dumps({"epochs": 3}))
    path = d / "net.ckpt"
    assert run("train", "--count", 30, "--config", cfg, "--out", path) == EXIT_OK
    return path


def test_train_outputs(ckpt):
    assert ckpt.exists()
    log = (ckpt.parent / "net.ckpt.log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,train_accuracy" and len(log) == 4
    manifest = json.loads((ckpt.parent / "net.ckpt.manifest.json").read_text())
    assert manifest["subcommand"] == "train" and manifest["schema_version"] == 1


def test_missing_data_is_exit_3(tmp_path):
    assert run("train", "--data", f"cifar:{tmp_path}/nope.bin", "--out", tmp_path / "n.ckpt") == EXIT_DATA


def test_missing_checkpoint_is_exit_3(tmp_path):
    assert run("matrix", "--defenses", tmp_path / "nope.ckpt", "--out", tmp_path / "m.csv") == EXIT_DATA


def test_bad_configs_are_exit_2(ckpt, tmp_path):
    assert run("sweep", "--defense", ckpt, "--delta-grid", "", "--flow-grid", "0.5", "--out", tmp_path) == EXIT_CONFIG
    assert run("sweep", "--defense", ckpt, "--delta-grid", "4,2", "--flow-grid", "0.5", "--out", tmp_path) == EXIT_CONFIG
    assert run("matrix", "--defenses", ckpt, "--attacks", "nope", "--out", tmp_path / "m.csv") == EXIT_CONFIG
    assert run("theorem", "--data", "synth", "--eps", "0", "--out", tmp_path / "t.json") == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        run("matrix")
    assert exc.value.code == EXIT_CONFIG


def test_matrix_and_replay(ckpt, tmp_path):
    out = tmp_path / "m.csv"
    code = run("matrix", "--defenses", ckpt, "--attacks", "identity,delta", "--count", 5,
               "--min-iterations", 5, "--max-iterations", 10, "--out", out)
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "defense,Ground,identity,delta"
    row = lines[1].split(",")
    assert row[0] == "net" and row[1] == row[2]
    assert len(lines) == 2 and len(row) - 1 == 2 + 1  # defenses x (attacks + Ground)
    assert (tmp_path / "m.defended.csv").exists() and (tmp_path / "m.metrics.csv").exists()
    again = tmp_path / "again"
    assert run("replay", tmp_path / "m.manifest.json", "--out-dir", again) == EXIT_OK
    for name in ("m.csv", "m.defended.csv", "m.metrics.csv"):
        assert (again / name).read_bytes() == (tmp_path / name).read_bytes()


def test_replay_rejects_changed_checkpoint(ckpt, tmp_path):
    copy = tmp_path / "net.ckpt"
    copy.write_bytes(ckpt.read_bytes())
    run("matrix", "--defenses", copy, "--attacks", "identity", "--count", 3, "--out", tmp_path / "m.csv")
    copy.write_bytes(ckpt.read_bytes() + b"\0")
    assert run("replay", tmp_path / "m.manifest.json", "--out-dir", tmp_path / "r") == EXIT_DATA


def test_sweep_outputs(ckpt, tmp_path):
    code = run("sweep", "--defense", ckpt, "--delta-grid", "0,2,4", "--flow-grid", "0,0.5", "--count", 4,
               "--min-iterations", 5, "--max-iterations", 10, "--out", tmp_path)
    assert code == EXIT_OK
    acc = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert acc[0] == "delta_255,flow_px,accuracy" and len(acc) == 7
    grid = np.array([float(line.split(",")[2]) for line in acc[1:]]).reshape(3, 2)
    assert np.all(np.diff(grid, axis=0) <= 0) and np.all(np.diff(grid, axis=1) <= 0)
    net = load_checkpoint(ckpt)
    assert grid[0, 0] == pytest.approx(evaluate(net, synth_dataset(2, 4))[0], abs=1e-6)
    origin = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
    assert origin[:3] == ["0", "0", "0"] and all(float(v) == 0.0 for v in origin[3:])
    assert load_ppm(tmp_path / "accuracy.pgm").shape == (1, 3, 2)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["results"]["heatmap_ranges"]) == {"accuracy", "lpips_style"}


def test_theorem_constant_image(tmp_path):
    img = tmp_path / "flat.ppm"
    save_ppm(np.full((3, 6, 6), 0.5), img)
    out = tmp_path / "cert.json"
    assert run("theorem", "--image", img, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["witness"] is None and doc["reason"] == "no high-contrast pixel"
    assert doc["disjointness_violations"] == 0
    scan = (tmp_path / "cert.scan.csv").read_text().splitlines()
    assert scan[0].startswith("# contrast scan") and "every_image_has_both=False" in scan[0]


def test_theorem_dataset(tmp_path):
    out = tmp_path / "t.json"
    assert run("theorem", "--data", "synth", "--count", 5, "--eps", 0.05, "--out", out) == EXIT_OK
    summary = json.loads(out.read_text())["summary"]
    assert summary["images"] == 15 and summary["verified"] == summary["certificates"] == 15


def test_attack_identity(ckpt, tmp_path):
    img = tmp_path / "x.ppm"
    save_ppm(np.random.default_rng(0).uniform(0, 1, (3, 16, 16)), img)
    out = tmp_path / "atk"
    assert run("attack", "--input", img, "--label", 0, "--ckpt", ckpt, "--attack", "identity", "--out", out) == EXIT_OK
    diff = load_ppm(out / "diff.ppm")
    assert np.allclose(diff, 128 / 255)
    doc = json.loads((out / "result.json").read_text())
    assert doc["attack"] == "identity" and doc["metrics"]["linf"] == 0.0
    assert np.max(np.abs(load_ppm(out / "perturbed.ppm") - load_ppm(img))) == 0.0
    assert doc["success"] == (doc["predicted"] != 0)
    assert run("attack", "--input", img, "--label", 7, "--ckpt", ckpt, "--attack", "identity",
               "--out", out) == EXIT_CONFIG


def test_gradcheck_cli(tmp_path, capsys):
    assert run("gradcheck", "--points", 3, "--out", tmp_path / "g.json") == EXIT_OK
    assert run("gradcheck", "--points", 3, "--corrupt", "losses.cw_f6") == EXIT_CHECK
    assert "losses.cw_f6" in capsys.readouterr().err
