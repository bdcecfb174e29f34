import json

import numpy as np
import pytest

from tomoheight.cli import main
from tomoheight.fileio import read_chm, read_cube, read_split


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps({"scene": {
        "seed": 3, "nx": 32, "ny": 32, "band": "L-mono",
        "pols": "HH+HV+VV", "noise_rel": 0.1}}))
    out = base / "scene"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    return base, out


def test_synth_outputs(scene_dir):
    base, out = scene_dir
    cube = read_cube(out / "cube.tcub")
    chm = read_chm(out / "chm.chm")
    assert (cube.nx, cube.ny, cube.nz) == (32, 32, 36)
    assert (chm.nx, chm.ny) == (32, 32)


def test_synth_deterministic(scene_dir, tmp_path):
    base, out = scene_dir
    cfg = base / "cfg.json"
    again = tmp_path / "again"
    assert main(["synth", "--config", str(cfg), "--out", str(again)]) == 0
    assert (again / "cube.tcub").read_bytes() == (out / "cube.tcub").read_bytes()
    assert (again / "chm.chm").read_bytes() == (out / "chm.chm").read_bytes()


def test_synth_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"scene": {"nx": 8, "ny": 8, "bogus": 1}}))
    code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")])
    assert code == 2
    assert "BadConfig" in capsys.readouterr().err


def test_split_and_exit_codes(scene_dir, tmp_path, capsys):
    _, scene = scene_dir
    smap = tmp_path / "q.smap"
    assert main(["split", "--scene", str(scene), "--strategy", "quadrant",
                 "--ratios", "0.5,0.25,0.25", "--out", str(smap)]) == 0
    a = read_split(smap)
    assert a.counts()[0] == 512  # two train quadrants

    bad = tmp_path / "bad.smap"
    code = main(["split", "--scene", str(scene), "--strategy", "quadrant",
                 "--ratios", "0.5,0.2,0.2", "--out", str(bad)])
    assert code == 2
    assert "BadSpec" in capsys.readouterr().err
    assert not bad.exists()  # partial outputs removed


def test_full_recipe(scene_dir, tmp_path, capsys):
    """synth -> split -> tabular -> train -> reconstruct -> report."""
    _, scene = scene_dir
    smap = tmp_path / "q.smap"
    assert main(["split", "--scene", str(scene), "--strategy", "quadrant",
                 "--ratios", "0.5,0.25,0.25", "--out", str(smap)]) == 0

    tab = tmp_path / "tab.csv"
    assert main(["tabular", "--scene", str(scene), "--split", str(smap),
                 "--include-xy", "false", "--seed", "1", "--out", str(tab)]) == 0
    lines = tab.read_text().strip().splitlines()
    assert lines[0].startswith("strategy,pol,include_xy,model")
    assert len(lines) == 2

    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene), "--split", str(smap),
                 "--model", "model2", "--collapse", "gap", "--W", "16",
                 "--base-width", "4", "--lr", "2e-3", "--batch-size", "2",
                 "--max-epochs", "2", "--patience", "2", "--stride", "8",
                 "--seed", "5", "--out", str(run)]) == 0
    for name in ("model.tmdl", "history.csv", "metrics.csv", "scaler.json",
                 "config.json"):
        assert (run / name).exists(), name

    maps = tmp_path / "maps"
    assert main(["reconstruct", "--checkpoint", str(run / "model.tmdl"),
                 "--scene", str(scene), "--stride", "8",
                 "--out", str(maps)]) == 0
    for name in ("pred.chm", "error.chm", "pred.pgm", "pred_mask.pgm",
                 "error.pgm", "error_mask.pgm", "metrics.csv", "meta.json"):
        assert (maps / name).exists(), name
    meta = json.loads((maps / "meta.json").read_text())
    assert meta["stitching"] == "overlap-average"

    table = tmp_path / "table.csv"
    assert main(["report", "--inputs", str(run / "metrics.csv"),
                 "--out", str(table)]) == 0
    lines = table.read_text().strip().splitlines()
    assert lines[0] == "band,pol,val_mae,test_mae,norm_test_mae,test_r2"
    assert lines[1].startswith("L-mono,HH+HV+VV,")


def test_tabular_rerun_byte_identical(scene_dir, tmp_path):
    _, scene = scene_dir
    smap = tmp_path / "s.smap"
    main(["split", "--scene", str(scene), "--strategy", "swath",
          "--ratios", "0.8,0.0,0.2", "--out", str(smap)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["tabular", "--scene", str(scene), "--split", str(smap),
                 "--include-xy", "false", "--seed", "7", "--out", str(a)]) == 0
    assert main(["tabular", "--scene", str(scene), "--split", str(smap),
                 "--include-xy", "false", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_quadratic_objective(tmp_path):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({
        "dims": {"learning_rate": {"type": "continuous", "lo": 1e-5,
                                   "hi": 1e-1, "log": True}},
        "objective": {"kind": "quadratic_log10", "dim": "learning_rate",
                      "target": -3.0},
    }))
    out = tmp_path / "sweep"
    assert main(["sweep", "--space", str(space), "--budget", "12",
                 "--seed", "0", "--out", str(out)]) == 0
    best = json.loads((out / "best.json").read_text())
    assert 1e-4 <= best["params"]["learning_rate"] <= 1e-2
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 13


def test_console_script_help():
    import subprocess

    out = subprocess.run(["tomoheight", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("synth", "split", "tabular", "train", "sweep", "reconstruct",
                "report"):
        assert sub in out.stdout


def test_missing_scene_is_data_error(tmp_path, capsys):
    code = main(["split", "--scene", str(tmp_path / "nope"), "--strategy",
                 "quadrant", "--ratios", "0.5,0.25,0.25",
                 "--out", str(tmp_path / "x.smap")])
    assert code == 3
