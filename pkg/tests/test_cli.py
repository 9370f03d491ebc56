"""Command-line surface tests, run in-process via main()."""

from pathlib import Path

import numpy as np
import pytest

from balltrack.cli import main
from balltrack.synthgen import read_dataset

TINY_SETS = ["--set", "scene.width=32", "--set", "scene.height=32",
             "--set", "backbone.widths=4,8", "--set", "tsatt.patch=8",
             "--set", "tsatt.dim=8", "--set", "scene.ball_radius=2.0",
             "--set", "gt.radius=2.5", "--set", "train.milestones="]


def test_synth_contract(tmp_path, capsys):
    rc = main(["synth", "--seed", "1", "--sequences", "4", "--frames", "60",
               "--out", str(tmp_path / "data")])
    assert rc == 0
    assert "4 sequences, 240 frames" in capsys.readouterr().out
    data = read_dataset(tmp_path / "data")
    assert sorted(data) == ["seq000", "seq001", "seq002", "seq003"]
    assert all(len(v) == 60 for v in data.values())


def test_synth_seed_reproducible(tmp_path):
    main(["synth", "--seed", "5", "--sequences", "1", "--frames", "8",
          "--out", str(tmp_path / "a")])
    main(["synth", "--seed", "5", "--sequences", "1", "--frames", "8",
          "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "seq000" / "frames" / "000003.ppm").read_bytes()
    b = (tmp_path / "b" / "seq000" / "frames" / "000003.ppm").read_bytes()
    assert a == b


def test_eval_fixture_mode_prints_published_f1(tmp_path, capsys):
    rc = main(["eval", "--counts", "16573,116,13,636,344", "--label", "v5",
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "0.9859" in out
    csv_text = (tmp_path / "report.csv").read_text()
    assert csv_text.splitlines()[1].startswith("v5,")
    assert (tmp_path / "report.txt").exists()
    assert (tmp_path / "metrics.png").exists()


def test_eval_missing_inputs_exit_1(tmp_path, capsys):
    rc = main(["eval", "--out", str(tmp_path)])
    assert rc == 1
    rc = main(["eval", "--data", str(tmp_path / "none"), "--checkpoint",
               str(tmp_path / "nope"), "--out", str(tmp_path)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 2


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as ei:
        main(["synth", "--out", str(tmp_path), "--bogus"])
    assert ei.value.code == 2


def test_bad_set_key_exit_1(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path), "--set", "not.a.key=3"])
    assert rc == 1


def test_gradcheck_fresh_build_passes(capsys):
    rc = main(["gradcheck", "--tolerance", "1e-4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "primitive/conv2d" in out


def test_stats_output(capsys):
    rc = main(["stats", "--variant", "v2"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "parameters:" in out and "mac count:" in out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    assert main(["synth", "--seed", "3", "--sequences", "2", "--frames", "10",
                 "--out", str(root / "data"), *TINY_SETS]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--variant", "v5", "--epochs", "1", "--seed", "3",
                 *TINY_SETS, "--set", "train.lr=0.001"]) == 0
    return root


def test_train_artifacts(trained):
    run = trained / "run"
    assert (run / "checkpoint.manifest").exists()
    assert (run / "checkpoint.bin").exists()
    assert (run / "loss_curve.png").exists()
    lines = (run / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss"
    assert len(lines) > 1


def test_train_determinism(trained, tmp_path):
    assert main(["train", "--data", str(trained / "data"), "--out", str(tmp_path / "rerun"),
                 "--variant", "v5", "--epochs", "1", "--seed", "3",
                 *TINY_SETS, "--set", "train.lr=0.001"]) == 0
    a = (trained / "run" / "loss_log.csv").read_text()
    b = (tmp_path / "rerun" / "loss_log.csv").read_text()
    assert a == b


def test_eval_with_checkpoint(trained, tmp_path, capsys):
    rc = main(["eval", "--data", str(trained / "data"),
               "--checkpoint", str(trained / "run" / "checkpoint"),
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Model" in out and "FN" in out
    assert (tmp_path / "report.csv").exists()


def test_infer_writes_heatmaps_and_overlays(trained, tmp_path, capsys):
    rc = main(["infer", "--data", str(trained / "data"),
               "--checkpoint", str(trained / "run" / "checkpoint"),
               "--out", str(tmp_path), "--sequence", "seq000"])
    assert rc == 0
    files = sorted(p.name for p in (tmp_path / "seq000").iterdir())
    assert "heatmap_000000.png" in files
    assert "overlay_000009.png" in files
    assert len([f for f in files if f.startswith("overlay")]) == 10


def test_infer_unknown_sequence_exit_1(trained, tmp_path, capsys):
    rc = main(["infer", "--data", str(trained / "data"),
               "--checkpoint", str(trained / "run" / "checkpoint"),
               "--out", str(tmp_path), "--sequence", "nope"])
    assert rc == 1


def test_missing_checkpoint_exit_1(trained, tmp_path):
    rc = main(["infer", "--data", str(trained / "data"),
               "--checkpoint", str(tmp_path / "missing"),
               "--out", str(tmp_path)])
    assert rc == 1


def test_config_file_plus_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("synth.sequences = 3\nscene.frames = 5\n")
    rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d1"),
               "--seed", "1"])
    assert rc == 0
    assert "3 sequences, 15 frames" in capsys.readouterr().out
    rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d2"),
               "--seed", "1", "--frames", "4", "--set", "synth.sequences=2"])
    assert rc == 0
    assert "2 sequences, 8 frames" in capsys.readouterr().out
