import json

import pytest

from stvo.cli import main


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "seq"
    assert main(["synth", "--frames", "6", "--height", "96", "--width", "128", "--out", str(out)]) == 0
    return out


def test_synth_writes_tum_layout(seq):
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt", "calib.txt", "scene.json"):
        assert (seq / name).is_file()
    assert len(list((seq / "rgb").iterdir())) == 6


def test_eval_self_is_zero(seq, capsys, tmp_path):
    gt = str(seq / "groundtruth.txt")
    assert main(["eval", "--gt", gt, "--est", gt, "--plot", str(tmp_path / "e.png")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "rmse 0.000000"
    assert "pairs 6" in out
    assert (tmp_path / "e.png").stat().st_size > 0


def test_run_writes_outputs(seq, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", str(seq), "--flow", "oracle", "--iterations", "2", "--kf-threshold", "0.5",
                 "--out", str(out)])
    assert code == 0
    printed = dict(line.split("\t", 1) for line in capsys.readouterr().out.splitlines())
    assert int(printed["frames"]) == 6
    for name in ("trajectory.txt", "config.json", "ba_report.csv", "metrics.json", "trajectory.png",
                 "ba_cost.png"):
        assert (out / name).is_file()


def test_run_no_plots(seq, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(seq), "--flow", "oracle", "--iterations", "1", "--no-plots", "--out", str(out)]) == 0
    assert not (out / "trajectory.png").exists()


def test_env_and_flag_precedence(seq, tmp_path, monkeypatch):
    monkeypatch.setenv("STVO_ITERATIONS", "2")
    monkeypatch.setenv("STVO_WINDOW", "5")
    out = tmp_path / "run"
    assert main(["run", str(seq), "--flow", "oracle", "--window", "6", "--no-plots", "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["iterations"] == 2 and cfg["window"] == 6


def test_rerun_from_written_config(seq, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(seq), "--flow", "oracle", "--iterations", "2", "--kf-threshold", "0.5",
                 "--no-plots", "--out", str(a)]) == 0
    assert main(["run", str(seq), "--config", str(a / "config.json"), "--no-plots", "--out", str(b)]) == 0
    assert (a / "trajectory.txt").read_bytes() == (b / "trajectory.txt").read_bytes()


@pytest.mark.parametrize("argv", [[], ["bogus"], ["run"], ["eval", "--gt", "x"],
                                  ["synth", "--out", "x", "--frames", "0"],
                                  ["run", ".", "--stride", "0"], ["run", ".", "--flow", "magic"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_domain_errors_exit_1(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing")]) == 1
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("0.0 0 0 0 0 0 0 1\n")
    b.write_text("5.0 0 0 0 0 0 0 1\n")
    assert main(["eval", "--gt", str(a), "--est", str(b)]) == 1
    assert "NoAssociations" in capsys.readouterr().err
    assert main(["eval", "--gt", str(tmp_path / "nope.txt"), "--est", str(b)]) == 1


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
