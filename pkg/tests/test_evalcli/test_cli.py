from __future__ import annotations

import json

import pytest

from igpode.errors import ConfigError
from igpode.evaluate import read_report
from igpode.main import create_output_directory
from igpode.main import main
from igpode.main import parse_rounds
from igpode.simdata import read_dataset

CONFIG = {
    "model": {"num_inducing": 5, "num_features": 16},
    "train": {"batch_size": 2, "substeps": 1, "log_every": 1},
}


def simulate(out, *extra):
    argv = ["simulate", "--system", "balls", "--num-steps", "12", "--out", str(out)]
    return main(argv + [str(x) for x in extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG))
    assert simulate(root / "train.bin", "--num-objects", 2, "--num-sequences", 4) == 0
    assert (
        simulate(
            root / "test.bin",
            "--num-objects",
            2,
            "--num-sequences",
            2,
            "--split",
            "test",
        )
        == 0
    )
    assert (
        main(
            [
                "train",
                "--data",
                str(root / "train.bin"),
                "--config",
                str(config),
                "--rounds",
                "5:2,8:1",
                "--ckpt",
                str(root / "run.ckpt"),
                "--history",
                str(root / "history.json"),
            ],
        )
        == 0
    )
    return root


def test_simulate_is_reproducible(tmp_path):
    assert simulate(tmp_path / "a.bin", "--num-sequences", 2, "--seed", 4) == 0
    assert simulate(tmp_path / "b.bin", "--num-sequences", 2, "--seed", 4) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    data = read_dataset(tmp_path / "a.bin")
    assert data.observations.shape == (2, 12, 3, 4)


def test_simulate_charges_with_missing_velocity(tmp_path):
    out = tmp_path / "charges.bin"
    argv = ["simulate", "--system", "charges", "--num-sequences", "2"]
    argv += ["--num-steps", "6", "--missing-velocity", "--out", str(out)]
    assert main(argv) == 0
    data = read_dataset(out)
    assert data.obs_dim == 2
    assert data.globals.shape == (2, 5, 1)


def test_unknown_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--system", "balls", "--bogus", "--out", "x.bin"])
    assert e.value.code == 2


def test_bad_rounds_exit_with_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", "x.bin", "--ckpt", "y.ckpt", "--rounds", "5-10"])
    assert e.value.code == 2


def test_parse_rounds():
    assert parse_rounds("5:2000,16:1000") == ((5, 2000), (16, 1000))


def test_no_subcommand_prints_help(capsys):
    assert main([]) == 0
    assert "usage" in capsys.readouterr().out


def test_missing_checkpoint_fails(tmp_path):
    argv = ["eval", "--ckpt", str(tmp_path / "missing.ckpt")]
    argv += ["--data", str(tmp_path / "missing.bin")]
    argv += ["--report", str(tmp_path / "report.json")]
    assert main(argv) == 1


def test_training_writes_checkpoint_and_history(workspace):
    history = json.loads((workspace / "history.json").read_text())
    assert [record["round"] for record in history] == [0, 0, 1]
    assert (workspace / "run.ckpt").stat().st_size > 0


def test_eval_and_plot(workspace):
    report_path = workspace / "report.json"
    argv = ["eval", "--ckpt", str(workspace / "run.ckpt")]
    argv += ["--data", str(workspace / "test.bin"), "--samples", "3"]
    argv += ["--report", str(report_path)]
    assert main(argv) == 0
    report = read_report(report_path)
    assert report["header"]["encoder_prefix"] == 5
    assert report["header"]["horizon"] == 12
    assert len(report["sequences"]) == 2
    assert len(report["horizon_mse"]) == 12

    again = workspace / "again.json"
    argv[-1] = str(again)
    assert main(argv) == 0
    assert read_report(again)["summary"] == report["summary"]

    out = workspace / "plots"
    argv = ["plot", "--report", str(report_path)]
    argv += ["--truth", str(workspace / "test.bin"), "--out", str(out)]
    assert main(argv) == 0
    assert len(list(out.glob("*.csv"))) == 4
    assert len(list(out.glob("*.svg"))) == 4
    header = (out / "seq000_obj0.csv").read_text().splitlines()[0]
    assert header.startswith("t,truth_s_x,mean_s_x,lo95_s_x,hi95_s_x")
    assert "<svg" in (out / "seq001_obj1.svg").read_text()


def test_fskill_reports_both_runs(workspace, capsys):
    single = workspace / "single.bin"
    assert simulate(single, "--num-objects", 1, "--num-sequences", 2) == 0
    capsys.readouterr()
    argv = ["fskill", "--ckpt", str(workspace / "run.ckpt"), "--data", str(single)]
    assert main(argv) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(argv) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second
    assert first["steps"] == 10
    assert set(first) == {"steps", "contained", "mse_trained", "mse_untrained", "ratio"}


def test_fskill_rejects_multi_object_data(workspace):
    argv = ["fskill", "--ckpt", str(workspace / "run.ckpt")]
    assert main(argv + ["--data", str(workspace / "test.bin")]) == 1


def test_output_directory_under_a_file_fails(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(ConfigError):
        create_output_directory(blocker / "plots")
    assert create_output_directory(tmp_path / "a" / "b") == (tmp_path / "a" / "b")
    assert (tmp_path / "a" / "b").is_dir()


@pytest.mark.slow
def test_training_lowers_eval_error(tmp_path):
    config = tmp_path / "config.json"
    settings = {
        "model": {"num_inducing": 10, "num_features": 32},
        "train": {"batch_size": 4, "learning_rate": 1e-2, "log_every": 50},
    }
    config.write_text(json.dumps(settings))
    train_argv = ["--num-objects", 2, "--num-sequences", 8]
    assert simulate(tmp_path / "train.bin", *train_argv) == 0
    argv = ["--num-objects", 2, "--num-sequences", 2, "--split", "test"]
    assert simulate(tmp_path / "test.bin", *argv) == 0

    mse = {}
    for label, rounds in (("untrained", "5:0"), ("trained", "5:300")):
        ckpt = tmp_path / f"{label}.ckpt"
        argv = ["train", "--data", str(tmp_path / "train.bin")]
        argv += ["--config", str(config), "--rounds", rounds, "--ckpt", str(ckpt)]
        assert main(argv) == 0
        report = tmp_path / f"{label}.json"
        argv = ["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "test.bin")]
        argv += ["--samples", "5", "--report", str(report)]
        assert main(argv) == 0
        mse[label] = read_report(report)["summary"]["mse"]["mean"]
    assert mse["trained"] < mse["untrained"]
