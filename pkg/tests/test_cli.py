import pytest

from kgmpc.cli import main


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.toml"
    path.write_text('base = "default"\n\n[campaign]\nduration = 1.0\n\n[scenario]\nt_end = 2.5\n')
    return str(path)


def test_pipeline(tmp_path, short_config, capsys):
    ds = tmp_path / "ds"
    pred = tmp_path / "p.bin"
    assert main(["datagen", "--config", short_config, "--out", str(ds), "--trajectories", "4", "--seed", "1",
                 "--jobs", "1"]) == 0
    assert (ds / "manifest.txt").exists() and (ds / "traj_00003.csv").exists()
    assert main(["fit", "--dataset", str(ds), "--nd", "2", "--out", str(pred)]) == 0
    assert main(["evaluate", "--config", short_config, "--predictor", str(pred), "--trials", "3"]) == 0
    assert "relative RMSE" in capsys.readouterr().out
    out = tmp_path / "cmp"
    code = main(["compare", "--config", short_config, "--fault", "fault1", "--variants", "A,B,C",
                 "--predictor", str(pred), "--out", str(out), "--plot-data"])
    assert code in (0, 2)
    assert (out / "summary.csv").exists() and (out / "fault1_C_plot.csv").exists()


def test_simulate_to_stdout(short_config, capsys):
    assert main(["simulate", "--config", short_config, "--variant", "B", "--fault", "none", "--t-end", "0.02"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("t,delta_1")
    assert len(lines) == 4


def test_control_writes_log(tmp_path, short_config):
    scenario = tmp_path / "sc.toml"
    scenario.write_text(f'base = "{short_config}"\n\n[scenario]\nvariant = "B"\nfault = "fault2"\n')
    assert main(["control", "--scenario", str(scenario), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "fault2_B.csv").exists()


def test_config_errors_exit_4(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("not toml at all")
    assert main(["datagen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 4
    assert main(["compare", "--variants", "A,C"]) == 4
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 4
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_is_a_failure(tmp_path):
    assert main(["fit", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "p.bin")]) == 1
