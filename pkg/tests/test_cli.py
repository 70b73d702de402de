import os

import pytest

from cli import EXIT_USAGE, main
from tools.common import settings


@pytest.fixture
def grid(tmp_path):
    path = tmp_path / "grid.yml"
    path.write_text(
        "scenarios: [X1/Y1.1/M1.1]\n"
        "n: 300\n"
        "replicates: 2\n"
        "estimators: [CC, CNFD]\n"
        "estimands: [clogOR, mRD]\n"
        "truth_draws: 100000\n"
        "truth_batches: 2\n"
        "truth_flavors: [oracle]\n",
        encoding="utf-8",
    )
    return str(path)


def test_simulate_then_report(grid, tmp_path, capsys):
    out_dir = str(tmp_path / "out")
    assert main(["simulate", "--config", grid, "--output-dir", out_dir, "--seed", "5"]) == 0
    printed = capsys.readouterr().out.split()
    assert os.path.join(out_dir, "records.csv") in printed
    summary = os.path.join(out_dir, "summary_X1_Y1.1_M1.1.csv")
    assert summary in printed

    assert main(["report", summary, "--output-dir", out_dir]) == 0
    assert os.path.exists(os.path.join(out_dir, "report.txt"))

    assert main(["summarize", "--config", grid, "--records", os.path.join(out_dir, "records.csv"),
                 "--output-dir", str(tmp_path / "again"), "--seed", "5"]) == 0


def test_bad_config_exits_with_usage_code(tmp_path, capsys):
    path = tmp_path / "bad.yml"
    path.write_text("scenarios: [X1/Y1.1/M1.1]\nestimators: [T-M]\nestimands: [clogOR]\n", encoding="utf-8")
    assert main(["simulate", "--config", str(path), "--output-dir", str(tmp_path)]) == EXIT_USAGE
    assert "INVALID_CONFIG" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "absent.yml")]) == EXIT_USAGE


def test_empty_report(tmp_path):
    assert main(["report", "--output-dir", str(tmp_path)]) == 0


def test_truth_prints_csv(capsys):
    assert main(["truth", "X1/Y1.1/M1.1", "--estimand", "clogOR"]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header == "scenario,estimand,flavor,value,mc_draws,mc_se"
    fields = row.split(",")
    assert fields[:3] == ["X1/Y1.1/M1.1", "clogOR", "oracle"]
    assert float(fields[3]) == pytest.approx(0.4054651081, abs=1e-9)
    assert fields[4] == "0"


def test_unknown_scenario_exit_code():
    assert main(["truth", "X1/Y9.9/M1.1", "--draws", "100000"]) == EXIT_USAGE


def test_plasmode_generate(tmp_path, capsys):
    code = main(["plasmode-generate", "--outcome", "5yr", "--n", "100", "--cohort-size", "800",
                 "--output-dir", str(tmp_path)])
    assert code == 0
    assert len(capsys.readouterr().out.split()) == 3


def test_flags_win_over_environment(tmp_path, monkeypatch, capsys):
    env_dir = tmp_path / "from-env"
    flag_dir = tmp_path / "from-flag"
    monkeypatch.setenv(settings.ENV_OUTPUT_DIR, str(env_dir))
    monkeypatch.setenv(settings.ENV_N_JOBS, "3")
    monkeypatch.setenv(settings.ENV_TRUTH_CACHE, str(tmp_path / "env-cache.csv"))

    assert settings.output_dir(str(flag_dir), "from-file") == str(flag_dir)
    assert settings.output_dir(None, "from-file") == str(env_dir)
    assert settings.n_jobs(1, 4) == 1
    assert settings.n_jobs(None, 4) == 3
    assert settings.truth_cache_path("flag.csv") == "flag.csv"

    code = main(["plasmode-generate", "--n", "50", "--cohort-size", "400", "--output-dir", str(flag_dir)])
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert all(path.startswith(str(flag_dir)) for path in printed)
    assert not env_dir.exists()

    cache = tmp_path / "flag-cache.csv"
    assert main(["truth", "X1/Y1.1/M1.1", "--estimand", "clogOR", "--cache", str(cache), "--n-jobs", "1"]) == 0
    assert cache.exists()
    assert not (tmp_path / "env-cache.csv").exists()


def test_environment_wins_over_file_without_flags(tmp_path, monkeypatch):
    monkeypatch.setenv(settings.ENV_OUTPUT_DIR, str(tmp_path / "from-env"))
    monkeypatch.delenv(settings.ENV_N_JOBS, raising=False)
    assert settings.output_dir(None, "from-file") == str(tmp_path / "from-env")
    assert settings.n_jobs(None, 4) == 4
    monkeypatch.delenv(settings.ENV_OUTPUT_DIR)
    assert settings.output_dir(None, "from-file") == "from-file"
    assert settings.output_dir() == "output"
