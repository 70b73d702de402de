import filecmp
import json
import os
from dataclasses import replace

import pytest

from tools.common import settings
from tools.common.errors import ConfigError, UnknownScenarioError
from tools.estimators.records import CLOGOR, MRD, read_records
from tools.simulate.harness import RunConfig, run, scenario_slug, summarize_run
from tools.truth.metrics import read_summaries


def _config(output_dir, **overrides):
    options = dict(
        scenarios=("X1/Y1.1/M1.1",),
        n=300,
        replicates=3,
        estimators=("CC", "IPW"),
        seed=99,
        output_dir=str(output_dir),
        truth_draws=100_000,
        truth_batches=2,
        truth_flavors=("oracle",),
    )
    options.update(overrides)
    return RunConfig(**options)


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    config = _config(tmp_path_factory.mktemp("first"))
    return config, run(config)


def test_run_writes_records_summaries_and_manifest(first_run):
    config, result = first_run
    records = read_records(result.records_path)
    assert len(records) == result.records == 24
    assert {r.estimator for r in records} == {"CC", "IPW"}
    assert [r.replicate for r in records[:8]] == [0] * 8

    assert result.summary_paths == (os.path.join(config.output_dir, "summary_X1_Y1.1_M1.1.csv"),)
    rows = read_summaries(result.summary_paths[0])
    assert len(rows) == 8
    assert all(row.replicates == 3 and row.flavor == "oracle" for row in rows)

    with open(result.manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["config_hash"] == config.config_hash()
    assert manifest["seeds"]["base"] == 99
    assert "records.csv" in manifest["files"]


def test_rerun_is_byte_identical(first_run, tmp_path):
    config, result = first_run
    again = run(replace(config, output_dir=str(tmp_path)))
    assert filecmp.cmp(result.records_path, again.records_path, shallow=False)
    assert filecmp.cmp(result.summary_paths[0], again.summary_paths[0], shallow=False)


@pytest.mark.slow
def test_parallel_run_matches_serial(first_run, tmp_path):
    config, result = first_run
    parallel = run(replace(config, output_dir=str(tmp_path), n_jobs=2))
    assert filecmp.cmp(result.records_path, parallel.records_path, shallow=False)


def test_summarize_run_recomputes_summaries(first_run, tmp_path):
    config, result = first_run
    paths = summarize_run(result.records_path, config, str(tmp_path))
    assert filecmp.cmp(paths[0], result.summary_paths[0], shallow=False)


def test_config_hash_tracks_every_field(tmp_path):
    config = _config(tmp_path)
    assert config.config_hash() == _config(tmp_path).config_hash()
    for change in ({"seed": 100}, {"n": 301}, {"replicates": 4}, {"estimators": ("CC",)},
                   {"truth_draws": 200_000}, {"mice": {"m": 5}}):
        assert replace(config, **change).config_hash() != config.config_hash()


def test_tmle_with_conditional_estimand_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        _config(tmp_path, estimators=("CC", "T-MTO"), estimands=(CLOGOR, MRD))
    config = _config(tmp_path, estimators=("CC", "T-MTO"), estimator_estimands={"T-MTO": (MRD,)},
                     estimands=(CLOGOR, MRD))
    assert config.estimands_for("T-MTO") == (MRD,)
    assert config.estimands_for("CC") == (CLOGOR, MRD)


def test_invalid_configs(tmp_path):
    with pytest.raises(ConfigError):
        _config(tmp_path, estimators=("CC", "EM"))
    with pytest.raises(ConfigError):
        _config(tmp_path, replicates=0)
    with pytest.raises(ConfigError):
        _config(tmp_path, truth_flavors=("empirical",))
    with pytest.raises(ConfigError):
        _config(tmp_path, mice={"imputations": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scenarios": ["X1/Y1.1/M1.1"], "replicate": 3})


def test_unknown_scenario_fails_before_running(tmp_path):
    with pytest.raises(UnknownScenarioError):
        run(_config(tmp_path, scenarios=("X1/Y1.1/M7.7",)))
    assert not os.path.exists(tmp_path / "records.csv")


def test_yaml_config_with_estimator_map(tmp_path, monkeypatch):
    path = tmp_path / "grid.yml"
    path.write_text(
        "scenarios: X1/Y1.1/M1.1\n"
        "replicates: 2\n"
        "estimators:\n"
        "  CC: [clogOR, mRD]\n"
        "  T-M: [mRD]\n"
        "tmle:\n"
        "  folds: 3\n",
        encoding="utf-8",
    )
    monkeypatch.setenv(settings.ENV_OUTPUT_DIR, str(tmp_path / "from-env"))
    config = RunConfig.from_yaml(str(path))
    assert config.scenarios == ("X1/Y1.1/M1.1",)
    assert config.estimators == ("CC", "T-M")
    assert config.estimands_for("T-M") == (MRD,)
    assert config.output_dir == str(tmp_path / "from-env")
    assert config.estimator_settings().tmle["T-M"].folds == 3


def test_shipped_configs_parse():
    for name in sorted(os.listdir(settings.CONFIGS_DIR)):
        config = RunConfig.from_yaml(os.path.join(settings.CONFIGS_DIR, name))
        assert config.replicates >= 1


def test_scenario_slug():
    assert scenario_slug("X1/Y1.1/M1.1") == "X1_Y1.1_M1.1"
    assert scenario_slug("plasmode-1yr") == "plasmode-1yr"
