import os

import numpy as np
import pytest

from tools.common.errors import ConfigError, SchemaError, UnknownScenarioError
from tools.common.rng import stream
from tools.common.settings import PLASMODE_MODELS_PATH
from tools.glm.glm_engine import fit_formula
from tools.plasmode.plasmode_dgm import (
    ANALYSIS_COLUMNS,
    MODEL_FORMULAS,
    OUTCOMES,
    PHQ_COLUMNS,
    PlasmodeScenario,
    cohort_columns,
    generate_plasmode,
    load_plasmode_models,
    simulate_plasmode_ideal,
    synth_cohort,
)
from tools.plasmode.plasmode_tables import write_plasmode_tables
from tools.tabular.dataset import binary, load_table


@pytest.fixture(scope="module")
def models():
    return load_plasmode_models()


@pytest.fixture(scope="module")
def cohort():
    return synth_cohort(3000, stream(8, 2))


def _rewrite(tmp_path, transform):
    with open(PLASMODE_MODELS_PATH, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    path = tmp_path / "models.env"
    path.write_text("\n".join(transform(lines)) + "\n", encoding="utf-8")
    return str(path)


def test_models_load_with_expected_labels(models):
    assert models.outcome_1yr.labels[0] == "(Intercept)"
    assert "age10:age10" in models.outcome_5yr.labels
    assert "X" in models.outcome_1yr.labels
    assert "X" not in models.treatment.labels
    with pytest.raises(UnknownScenarioError):
        models.outcome("10yr")


def test_unknown_term_is_rejected(tmp_path):
    path = _rewrite(tmp_path, lambda lines: lines + ["outcome_1yr.depression_score=0.3"])
    with pytest.raises(SchemaError):
        load_plasmode_models(path)


def test_absent_term_is_rejected(tmp_path):
    path = _rewrite(tmp_path, lambda lines: [line for line in lines if not line.startswith("treatment.anxiety=")])
    with pytest.raises(SchemaError):
        load_plasmode_models(path)


def test_missing_coefficient_file(tmp_path):
    with pytest.raises(ConfigError):
        load_plasmode_models(str(tmp_path / "absent.env"))


def test_cohort_has_declared_columns(cohort):
    assert cohort.n_rows == 3000
    assert {"female", "age10", "charlson", "phq8", "phq9"} <= set(cohort.names)
    assert not cohort.has_missing()
    np.testing.assert_allclose(cohort.column("age10"), cohort.column("age") / 10.0)


def test_phq_masked_exactly_where_unobserved(cohort, models):
    d = generate_plasmode(cohort, models, "1yr", 2000, stream(1, 0))
    assert d.names == list(ANALYSIS_COLUMNS)
    hidden = d.column("R") == 0
    assert 0 < hidden.sum() < d.n_rows
    for name in PHQ_COLUMNS:
        np.testing.assert_array_equal(d.is_missing(name), hidden)
    assert not d.has_missing(["Y", "X", "R", "female", "age10"])


def test_generation_is_deterministic(cohort, models):
    a = generate_plasmode(cohort, models, "5yr", 500, stream(4, 1))
    b = generate_plasmode(cohort, models, "5yr", 500, stream(4, 1))
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_scenario_ids():
    assert PlasmodeScenario.parse("plasmode-1yr").id == "plasmode-1yr"
    with pytest.raises(UnknownScenarioError):
        PlasmodeScenario.parse("plasmode-2yr")
    with pytest.raises(UnknownScenarioError):
        PlasmodeScenario.parse("X1/Y1.1/M1.1")


def test_write_plasmode_tables(tmp_path):
    paths = write_plasmode_tables("1yr", n=200, seed=3, out_dir=str(tmp_path), cohort_size=1500)
    assert set(paths) == {"cohort", "ideal", "analysis"}
    for path in paths.values():
        assert os.path.exists(path)
    specs = cohort_columns() + (binary("X"), binary("Y"), binary("R"))
    schema = {spec.name: spec for spec in specs if spec.name in ANALYSIS_COLUMNS}
    analysis = load_table(paths["analysis"], schema)
    assert analysis.n_rows == 200
    ideal = load_table(paths["ideal"], schema)
    np.testing.assert_array_equal(ideal.column("R"), analysis.column("R"))


@pytest.mark.slow
@pytest.mark.parametrize("outcome, expected, tolerance", [("5yr", -0.206, 0.04), ("1yr", 0.104, 0.06)])
def test_benchmark_refit_recovers_treatment_coefficient(models, outcome, expected, tolerance):
    cohort = synth_cohort(50337, stream(40, 0))
    ideal = simulate_plasmode_ideal(cohort, models, outcome, 400_000, stream(40, 1))
    fit = fit_formula(ideal, MODEL_FORMULAS[OUTCOMES[outcome]], "Y")
    assert fit.converged
    assert fit.coefficient("X") == pytest.approx(expected, abs=tolerance)
