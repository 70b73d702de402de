import math

import numpy as np
import pytest

from tools.common.errors import ConfigError, UnknownScenarioError
from tools.common.rng import stream
from tools.synthetic.generator import (
    ANALYSIS_COLUMNS,
    CONFOUNDERS,
    IDEAL_COLUMNS,
    assign_treatment,
    generate_covariates,
    generate_ideal,
    generate_missingness,
    generate_outcome,
    generate_scenario,
    missing_probability,
)
from tools.synthetic.scenarios import OutcomeSpec, parse_coefficient
from tools.tabular.dataset import Dataset, continuous

LARGE = 200_000


def test_parse_coefficient():
    assert parse_coefficient("ln(1.5)") == pytest.approx(math.log(1.5))
    assert parse_coefficient("-ln(1.75)") == pytest.approx(-math.log(1.75))
    assert parse_coefficient(-2.4) == -2.4
    with pytest.raises(ConfigError):
        parse_coefficient("log(2)")


def test_registry_parses_scenario_ids(registry):
    spec = registry.parse("X1/Y1.1/M1.1", n=500, seed=3)
    assert spec.id == "X1/Y1.1/M1.1"
    assert spec.n == 500
    assert spec.outcome.coefficient("X") == pytest.approx(math.log(1.5))
    rarer = registry.parse({"x": "X1", "y": "Y1.1", "m": "M1.1", "intercept": -3.4})
    assert rarer.outcome.intercept == -3.4


@pytest.mark.parametrize("scenario_id", ["X9/Y1.1/M1.1", "X1/Y0.0/M1.1", "X1/Y1.1/M9.9", "X1-Y1.1"])
def test_unknown_scenarios(registry, scenario_id):
    with pytest.raises(UnknownScenarioError):
        registry.parse(scenario_id)


def test_covariance_is_symmetric_unit_diagonal(registry):
    sigma = registry.covariates("X1").correlation
    np.testing.assert_allclose(sigma, sigma.T)
    np.testing.assert_allclose(np.diag(sigma), 1.0)


def test_treated_fraction(registry):
    d = generate_ideal(registry.parse("X1/Y1.1/M1.1"), stream(1, 0), n=LARGE)
    assert d.column("X").mean() == pytest.approx(0.4, abs=0.001)


@pytest.mark.parametrize("outcome, rate, tolerance", [("Y1.1", 0.12, 0.003), ("Y1.17", 0.05, 0.002)])
def test_outcome_rates(registry, outcome, rate, tolerance):
    d = generate_ideal(registry.parse(f"X1/{outcome}/M1.1"), stream(2, 0), n=LARGE)
    assert d.column("Y").mean() == pytest.approx(rate, abs=tolerance)


def test_high_missingness_scenario(registry):
    d = generate_ideal(registry.parse("X1/Y1.1/M3.1"), stream(3, 0), n=LARGE)
    assert 1.0 - d.column("R").mean() == pytest.approx(0.80, abs=0.01)


def test_observed_masks_only_when_indicator_is_zero(base_draw):
    observed = base_draw.observed
    assert observed.names == list(ANALYSIS_COLUMNS)
    assert base_draw.ideal.names == list(IDEAL_COLUMNS)
    assert not base_draw.ideal.has_missing()
    unobserved = observed.column("R") == 0
    for name in CONFOUNDERS:
        np.testing.assert_array_equal(observed.is_missing(name), unobserved)
        np.testing.assert_array_equal(observed.column(name)[~unobserved], base_draw.ideal.column(name)[~unobserved])
    assert not observed.has_missing(["Y", "X", "Z_s", "Z_w", "R"])


def test_generation_is_deterministic(base_spec):
    a = generate_scenario(base_spec, stream(5, 1))
    b = generate_scenario(base_spec, stream(5, 1))
    np.testing.assert_array_equal(a.ideal.values, b.ideal.values)
    c = generate_scenario(base_spec, stream(5, 2))
    assert not np.array_equal(a.ideal.values, c.ideal.values)


def test_covariate_correlation_and_variance(registry):
    spec = registry.covariates("X1")
    d = generate_covariates(LARGE, spec, stream(6, 0))
    x = d.column("X_latent")
    assert np.corrcoef(x, d.column("Z_s"))[0, 1] == pytest.approx(0.4, abs=0.01)
    for name in spec.variables:
        assert d.column(name).var() == pytest.approx(1.0, abs=0.01)
    assert generate_covariates(1, spec, stream(6, 1)).n_rows == 1
    with pytest.raises(ConfigError):
        generate_covariates(0, spec, stream(6, 2))


def test_treatment_uses_strict_quantile():
    distinct = Dataset.from_columns([continuous("X_latent")], {"X_latent": np.arange(10.0)})
    assert assign_treatment(distinct).column("X").sum() == 4
    tied = Dataset.from_columns([continuous("X_latent")], {"X_latent": np.ones(10)})
    assert assign_treatment(tied).column("X").sum() == 0


def test_zero_coefficient_outcome_is_a_coin_flip(registry):
    d = assign_treatment(generate_covariates(LARGE, registry.covariates("X1"), stream(7, 0)))
    flat = OutcomeSpec("flat", 0.0, (("X", 0.0), ("W_s", 0.0)))
    assert generate_outcome(d, flat, stream(7, 1)).column("Y").mean() == pytest.approx(0.5, abs=0.005)


def test_missingness_masks_and_drops_hidden_columns(registry):
    d = assign_treatment(generate_covariates(LARGE, registry.covariates("X1"), stream(8, 0)))
    d = generate_outcome(d, registry.outcome("Y1.1"), stream(8, 1))
    observed = generate_missingness(d, registry.missing("M3.1"), stream(8, 2))
    assert observed.names == list(ANALYSIS_COLUMNS)
    assert observed.column("R").mean() == pytest.approx(0.20, abs=0.01)
    np.testing.assert_array_equal(observed.is_missing("W_s"), observed.column("R") == 0)


def test_value_dependent_missingness_nests_the_base_model(registry):
    d = assign_treatment(generate_covariates(1000, registry.covariates("X1"), stream(9, 0)))
    d = generate_outcome(d, registry.outcome("Y1.1"), stream(9, 1))
    nested = registry.missing("M2.6").with_terms({"W_s": 0.0, "W_w": 0.0})
    np.testing.assert_allclose(missing_probability(d, nested), missing_probability(d, registry.missing("M1.1")))
