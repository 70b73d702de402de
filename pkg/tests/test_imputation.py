import numpy as np
import pytest

from tools.common.errors import ConfigError, ImputationError, UsageError
from tools.glm.glm_engine import fit_formula
from tools.imputation.mice_engine import MiceConfig, mice_impute, rubin_pool
from tools.tabular.dataset import Dataset, binary, continuous

FAST = dict(m=3, max_iter=4, seed=17)


def test_rubin_pool_total_variance():
    pooled = rubin_pool([1.0, 3.0], [1.0, 1.0])
    assert pooled.point == pytest.approx(2.0)
    assert pooled.within == pytest.approx(1.0)
    assert pooled.between == pytest.approx(2.0)
    assert pooled.total_variance == pytest.approx(4.0)
    assert pooled.se == pytest.approx(2.0)
    assert pooled.df == pytest.approx((1.0 + 1.0 / 3.0) ** 2)


def test_rubin_pool_identical_imputations():
    pooled = rubin_pool([0.7] * 5, [0.04] * 5)
    assert pooled.point == 0.7
    assert pooled.total_variance == pytest.approx(0.04)
    assert pooled.df == float("inf")


def test_rubin_pool_needs_two_imputations():
    with pytest.raises(UsageError):
        rubin_pool([1.0], [1.0])


def test_config_validation():
    with pytest.raises(ConfigError):
        MiceConfig(m=1)
    with pytest.raises(ConfigError):
        MiceConfig(max_iter=0)


def test_imputations_keep_observed_values(base_draw):
    d = base_draw.observed.take(np.arange(500))
    imputations = mice_impute(d, MiceConfig(**FAST))
    assert len(imputations) == 3
    observed = ~d.is_missing("W_s")
    for completed in imputations:
        assert not completed.has_missing()
        np.testing.assert_array_equal(completed.column("W_s")[observed], d.column("W_s")[observed])
        # PMM 只会填入已观测过的值
        assert set(completed.column("W_w")[~observed]) <= set(d.column("W_w")[observed])


def test_imputation_is_deterministic_and_imputations_differ(base_draw):
    d = base_draw.observed.take(np.arange(400))
    first = mice_impute(d, MiceConfig(**FAST))
    second = mice_impute(d, MiceConfig(**FAST))
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(first[0].values, first[1].values)


def test_parallel_imputation_matches_serial(base_draw):
    d = base_draw.observed.take(np.arange(300))
    serial = mice_impute(d, MiceConfig(**FAST))
    parallel = mice_impute(d, MiceConfig(n_jobs=2, **FAST))
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.values, b.values)


def test_binary_column_imputed_as_binary():
    gen = np.random.default_rng(0)
    n = 300
    z = gen.standard_normal(n)
    b = (gen.random(n) < 1.0 / (1.0 + np.exp(-z))).astype(float)
    hidden = gen.random(n) < 0.3
    d = Dataset.from_columns((continuous("z"), binary("b")), {"z": z, "b": b}, missing={"b": hidden})
    for completed in mice_impute(d, MiceConfig(**FAST)):
        assert set(np.unique(completed.column("b"))) <= {0.0, 1.0}


def test_no_missing_returns_copies():
    d = Dataset.from_columns((continuous("z"),), {"z": [1.0, 2.0, 3.0]})
    assert all(completed is d for completed in mice_impute(d, MiceConfig(m=2)))


def test_fully_missing_column_is_an_error():
    d = Dataset.from_columns(
        (continuous("z"), continuous("w")),
        {"z": [1.0, 2.0, 3.0], "w": [np.nan] * 3},
    )
    with pytest.raises(ImputationError):
        mice_impute(d, MiceConfig(**FAST))


def test_unknown_visit_order_column():
    d = Dataset.from_columns((continuous("z"), continuous("w")), {"z": [1.0, 2.0, 3.0], "w": [1.0, np.nan, 2.0]})
    with pytest.raises(UsageError):
        mice_impute(d, MiceConfig(visit_order=("nope",), **FAST))


@pytest.mark.slow
def test_pooled_outcome_model_tracks_full_data_fit_under_mcar():
    gen = np.random.default_rng(21)
    n = 2000
    z = gen.standard_normal(n)
    x = (gen.random(n) < 1.0 / (1.0 + np.exp(-0.4 * z))).astype(float)
    w = 0.5 * z + 0.4 * x + gen.standard_normal(n)
    y = (gen.random(n) < 1.0 / (1.0 + np.exp(-(-1.0 + 0.5 * x + 0.6 * w + 0.3 * z)))).astype(float)
    columns = (binary("X"), continuous("Z"), continuous("W"), binary("Y"))
    full = Dataset.from_columns(columns, {"X": x, "Z": z, "W": w, "Y": y})
    hidden = gen.random(n) < 0.3
    observed = Dataset.from_columns(columns, {"X": x, "Z": z, "W": w, "Y": y}, missing={"W": hidden})

    formula = ("X", "W", "Z")
    reference = fit_formula(full, formula, "Y")
    fits = [fit_formula(completed, formula, "Y") for completed in mice_impute(observed, MiceConfig(m=10, max_iter=10, seed=5))]
    for label in formula:
        pooled = rubin_pool([f.coefficient(label) for f in fits], [f.standard_error(label) ** 2 for f in fits])
        assert abs(pooled.point - reference.coefficient(label)) < 3 * np.sqrt(pooled.total_variance)
        # 缺失信息只会放大方差
        assert pooled.total_variance > reference.standard_error(label) ** 2
