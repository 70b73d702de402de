import numpy as np
import pytest
from scipy.special import expit

from tools.common.errors import UsageError
from tools.common.rng import stream
from tools.estimators.dispatch import run_estimator
from tools.estimators.records import CLOGOR, ESTIMANDS, MARGINAL_ESTIMANDS, MRD
from tools.estimators.regression_estimators import (
    estimate_benchmark,
    estimate_cc,
    estimate_cnfd,
    estimate_gr,
    estimate_ipw,
    estimate_mice,
)
from tools.estimators.tmle import TmleConfig, estimate_tmle, fluctuate
from tools.imputation.mice_engine import MiceConfig
from tools.learners.learners import GLM_ONLY_LIBRARY
from tools.synthetic.generator import ANALYSIS_COLUMNS


def _points(records):
    return {r.estimand: r.point for r in records}


@pytest.fixture(scope="module")
def fully_observed(base_draw):
    d = base_draw.ideal.select(ANALYSIS_COLUMNS)
    return d.replace_values("R", np.ones(d.n_rows))


def test_complete_cases_equal_benchmark_without_missingness(base_draw, fully_observed, working):
    cc = estimate_cc(fully_observed, working, ESTIMANDS)
    benchmark = estimate_benchmark(base_draw.ideal, working, ESTIMANDS)
    assert [r.estimator for r in benchmark] == ["BNMK-C"] * 4
    for a, b in zip(cc, benchmark):
        assert a.converged and b.converged
        assert a.point == pytest.approx(b.point, rel=1e-10)
        assert a.ase == pytest.approx(b.ase, rel=1e-10)


def test_ipw_point_equals_complete_cases_without_missingness(fully_observed, working):
    ipw = _points(estimate_ipw(fully_observed, working, ESTIMANDS))
    cc = _points(estimate_cc(fully_observed, working, ESTIMANDS))
    for estimand in ESTIMANDS:
        assert ipw[estimand] == pytest.approx(cc[estimand], rel=1e-8)


def test_raking_on_zero_auxiliaries_reproduces_ipw(base_draw, working):
    d = base_draw.observed
    ipw = estimate_ipw(d, working, ESTIMANDS)
    gr = estimate_gr(d, working, ESTIMANDS, aux=np.zeros((d.n_rows, 1)))
    for a, b in zip(ipw, gr):
        assert b.estimator == "GR" and b.converged
        assert b.point == pytest.approx(a.point, rel=1e-8)
        assert b.ase == pytest.approx(a.ase, rel=1e-6)


def test_benchmark_rejects_data_with_missing_values(base_draw, working):
    with pytest.raises(UsageError):
        estimate_benchmark(base_draw.observed, working, ESTIMANDS)
    with pytest.raises(UsageError):
        estimate_benchmark(base_draw.ideal, working, ESTIMANDS, which="oracle")


def test_confounded_model_drops_partially_observed_terms(base_draw, working):
    records = estimate_cnfd(base_draw.observed, working, [CLOGOR, MRD])
    assert all(r.converged for r in records)
    assert working.confounded_outcome == ("X", "Z_s", "Z_w")


def test_records_carry_normal_intervals(base_draw, working):
    for r in estimate_cc(base_draw.observed, working, ESTIMANDS, replicate=7, scenario="X1/Y1.1/M1.1"):
        assert r.replicate == 7 and r.scenario == "X1/Y1.1/M1.1"
        assert r.ci_low == pytest.approx(r.point - 1.96 * r.ase)
        assert r.ci_high == pytest.approx(r.point + 1.96 * r.ase)


def test_multiple_imputation_pooled_records(base_draw, working):
    d = base_draw.observed.take(np.arange(600))
    records = estimate_mice(d, working, [CLOGOR, MRD], MiceConfig(m=3, max_iter=3, seed=5))
    assert [r.estimand for r in records] == [CLOGOR, MRD]
    for r in records:
        assert r.converged
        assert r.df is not None and r.df > 0


def test_tmle_rejects_conditional_estimand(base_draw, working):
    with pytest.raises(UsageError):
        estimate_tmle(base_draw.observed, working, [CLOGOR, MRD])


def test_tmle_missingness_only_with_glm_library(base_draw, working):
    config = TmleConfig(library=GLM_ONLY_LIBRARY, folds=3)
    records = estimate_tmle(base_draw.observed, working, MARGINAL_ESTIMANDS, config, stream(1, 100))
    assert len(records) == 3
    for r in records:
        assert r.converged and r.estimator == "T-M"
        assert np.isfinite(r.point) and r.ase > 0


def test_tmle_is_reproducible_for_a_stream(base_draw, working):
    config = TmleConfig(library=GLM_ONLY_LIBRARY, folds=3)
    first = estimate_tmle(base_draw.observed, working, [MRD], config, stream(2, 100))
    second = estimate_tmle(base_draw.observed, working, [MRD], config, stream(2, 100))
    assert first == second


def test_fluctuation_vanishes_when_initial_fit_solves_score():
    gen = np.random.default_rng(4)
    n = 400
    x = (gen.random(n) < 0.5).astype(float)
    y = (gen.random(n) < 0.3 + 0.2 * x).astype(float)
    q1 = np.full(n, y[x == 1].mean())
    q0 = np.full(n, y[x == 0].mean())
    fluctuation = fluctuate(y, x, q1, q0, np.full(n, 0.5), np.ones(n))
    assert fluctuation.converged
    np.testing.assert_allclose(fluctuation.epsilon, 0.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_fluctuation_solves_the_score_equations(seed):
    gen = np.random.default_rng(seed)
    n = 600
    z = gen.standard_normal(n)
    g1 = np.clip(expit(0.2 + 0.6 * z), 0.01, 0.99)
    x = (gen.random(n) < g1).astype(float)
    y = (gen.random(n) < expit(-1.0 + 0.7 * x + 0.9 * z)).astype(float)
    # 初始 Q 有意设错
    q1 = expit(-0.6 + 0.3 * z)
    q0 = expit(-1.3 + 0.2 * z)
    w = 1.0 / expit(0.5 + 0.4 * z)
    fluctuation = fluctuate(y, x, q1, q0, g1, w)
    assert fluctuation.converged
    assert np.max(np.abs(fluctuation.epsilon)) > 1e-3
    assert np.max(np.abs(fluctuation.score)) < 1e-8


def test_dispatch(base_draw, working, rng):
    records = run_estimator("CC", base_draw, working, [MRD], rng, replicate=2, scenario="s")
    assert records[0].estimator == "CC" and records[0].replicate == 2
    with pytest.raises(UsageError):
        run_estimator("NOPE", base_draw, working, [MRD], rng)


def test_dispatch_turns_estimator_errors_into_failed_records(base_draw, working, rng):
    # BNMK-O 缺少真实模型公式
    records = run_estimator("BNMK-O", base_draw, working, [MRD, CLOGOR], rng)
    assert [r.converged for r in records] == [False, False]
    assert all(r.point is None for r in records)
