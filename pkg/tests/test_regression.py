import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import seeds
from oracles import SUBSET_B, best_subset_bic, subset_target
from vvoreg.feeder import chain_feeder
from vvoreg.opf import OpfSolution
from vvoreg.regression import (FEATURE_NAMES, FeatureMatrix, RegressionError, StepwiseConfig, bic,
                               build_features, dump_models, format_table, ols_fit, parse_models, predict,
                               select_features, standardize, stepwise_select, transform)
from vvoreg.scenarios import ScenarioSet


def test_feature_order():
    f = transform(3.0, 2.0, 1.0, 5.0)
    # phi1 = p_c - p_g = 2, phi2 = 2, phi3 = 5
    np.testing.assert_array_equal(f, [2, 2, 5, 4, 10, 10, 4, 4, 25])
    assert FEATURE_NAMES[:3] == ("phi1", "phi2", "phi3")
    assert transform(np.zeros((4, 3)), 0, 0, 0).shape == (4, 3, 9)


def test_two_point_standardization():
    z, sc = standardize(FeatureMatrix(np.array([[0.0, 7.0], [1.0, 7.0]]), np.array([2.0, 4.0]), ("a", "b"),
                                      columns=(0, 1)))
    np.testing.assert_allclose(z.Phi[:, 0], [-0.7071067811865476, 0.7071067811865476], rtol=1e-15)
    assert sc.dropped == (1,) and sc.columns == (0,)
    np.testing.assert_allclose(z.y, [-0.7071067811865476, 0.7071067811865476], rtol=1e-15)


def test_constant_target_keeps_unit_scale():
    z, sc = standardize(FeatureMatrix(np.array([[0.0], [1.0], [2.0]]), np.full(3, 0.4), ("a",), columns=(0,)))
    assert sc.y_std == 1.0
    np.testing.assert_allclose(z.y, 0.0, atol=1e-15)


def test_standardize_needs_two_samples():
    with pytest.raises(RegressionError):
        standardize(FeatureMatrix(np.ones((1, 9)), np.ones(1)))


def test_bic_value():
    # 100 ln(1/100) + 4 ln 100
    assert bic(1.0, 100, 4) == pytest.approx(-442.0963, abs=1e-4)
    assert bic(0.0, 10, 1) == bic(1e-12, 10, 1)


def test_noiseless_recovery():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 4))
    beta = np.array([0.3, 1.0, -2.0, 0.5, 4.0])
    fit = ols_fit(X, beta[0] + X @ beta[1:])
    np.testing.assert_allclose(fit.beta, beta, atol=1e-10)
    assert fit.rss < 1e-20


def test_rank_deficiency_raises():
    rng = np.random.default_rng(1)
    x = rng.normal(size=20)
    with pytest.raises(RegressionError, match="rank"):
        ols_fit(np.column_stack([x, 2 * x]), rng.normal(size=20))
    with pytest.raises(RegressionError, match="samples"):
        ols_fit(np.ones((2, 2)), np.ones(2))


def test_p_values_match_normal_tail_for_large_dof():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5000, 2))
    y = 0.03 * X[:, 0] + rng.normal(size=5000)
    fit = ols_fit(X, y)
    t = np.abs(fit.beta / fit.se)
    ref = np.array([math.erfc(v / math.sqrt(2)) for v in t])
    np.testing.assert_allclose(fit.p_values, ref, rtol=2e-3, atol=1e-12)


def test_standard_errors_cover_sampling_spread():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    betas, ses = [], []
    for _ in range(2000):
        fit = ols_fit(X, 1.0 + X @ [0.5, -0.5] + rng.normal(0, 0.2, 40))
        betas.append(fit.beta)
        ses.append(fit.se)
    spread = np.std(betas, axis=0)
    np.testing.assert_allclose(np.mean(ses, axis=0), spread, rtol=0.06)


def test_collinear_candidates_are_skipped():
    # constant power factor makes q_c proportional to p_c, so several squares collapse
    rng = np.random.default_rng(4)
    p_c = rng.uniform(0.01, 0.04, 300)
    F = transform(p_c, 0.4 * p_c, 0.0, 0.03 + 0.01 * rng.uniform(size=300))
    y = 0.7 * (F[:, 0] - F[:, 0].mean()) / F[:, 0].std() + rng.normal(0, 1e-3, 300)
    m = stepwise_select(FeatureMatrix(F, y))
    assert "phi1" in m.features
    assert not {"phi1", "phi2"} <= set(m.features)


def test_noise_target_selects_nothing():
    for seed in range(5):
        F, _ = subset_target(seed)
        y = np.random.default_rng(100 + seed).normal(size=len(F))
        assert stepwise_select(FeatureMatrix(F, y)).features == ()


@pytest.mark.parametrize("seed", [0, 2, 3, 4])
def test_stepwise_finds_best_subset(seed):
    F, y = subset_target(seed, n=200, sigma=0.05)
    z, _ = standardize(FeatureMatrix(F, y))
    fit, _ = select_features(z.Phi, z.y, [0, 1, 2])
    ref_bic, ref_set = best_subset_bic(z.Phi, z.y, range(9))
    assert fit.selected == tuple(ref_set)
    assert fit.bic == pytest.approx(ref_bic, abs=1e-9)


def test_physical_coefficients_reproduce_predictions():
    F, y = subset_target(7)
    m = stepwise_select(FeatureMatrix(F, y))
    raw = m.coef_physical[0] + F[:, list(m.feature_index)] @ m.coef_physical[1:]
    rng = np.random.default_rng(7)
    p_c = rng.uniform(0.01, 0.04, 500)
    p_g = rng.uniform(0.0, 0.03, 500)
    q_c = p_c * rng.uniform(0.3, 0.5, 500)
    q_bar = np.sqrt(np.maximum(0.035**2 - p_g**2, 0.0))
    np.testing.assert_allclose(predict(m, p_c, q_c, p_g, q_bar), raw, rtol=1e-9, atol=1e-12)
    assert "(intercept)" in format_table(m)


def test_model_file_round_trip():
    F, y = subset_target(8)
    models = [stepwise_select(FeatureMatrix(F, y, inverter="5"), provenance={"seed": 8})]
    text = dump_models(models)
    back = parse_models(text)
    assert dump_models(back) == text
    assert back[0].features == models[0].features and back[0].provenance["seed"] == 8
    np.testing.assert_array_equal(back[0].coef_physical, models[0].coef_physical)


@pytest.mark.parametrize("text", ["{", '{"schema": "other", "models": []}'])
def test_model_file_rejected(text):
    with pytest.raises(RegressionError):
        parse_models(text)


def _fake(ok, exact, q):
    s = OpfSolution.failed(chain_feeder([0.01], [0.01], ["1"]), "x") if not ok else None
    if ok:
        s = OpfSolution("optimal", np.ones(2), *np.zeros((3, 1)), np.array([q]), np.array([0.02]),
                        0.0, 0.0, 0.0, exact, 0.0, 0.0)
    return s


def test_build_features_filters_unusable_samples():
    m = chain_feeder([0.01], [0.01], ["1"], p_max=0.02)
    T = 4
    z = np.zeros((T, 2))
    pc = z.copy(); pc[:, 1] = [0.01, 0.02, 0.03, 0.04]
    sc = ScenarioSet(np.arange(T).astype("datetime64[m]"), m.bus_ids, pc, pc / 2, z)
    opf = [_fake(True, True, 0.1), _fake(False, False, 0), _fake(True, False, 0.3), _fake(True, True, 0.4)]
    fm = build_features(sc, opf, m, "1")
    np.testing.assert_array_equal(fm.y, [0.1, 0.4])
    np.testing.assert_array_equal(fm.Phi[:, 0], [0.01, 0.04])
    assert build_features(sc, opf, m, "1", exact_only=False).n_samples == 3
    with pytest.raises(RegressionError, match="no inverter"):
        build_features(sc, opf, m, "0")
    with pytest.raises(RegressionError, match="zero usable"):
        build_features(sc, [_fake(False, False, 0)] * T, m, "1")


# -- properties


@given(seeds, st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_residuals_orthogonal_to_design(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, k))
    fit = ols_fit(X, rng.normal(size=30))
    D = np.column_stack([np.ones(30), X])
    assert np.max(np.abs(D.T @ fit.residuals)) <= 1e-10


@given(seeds, st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_nested_models_never_raise_rss(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, k + 1))
    y = rng.normal(size=30)
    assert ols_fit(X, y).rss <= ols_fit(X, y, range(k)).rss + 1e-12


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_stepwise_never_beats_exhaustive_and_terminates(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 5))
    y = X @ (rng.normal(size=5) * rng.integers(0, 2, 5)) + rng.normal(size=80)
    fit, steps = select_features(X, y, [0, 1], StepwiseConfig())
    assert fit.bic >= best_subset_bic(X, y, range(5))[0] - 1e-9
    assert len(steps) - 1 <= 4 * 5
    assert all(b.bic < a.bic for a, b in zip(steps, steps[1:]))


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_never_misses_a_true_term(seed):
    # BIC may occasionally keep one spurious base term; it must never drop a real one
    F, y = subset_target(seed, sigma=1e-6)
    m = stepwise_select(FeatureMatrix(F, y))
    assert set(SUBSET_B) <= set(m.features)
    assert len(m.features) <= len(SUBSET_B) + 1
