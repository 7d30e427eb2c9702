import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from scipy import stats

from glmfe.ape import (LongRunDenominatorError, ape_abc_correct, ape_bias_terms, ape_covariance, ape_direct,
                       ape_longrun, ape_spj_correct, compute_apes, longrun_jet)
from glmfe.links import LinkFamily
from glmfe.mle import fe_contribution, fit_mle, normalize_fe, screen_separation
from glmfe.panel import PanelError, add_lag_column, build_dataset

from conftest import estimable_panel, random_panel
from oracles import dense_ape_bias, has_finite_mle, mp_effect_derivatives


def dynamic_fit(kind, seed=1, I=6, J=6, T=12, binary=True):
    """Fit on the first lagged random panel from ``seed`` upwards whose MLE exists."""
    for s in range(seed * 1000, seed * 1000 + 50):
        rng = np.random.default_rng(s)
        ds = add_lag_column(random_panel(rng, I, J, T, p=2, link=kind, no_self_flows=False, scale=0.3,
                                         beta=[0.5, -0.3]))
        if binary:
            X = ds.X.copy()
            X[:, 2] = (X[:, 2] > 0).astype(float)
            ds = ds.with_X(X, ds.x_names, ds.lag_col)
        if has_finite_mle(screen_separation(ds)[0]):
            return fit_mle(ds, kind)
    raise RuntimeError("no estimable dynamic panel")


def test_logit_continuous_effect_at_zero():
    ds = build_dataset([(0, 1, 0, 1, 0.3)])
    a = compute_apes(ds, "logit", [1.0], [0.0])
    assert a.kinds == ("continuous",)
    assert a.delta[0] == 0.25


def test_probit_binary_contrast_matches_direct_evaluation():
    rng = np.random.default_rng(2)
    rows = [(i, j, 0, int(rng.integers(0, 2)), float(rng.integers(0, 2))) for i in range(4) for j in range(4)]
    ds = build_dataset(rows)
    b = 0.7
    eta = rng.normal(size=ds.n)
    a = compute_apes(ds, "probit", [b], eta)
    assert a.kinds == ("binary",)
    x = ds.X[:, 0]
    expected = stats.norm.cdf(eta + b * (1 - x)) - stats.norm.cdf(eta - b * x)
    np.testing.assert_allclose(a.Delta[:, 0], expected, rtol=1e-14)
    assert np.all(np.abs(a.Delta) < 1)


def test_longrun_scalar_example():
    c, den = longrun_jet(LinkFamily("logit"), np.array([0.0]), np.array([1.0]))
    F1 = 1 / (1 + np.exp(-1.0))
    assert 1 - den[0] == pytest.approx(F1 - 0.5, abs=1e-15)
    assert 1 - den[0] == pytest.approx(0.2311, abs=1e-4)
    assert c[0, 0][0] == pytest.approx(0.5 / (1 - (F1 - 0.5)), abs=1e-15)
    assert c[0, 0][0] == pytest.approx(0.6503, abs=2e-4)


@pytest.mark.parametrize("kind", ["probit", "logit"])
def test_longrun_equals_direct_at_zero_lag_without_state_dependence(kind):
    fit = dynamic_fit(kind)
    ds = fit.ds
    beta = fit.beta.copy()
    beta[ds.lag_col] = 0.0
    eta = ds.X @ beta + fe_contribution(ds, fit.fe)
    lr = compute_apes(ds, kind, beta, eta, longrun=True)
    X0 = ds.X.copy()
    X0[:, ds.lag_col] = 0.0
    ds0 = ds.with_X(X0, ds.x_names, ds.lag_col)
    direct = compute_apes(ds0, kind, beta, eta, columns=lr.columns)
    np.testing.assert_allclose(lr.Delta, direct.Delta, rtol=0, atol=1e-15)
    np.testing.assert_allclose(lr.delta, direct.delta, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["probit", "logit"])
@pytest.mark.parametrize("longrun", [False, True])
def test_row_effects_match_extended_precision(kind, longrun):
    fit = dynamic_fit(kind, seed=3, T=8)
    a = compute_apes(fit.ds, kind, fit.beta, fit.eta, longrun=longrun)
    for r in range(0, fit.ds.n, 41):
        for c, k in enumerate(a.columns):
            v, d1, d2, _ = mp_effect_derivatives(kind, fit.ds.X[r], fit.beta, fit.eta[r], k,
                                                 a.kinds[c] != "continuous", longrun, fit.ds.lag_col)
            assert a.Delta[r, c] == pytest.approx(v, abs=1e-10)
            assert a.dDelta[r, c] == pytest.approx(d1, abs=1e-9)
            assert a.d2Delta[r, c] == pytest.approx(d2, abs=1e-8)


@pytest.mark.parametrize("longrun", [False, True])
def test_coefficient_gradient_matches_extended_precision(longrun):
    fit = dynamic_fit("probit", seed=4, T=8)
    mask = np.zeros(fit.ds.n, dtype=bool)
    mask[::37] = True
    sub = fit.ds.subset(mask)
    eta = fit.eta[mask]
    a = compute_apes(sub, "probit", fit.beta, eta, longrun=longrun)
    G = np.zeros_like(a.jac_sum)
    for r in range(sub.n):
        for c, k in enumerate(a.columns):
            G[:, c] += mp_effect_derivatives("probit", sub.X[r], fit.beta, eta[r], k,
                                             a.kinds[c] != "continuous", longrun, sub.lag_col)[3]
    np.testing.assert_allclose(a.jac_sum, G, atol=1e-8)


def test_lag_is_binary_and_longrun_needs_lag():
    fit = dynamic_fit("probit", T=6)
    a = ape_direct(fit)
    assert a.kinds[fit.ds.lag_col] == "lag"
    assert fit.ds.lag_col not in ape_longrun(fit).columns
    with pytest.raises(PanelError):
        compute_apes(fit.ds, "probit", fit.beta, fit.eta, longrun=True, columns=[fit.ds.lag_col])
    static = fit_mle(estimable_panel(50), "logit")
    with pytest.raises(PanelError, match="lagged outcome"):
        ape_longrun(static)


def test_longrun_denominator_guard():
    rows = [(0, 1, t, t % 2, float(t % 2), 0.1) for t in range(4)]
    ds = build_dataset(rows)
    ds = ds.with_X(ds.X, ("y_lag", "z"), 0)
    eta = ds.X @ np.array([40.0, 1.0]) - 20.0
    with pytest.raises(LongRunDenominatorError) as exc:
        compute_apes(ds, "probit", [40.0, 1.0], eta, longrun=True)
    assert exc.value.rows.size == ds.n


@pytest.mark.parametrize("kind", ["probit", "logit"])
def test_bias_terms_match_dense_oracle_tiny(kind):
    fit = fit_mle(estimable_panel(700, 5, 5, 4, p=2, link=kind), kind)
    a = ape_direct(fit)
    t = ape_bias_terms(a, fit, L=0)
    B1, B2, B3 = dense_ape_bias(fit.ds, kind, fit.eta, a.dDelta, a.d2Delta, L=0)
    np.testing.assert_allclose(t.B1, B1, atol=1e-8)
    np.testing.assert_allclose(t.B2, B2, atol=1e-8)
    np.testing.assert_allclose(t.B3, B3, atol=1e-8)


@pytest.mark.parametrize("longrun", [False, True])
def test_bias_terms_match_dense_oracle_dynamic(longrun):
    fit = dynamic_fit("probit", seed=5, T=10)
    a = compute_apes(fit.ds, "probit", fit.beta, fit.eta, longrun=longrun)
    for L in (0, 2):
        t = ape_bias_terms(a, fit, L=L)
        B1, B2, B3 = dense_ape_bias(fit.ds, "probit", fit.eta, a.dDelta, a.d2Delta, L=L)
        np.testing.assert_allclose(t.B1, B1, atol=1e-8)
        np.testing.assert_allclose(t.B2, B2, atol=1e-8)
        np.testing.assert_allclose(t.B3, B3, atol=1e-8)


def test_abc_correction_formula():
    fit = dynamic_fit("logit", seed=6, T=8)
    a = ape_direct(fit)
    out, terms = ape_abc_correct(a, fit, L=1, return_terms=True)
    I, J, T = fit.ds.extents
    np.testing.assert_allclose(out, a.delta - terms.B1 / I - terms.B2 / J - terms.B3 / T, rtol=1e-14)


def test_spj_homogeneous_apes():
    fit = dynamic_fit("logit", seed=7, T=8)
    v = np.array([0.1, 0.2])
    np.testing.assert_array_equal(ape_spj_correct(fit.ds, lambda d: v.copy()), v)


def test_covariance_zero_when_effects_constant_and_flat():
    fit = fit_mle(estimable_panel(800, p=1), "logit")
    a = ape_direct(fit)
    flat = replace(a, Delta=np.full_like(a.Delta, 0.2), delta=np.array([0.2]),
                   dDelta=np.zeros_like(a.dDelta), jac_sum=np.zeros_like(a.jac_sum))
    for variant in ("general", "independence"):
        np.testing.assert_array_equal(ape_covariance(flat, fit, variant), 0.0)


@pytest.mark.parametrize("variant", ["general", "independence"])
@pytest.mark.parametrize("longrun", [False, True])
def test_covariance_is_psd(variant, longrun):
    fit = dynamic_fit("probit", seed=8)
    a = compute_apes(fit.ds, "probit", fit.beta, fit.eta, longrun=longrun)
    V = ape_covariance(a, fit, variant)
    np.testing.assert_array_equal(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= -1e-12 * np.trace(V)


def test_cross_term_only_with_lag():
    static = fit_mle(estimable_panel(810, p=2), "logit")
    a = ape_direct(static)
    np.testing.assert_array_equal(ape_covariance(a, static), ape_covariance(a, static, weakly_exogenous=False))
    dyn = dynamic_fit("logit", seed=9)
    b = ape_direct(dyn)
    assert not np.array_equal(ape_covariance(b, dyn), ape_covariance(b, dyn, weakly_exogenous=False))


def test_unknown_covariance_variant():
    fit = fit_mle(estimable_panel(820), "logit")
    with pytest.raises(ValueError):
        ape_covariance(ape_direct(fit), fit, "robust")


def test_apes_invariant_to_fixed_effect_normalization():
    fit = dynamic_fit("probit", seed=10)
    ds = fit.ds
    e1 = ds.X @ fit.beta + fe_contribution(ds, normalize_fe(fit.fe, "first"))
    e2 = ds.X @ fit.beta + fe_contribution(ds, normalize_fe(fit.fe, "mean"))
    for lr in (False, True):
        a1 = compute_apes(ds, "probit", fit.beta, e1, longrun=lr)
        a2 = compute_apes(ds, "probit", fit.beta, e2, longrun=lr)
        np.testing.assert_allclose(a1.delta, a2.delta, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(eta=st.floats(-6, 6), b=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3),
       x=st.sampled_from([0.0, 1.0]), kind=st.sampled_from(["probit", "logit"]))
def test_binary_contrast_within_derivative_range(eta, b, x, kind):
    # mean value theorem: contrast / b lies between the extreme densities on the segment
    ds = build_dataset([(0, 1, 0, 1, x)])
    link = LinkFamily(kind)
    a = compute_apes(ds, kind, [b], [eta])
    e1, e0 = eta + b * (1 - x), eta - b * x
    grid = np.linspace(min(e0, e1), max(e0, e1), 2001)
    if grid[0] < 0 < grid[-1]:
        grid = np.r_[grid, 0.0]
    f = link.pdf(grid)
    ratio = a.Delta[0, 0] / b
    assert f.min() - 1e-12 <= ratio <= f.max() + 1e-12
