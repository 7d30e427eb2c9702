import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from glmfe.mle import (CollinearityError, beta_covariance, fe_contribution, fit_mle, normalize_fe,
                       refit_fixed_effects_offset, screen_separation)
from glmfe.panel import PanelError, build_dataset, from_arrays

from conftest import estimable_panel, random_panel
from oracles import dense_mle, has_finite_mle


def screened_panel(seed, I=5, J=5, T=4, link="logit", p=1, **kw):
    return estimable_panel(seed * 1000, I, J, T, p=p, link=link, **kw)


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_matches_dense_full_dummy_mle(link):
    ds = screened_panel(11, link=link)
    fit = fit_mle(ds, link)
    beta, eta, cov = dense_mle(fit.ds, link)
    np.testing.assert_allclose(fit.beta, beta, atol=1e-6)
    assert fit.deviance == pytest.approx(fit.link.deviance(eta, fit.ds.y), abs=1e-4)
    np.testing.assert_allclose(fit.eta, eta, atol=1e-6)
    np.testing.assert_allclose(fit.beta_cov, cov, atol=1e-6)


def test_fit_invariants():
    ds = screened_panel(12, I=5, J=5, T=4, p=2)
    fit = fit_mle(ds, "probit")
    # eta decomposes into regressors plus recovered fixed effects
    np.testing.assert_allclose(fit.eta, fit.ds.X @ fit.beta + fe_contribution(fit.ds, fit.fe), atol=1e-6)
    assert fit.deviance == pytest.approx(-2 * fit.link.loglik(fit.eta, fit.ds.y).sum(), rel=1e-12)
    np.testing.assert_allclose(fit.W_hat, fit.W_hat.T)
    assert np.linalg.eigvalsh(fit.W_hat).min() > 0


def test_score_vanishes_at_optimum():
    ds = screened_panel(13, I=5, J=5, T=4, p=2)
    fit = fit_mle(ds, "probit")
    lv = fit.link.evaluate(fit.eta, fit.ds.y)
    assert np.max(np.abs(fit.MX.T @ lv.dl)) < 10 * 1e-8


def test_deviance_non_increasing_over_newton_steps():
    ds = screened_panel(14, I=5, J=5, T=4, p=2)
    fit = fit_mle(ds, "logit")
    devs = [row[1] for row in fit.trace]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(devs, devs[1:]))


def test_pair_constant_regressor_is_collinear():
    ds = screened_panel(15)
    pair_level = (ds.i * 10 + ds.j).astype(float)
    ds2 = from_arrays(ds.i, ds.j, ds.t, ds.y, np.column_stack([ds.X[:, 0], pair_level]),
                      x_names=["z", "distance"])
    with pytest.raises(CollinearityError) as exc:
        fit_mle(ds2, "logit")
    assert exc.value.column == "distance"
    assert "distance" in str(exc.value)


def test_screening_drops_all_zero_pair():
    rows = [(0, 1, t, 0, 0.1 * t) for t in range(3)]
    rows += [(1, 0, t, t % 2, 0.2 * t) for t in range(3)]
    ds = build_dataset(rows, fe_dims=("IJ",))
    out, report = screen_separation(ds)
    assert out.n == 3
    assert report.levels_dropped["IJ"] == 1
    assert report.rows_dropped == 3
    assert set(out.i.tolist()) == {1}


def test_screening_is_noop_when_every_cell_varies():
    rows = [(i, j, t, (i + j + t) % 2, 0.0) for i in range(2) for j in range(2) for t in range(2)]
    ds = build_dataset(rows, fe_dims=("IJ",))
    out, report = screen_separation(ds)
    assert out is ds
    assert report.rows_dropped == 0


def test_screening_cascades_from_pair_to_exporter_period():
    # exporter 0 with three partners; pair (0, 1) is all ones
    y = {1: [1, 1, 1], 2: [0, 1, 0], 3: [0, 0, 1]}
    rows = [(0, j, t, y[j][t], 0.0) for j in (1, 2, 3) for t in range(3)]
    ds = build_dataset(rows, fe_dims=("IT", "IJ"))
    out, report = screen_separation(ds)
    # removing the pair leaves period 0 of exporter 0 with outcomes (0, 0)
    assert dict(report.levels_dropped) == {"IT": 1, "IJ": 1}
    assert report.rows_dropped == 5
    # one sweep drops the pair, the next the exporter-period, the last confirms
    assert report.passes == 3
    assert sorted(zip(out.j.tolist(), out.t.tolist())) == [(2, 1), (2, 2), (3, 1), (3, 2)]


def test_screening_everything_separated_errors():
    ds = build_dataset([(0, 1, 0, 1, 0.0), (0, 1, 1, 1, 1.0)], fe_dims=("IJ",))
    with pytest.raises(PanelError, match="no identifiable sample"):
        screen_separation(ds)


def test_offset_refit_reproduces_fit():
    ds = screened_panel(16, I=5, J=5, T=4, p=2)
    fit = fit_mle(ds, "probit")
    refit = refit_fixed_effects_offset(fit.ds, "probit", fit.beta)
    np.testing.assert_allclose(refit.eta, fit.eta, atol=1e-6)
    np.testing.assert_array_equal(refit.beta, fit.beta)


def test_one_way_logit_fixed_effects_are_cell_log_odds():
    rng = np.random.default_rng(17)
    rows, means = [], {}
    for i in range(3):
        for j in range(3):
            ys = [0, 1] + list(rng.integers(0, 2, 4))
            means[(i, j)] = np.mean(ys)
            rows += [(i, j, t, ys[t], rng.normal()) for t in range(6)]
    ds = build_dataset(rows, fe_dims=("IJ",))
    refit = refit_fixed_effects_offset(ds, "logit", [0.0])
    expected = np.array([logit(means[(i, j)]) for i, j in zip(ds.i, ds.j)])
    np.testing.assert_allclose(refit.eta, expected, atol=1e-8)


def test_offset_shift_on_cell_constant_column_leaves_eta():
    rng = np.random.default_rng(18)
    ds0 = screened_panel(18)
    pair_level = rng.normal(size=100)[ds0.i * 10 + ds0.j]
    ds = from_arrays(ds0.i, ds0.j, ds0.t, ds0.y, np.column_stack([ds0.X[:, 0], pair_level]))
    a = refit_fixed_effects_offset(ds, "probit", [0.4, 0.0])
    b = refit_fixed_effects_offset(ds, "probit", [0.4, 1.7])
    np.testing.assert_allclose(a.eta, b.eta, atol=1e-6)


def test_beta_covariance_scalar():
    fit = fit_mle(screened_panel(19), "logit")
    fake = replace(fit, W_hat=np.array([[2.0]]))
    assert beta_covariance(fake, n=100)[0, 0] == pytest.approx(1 / 200)


def test_beta_covariance_singular_errors():
    fit = fit_mle(screened_panel(19), "logit")
    with pytest.raises(CollinearityError):
        beta_covariance(replace(fit, W_hat=np.zeros((1, 1))))


def test_stacked_copies_halve_the_variance():
    ds = screened_panel(20, I=4, J=4, T=4)
    fit = fit_mle(ds, "logit")
    # disjoint relabelled copy: every fixed-effect level is duplicated, the coefficient is not
    shift = 100
    both = from_arrays(np.r_[ds.i, ds.i + shift], np.r_[ds.j, ds.j + shift], np.r_[ds.t, ds.t],
                       np.r_[ds.y, ds.y], np.r_[ds.X, ds.X])
    fit2 = fit_mle(both, "logit")
    np.testing.assert_allclose(fit2.beta, fit.beta, atol=1e-7)
    np.testing.assert_allclose(fit2.beta_cov, fit.beta_cov / 2, rtol=1e-6)


def test_normalizations_give_the_same_predictor():
    ds = screened_panel(21, I=5, J=4, T=3)
    fit = fit_mle(ds, "probit")
    first = normalize_fe(fit.fe, "first")
    mean = normalize_fe(fit.fe, "mean")
    np.testing.assert_allclose(fe_contribution(fit.ds, first), fe_contribution(fit.ds, mean), atol=1e-12)
    for d in list(mean)[1:]:
        assert abs(mean[d].mean()) < 1e-12
        assert first[d][0] == 0.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), link=st.sampled_from(["logit", "probit"]))
def test_agrees_with_dense_oracle_on_random_tiny_panels(seed, link):
    rng = np.random.default_rng(seed)
    ds = random_panel(rng, int(rng.integers(3, 6)), int(rng.integers(3, 6)), int(rng.integers(3, 5)),
                      link=link, no_self_flows=False, scale=0.3)
    try:
        ds, _ = screen_separation(ds)
    except PanelError:
        return
    if not has_finite_mle(ds):
        return
    fit = fit_mle(ds, link)
    beta, eta, _ = dense_mle(fit.ds, link)
    np.testing.assert_allclose(fit.beta, beta, atol=1e-6)
    assert fit.deviance == pytest.approx(fit.link.deviance(eta, fit.ds.y), abs=1e-4)
