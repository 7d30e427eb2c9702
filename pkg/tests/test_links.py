import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from glmfe.links import LinkFamily, get_link, link_eval

ETAS = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
H = 1e-5


def central(f, x, h=H):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_logit_at_zero():
    v = link_eval("logit", np.array([0.0]), np.array([1.0]))
    assert v["F"][0] == 0.5
    assert v["dF"][0] == 0.25
    assert v["d2F"][0] == 0.0


def test_probit_at_zero():
    v = link_eval("probit", np.array([0.0]), np.array([0.0]))
    assert v["F"][0] == 0.5
    assert v["dF"][0] == pytest.approx(0.3989422804014327, abs=1e-15)
    assert v["d2F"][0] == 0.0


def test_probit_density_matches_finite_difference_at_one():
    link = LinkFamily("probit")
    assert link.pdf(1.0) == pytest.approx(central(link.cdf, 1.0), abs=1e-6)


@pytest.mark.parametrize("kind", ["probit", "logit"])
def test_derivative_chain_matches_finite_differences(kind):
    link = LinkFamily(kind)
    np.testing.assert_allclose(link.pdf(ETAS), central(link.cdf, ETAS), atol=1e-6)
    np.testing.assert_allclose(link.dpdf(ETAS), central(link.pdf, ETAS), atol=1e-6)
    np.testing.assert_allclose(link.d2pdf(ETAS), central(link.dpdf, ETAS), atol=1e-6)


@pytest.mark.parametrize("kind", ["probit", "logit"])
@pytest.mark.parametrize("y", [0.0, 1.0])
def test_score_and_weight_match_loglik_derivatives(kind, y):
    link = LinkFamily(kind)
    yy = np.full(ETAS.shape, y)
    v = link.evaluate(ETAS, yy)

    def ll(e):
        return link.loglik(e, yy)

    np.testing.assert_allclose(v.dl, central(ll, ETAS), atol=1e-6)
    # expected information: E[-d2 l] = dF^2 / (F (1 - F)) = omega
    F, f = link.cdf(ETAS), link.pdf(ETAS)
    np.testing.assert_allclose(v.omega, f * f / (F * (1 - F)), rtol=1e-12)


def test_probit_uses_table_weight_and_switch():
    eta = np.array([0.3, -1.2])
    y = np.array([1.0, 0.0])
    table = LinkFamily("probit").evaluate(eta, y)
    plain = LinkFamily("probit", omega="dF").evaluate(eta, y)
    np.testing.assert_array_equal(table.omega, table.H * table.dF)
    np.testing.assert_array_equal(plain.omega, plain.dF)
    lg = LinkFamily("logit").evaluate(eta, y)
    np.testing.assert_array_equal(lg.omega, lg.dF)


def test_unknown_link_rejected():
    with pytest.raises(ValueError):
        get_link("cloglog")


@pytest.mark.parametrize("kind", ["probit", "logit"])
def test_observed_newton_weight_is_minus_second_derivative(kind):
    link = LinkFamily(kind)
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
    w, r = link.working(ETAS, y, "observed")

    def ll(e):
        return link.loglik(e, y)

    d2 = (ll(ETAS + 1e-4) - 2 * ll(ETAS) + ll(ETAS - 1e-4)) / 1e-8
    np.testing.assert_allclose(w, -d2, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(r * w, central(ll, ETAS), atol=1e-6)


finite_eta = st.floats(min_value=-30, max_value=30, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(eta=finite_eta, y=st.sampled_from([0.0, 1.0]))
def test_link_invariants(eta, y):
    for kind in ("probit", "logit"):
        link = LinkFamily(kind)
        v = link.evaluate(np.array([eta]), np.array([y]))
        assert 0.0 < v.F[0] < 1.0
        assert v.dF[0] > 0.0
        # nu * dF == y - F (clamped probabilities)
        assert v.nu[0] * v.dF[0] == pytest.approx(y - v.F[0], abs=1e-12)
        f = link.pdf(eta)
        F = link.cdf(eta)
        if kind == "logit":
            assert link.dpdf(eta) == f * (1.0 - 2.0 * F)
        else:
            assert link.dpdf(eta) == -eta * f


def test_probit_tail_weights_are_finite():
    link = LinkFamily("probit")
    eta = np.array([-40.0, 40.0])
    for y in (0.0, 1.0):
        v = link.evaluate(eta, np.full(2, y))
        assert np.isfinite(v.omega).all() and np.isfinite(v.dl).all()
        w, r = link.working(eta, np.full(2, y))
        assert np.isfinite(w).all() and np.isfinite(r).all()


def test_probit_cdf_is_standard_normal():
    np.testing.assert_allclose(LinkFamily("probit").cdf(ETAS), stats.norm.cdf(ETAS), rtol=1e-14)
