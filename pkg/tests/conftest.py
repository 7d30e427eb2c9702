import numpy as np
import pytest

from glmfe.panel import from_arrays, THREE_WAY


def random_panel(rng, I=4, J=4, T=3, p=1, link="logit", dims=THREE_WAY, no_self_flows=True,
                 beta=None, scale=1.0):
    ii, jj, tt = np.meshgrid(np.arange(I), np.arange(J), np.arange(T), indexing="ij")
    ii, jj, tt = ii.ravel(), jj.ravel(), tt.ravel()
    n = ii.size
    X = rng.normal(size=(n, p))
    beta = np.ones(p) * 0.5 if beta is None else np.asarray(beta)
    eta = X @ beta + scale * (rng.normal(size=I * T)[ii * T + tt] * 0.5
                              + rng.normal(size=J * T)[jj * T + tt] * 0.5
                              + rng.normal(size=I * J)[ii * J + jj] * 0.5)
    if link == "logit":
        eps = rng.logistic(size=n)
    else:
        eps = rng.normal(size=n)
    y = (eta >= eps).astype(float)
    return from_arrays(ii, jj, tt, y, X, fe_dims=dims, no_self_flows=no_self_flows)


def estimable_panel(seed, I=5, J=5, T=4, p=1, link="logit", dims=THREE_WAY, no_self_flows=False,
                    beta=None, scale=0.3, max_eta=8.0, max_tries=200):
    """First screened random panel, from ``seed`` upwards, whose MLE exists (LP oracle)
    with a dense-oracle linear predictor below ``max_eta`` in absolute value."""
    from glmfe.mle import screen_separation
    from glmfe.panel import PanelError
    from oracles import dense_mle, has_finite_mle
    for s in range(seed, seed + max_tries):
        rng = np.random.default_rng(s)
        ds = random_panel(rng, I, J, T, p=p, link=link, dims=dims, no_self_flows=no_self_flows,
                          beta=beta, scale=scale)
        try:
            ds, _ = screen_separation(ds)
        except PanelError:
            continue
        if ds.n > 2 * p + 4 and has_finite_mle(ds):
            try:
                _, eta, _ = dense_mle(ds, link)
            except (ValueError, np.linalg.LinAlgError):
                continue
            # keep well-conditioned optima only
            if np.max(np.abs(eta)) < max_eta:
                return ds
    raise RuntimeError(f"no estimable panel in {max_tries} draws from seed {seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
