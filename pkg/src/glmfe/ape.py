"""Average partial effects (direct and long-run), their bias corrections and covariance."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as la

from .bias import cell_ratio_sum, cell_scales, spectral_sum, spj_correct, split_dims
from .demean import map_project_columns
from .links import LinkFamily, get_link
from .mle import FitResult, NewtonControl
from .panel import PanelDataset, PanelError, binary_columns

DENOM_EPS = 1e-8


class LongRunDenominatorError(ArithmeticError):
    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


@dataclass(frozen=True)
class ApeSet:
    """Average partial effects with per-row caches.

    ``Delta``, ``dDelta`` and ``d2Delta`` hold the partial effect and its first
    two derivatives with respect to the linear index (rows x m); ``jac_sum`` is
    the column sum of its gradient with respect to the coefficients (p x m).
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    longrun: bool
    delta: np.ndarray
    Delta: np.ndarray = field(repr=False)
    dDelta: np.ndarray = field(repr=False)
    d2Delta: np.ndarray = field(repr=False)
    jac_sum: np.ndarray = field(repr=False)
    columns: tuple[int, ...] = ()
    cov: np.ndarray | None = None
    variant: str | None = None

    @property
    def se(self) -> np.ndarray | None:
        return None if self.cov is None else np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def with_cov(self, cov, variant):
        return replace(self, cov=cov, variant=variant)


# --------------------------------------------------------------------------
# bivariate truncated Taylor series (total degree <= 3) for the long-run probability

_DEG = 3


def _jet_mul(A, B):
    C = np.zeros_like(A)
    for a in range(_DEG + 1):
        for b in range(_DEG + 1 - a):
            acc = 0.0
            for a1 in range(a + 1):
                for b1 in range(b + 1):
                    acc = acc + A[a1, b1] * B[a - a1, b - b1]
            C[a, b] = acc
    return C


def _jet_inv(A):
    a0 = A[0, 0]
    E = A / a0
    E[0, 0] = 0.0
    one = np.zeros_like(A)
    one[0, 0] = 1.0
    E2 = _jet_mul(E, E)
    E3 = _jet_mul(E2, E)
    return (one - E + E2 - E3) / a0


def longrun_jet(link: LinkFamily, u0, u1):
    """Taylor coefficients ``c[a, b]`` of ``g(u0 + h0, u1 + h1) = F(u0+h0) / (1 - F(u1+h1) + F(u0+h0))``.

    Returns ``(c, one_minus_dy)``; partial derivatives are ``c[a, b] * a! * b!``.
    """
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    t0 = link.taylor(u0)
    t1 = link.taylor(u1)
    N = np.zeros((_DEG + 1, _DEG + 1) + u0.shape)
    Dn = np.zeros_like(N)
    N[:, 0] = t0
    one_minus_dy = 1.0 - (t1[0] - t0[0])
    Dn[0, 0] = one_minus_dy
    Dn[1:, 0] = t0[1:]
    Dn[0, 1:] = -t1[1:]
    return _jet_mul(N, _jet_inv(Dn)), one_minus_dy


def _jet_D(c, r):
    """r-th derivative along the common shift ``h0 = h1 = h``."""
    fact = (1.0, 1.0, 2.0, 6.0)[r]
    return fact * sum(c[a, r - a] for a in range(r + 1))


# --------------------------------------------------------------------------
# per-row partial effects

def _direct_parts(link, X, beta, eta, k, binary):
    if binary:
        x = X[:, k]
        e1 = eta + beta[k] * (1.0 - x)
        e0 = eta - beta[k] * x
        f1, f0 = link.pdf(e1), link.pdf(e0)
        Delta = link.cdf(e1) - link.cdf(e0)
        d1 = f1 - f0
        d2 = link.dpdf(e1) - link.dpdf(e0)
        X1 = X.copy()
        X1[:, k] = 1.0
        X0 = X.copy()
        X0[:, k] = 0.0
        jac = X1.T @ f1 - X0.T @ f0
    else:
        f = link.pdf(eta)
        fp = link.dpdf(eta)
        Delta = beta[k] * f
        d1 = beta[k] * fp
        d2 = beta[k] * link.d2pdf(eta)
        jac = beta[k] * (X.T @ fp)
        jac[k] += f.sum()
    return Delta, d1, d2, jac


def _longrun_parts(link, X, beta, eta, k, binary, lag, check_rows):
    u0 = eta - beta[lag] * X[:, lag]
    u1 = u0 + beta[lag]
    p = X.shape[1]

    def dirs(Xz):
        du0 = Xz.copy()
        du0[:, lag] = 0.0
        du1 = Xz.copy()
        du1[:, lag] = 1.0
        return du0, du1

    if binary:
        x = X[:, k]
        out = []
        for z in (1.0, 0.0):
            shift = beta[k] * (z - x)
            c, den = longrun_jet(link, u0 + shift, u1 + shift)
            check_rows(den)
            Xz = X.copy()
            Xz[:, k] = z
            du0, du1 = dirs(Xz)
            jac = du0.T @ c[1, 0] + du1.T @ c[0, 1]
            out.append((c[0, 0], _jet_D(c, 1), _jet_D(c, 2), jac))
        (g1, a1, b1, j1), (g0, a0, b0, j0) = out
        return g1 - g0, a1 - a0, b1 - b0, j1 - j0
    c, den = longrun_jet(link, u0, u1)
    check_rows(den)
    Dg = _jet_D(c, 1)
    du0, du1 = dirs(X)
    d0Dg = 2.0 * c[2, 0] + c[1, 1]
    d1Dg = c[1, 1] + 2.0 * c[0, 2]
    jac = beta[k] * (du0.T @ d0Dg + du1.T @ d1Dg)
    jac[k] += Dg.sum()
    return beta[k] * Dg, beta[k] * _jet_D(c, 2), beta[k] * _jet_D(c, 3), jac


def compute_apes(ds: PanelDataset, link: LinkFamily | str, beta, eta, longrun: bool = False,
                 columns=None) -> ApeSet:
    """Average partial effects at coefficients ``beta`` and linear index ``eta``.

    Binary regressors (support within {0, 1}, and the lagged outcome) use the
    discrete contrast with the other index components held fixed; the remaining
    regressors use the derivative. ``longrun=True`` replaces the outcome
    probability by its stationary counterpart and needs a lag column.
    """
    link = get_link(link)
    beta = np.asarray(beta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    X = ds.X
    binary = binary_columns(ds)
    if longrun and ds.lag_col is None:
        raise PanelError("long-run effects need a lagged outcome column")
    if columns is None:
        columns = [k for k in range(ds.p) if not (longrun and k == ds.lag_col)]
    columns = tuple(int(k) for k in columns)

    def check_rows(den):
        bad = np.flatnonzero(den <= DENOM_EPS)
        if bad.size:
            raise LongRunDenominatorError(
                f"1 - Delta_y <= {DENOM_EPS} in {bad.size} row(s), first rows {bad[:10].tolist()}", bad)

    parts = []
    for k in columns:
        if longrun:
            if k == ds.lag_col:
                raise PanelError("no long-run effect is defined for the lagged outcome itself")
            parts.append(_longrun_parts(link, X, beta, eta, k, bool(binary[k]), ds.lag_col, check_rows))
        else:
            parts.append(_direct_parts(link, X, beta, eta, k, bool(binary[k])))
    m = len(columns)
    if m:
        Delta = np.column_stack([q[0] for q in parts])
        d1 = np.column_stack([q[1] for q in parts])
        d2 = np.column_stack([q[2] for q in parts])
        jac = np.column_stack([q[3] for q in parts])
    else:
        Delta = d1 = d2 = np.zeros((ds.n, 0))
        jac = np.zeros((ds.p, 0))
    kinds = tuple("lag" if k == ds.lag_col else ("binary" if binary[k] else "continuous")
                  for k in columns)
    return ApeSet(
        names=tuple(ds.x_names[k] for k in columns), kinds=kinds, longrun=longrun,
        delta=Delta.mean(axis=0), Delta=Delta, dDelta=d1, d2Delta=d2, jac_sum=jac, columns=columns,
    )


def ape_direct(fit: FitResult, ds: PanelDataset | None = None, link=None, columns=None) -> ApeSet:
    """Direct APEs at the coefficients and linear index stored in ``fit``."""
    ds = fit.ds if ds is None else ds
    return compute_apes(ds, link or fit.link, fit.beta, fit.eta, False, columns)


def ape_longrun(fit: FitResult, ds: PanelDataset | None = None, link=None, columns=None) -> ApeSet:
    """Long-run APEs based on the stationary probability ``F|y=0 / (1 - Delta_y)``."""
    ds = fit.ds if ds is None else ds
    return compute_apes(ds, link or fit.link, fit.beta, fit.eta, True, columns)


# --------------------------------------------------------------------------
# analytical bias correction

@dataclass(frozen=True)
class ApeBiasTerms:
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray | None
    L: int


def _projections(ape, fit, ctl):
    ds = fit.ds
    omega = fit.omega
    Psi = ape.dDelta / omega[:, None]
    MPsi = map_project_columns(Psi, omega, ds, ctl.tol_inner, ctl.max_inner) if Psi.size else Psi
    return Psi, MPsi, Psi - MPsi


def ape_bias_terms(ape: ApeSet, fit: FitResult, L: int = 1, controls: NewtonControl | None = None,
                   ) -> ApeBiasTerms:
    """Leading APE bias terms, evaluated at ``fit`` (normally the offset refit at corrected coefficients)."""
    ctl = controls or NewtonControl()
    ds = fit.ds
    lay = ds.layout
    nJT, nIT, nIJ = cell_scales(ds)
    lv = fit.link.evaluate(fit.eta, ds.y)
    _, MPsi, PPsi = _projections(ape, fit, ctl)
    num = -(lv.H * lv.d2F)[:, None] * PPsi + ape.d2Delta
    if not (lay.is_three_way or lay.is_two_way):
        raise PanelError(f"no analytical APE correction for layout {lay.dims}")
    B1 = cell_ratio_sum(lay.codes["JT"], lay.level_counts["JT"], num, lv.omega) / (2 * nJT)
    B2 = cell_ratio_sum(lay.codes["IT"], lay.level_counts["IT"], num, lv.omega) / (2 * nIT)
    B3 = None
    if lay.is_three_way:
        pairs = ds.pair_codes()
        n_pairs = int(pairs.max()) + 1
        sums = np.column_stack([np.bincount(pairs, weights=num[:, k], minlength=n_pairs)
                                for k in range(num.shape[1])])
        if L > 0:
            sums = sums + 2.0 * spectral_sum(ds, lv.dl, lv.omega[:, None] * MPsi, L, factor="l")
        wsum = np.bincount(pairs, weights=lv.omega, minlength=n_pairs)
        B3 = (sums / wsum[:, None]).sum(axis=0) / (2 * nIJ)
    return ApeBiasTerms(B1, B2, B3, L)


def ape_abc_correct(ape: ApeSet, fit: FitResult, L: int = 1, I=None, J=None, T=None,
                    controls: NewtonControl | None = None, return_terms: bool = False):
    """``delta - B1/I - B2/J - B3/T`` with all terms evaluated at ``fit``."""
    terms = ape_bias_terms(ape, fit, L, controls)
    eI, eJ, eT = fit.ds.extents
    I, J, T = I or eI, J or eJ, T or eT
    out = ape.delta - terms.B1 / I - terms.B2 / J
    if terms.B3 is not None:
        out = out - terms.B3 / T
    return (out, terms) if return_terms else out


def ape_spj_correct(ds: PanelDataset, ape_functional: Callable[[PanelDataset], np.ndarray],
                    dims=None, full=None):
    """Split-panel jackknife applied to an APE functional (dataset -> vector)."""
    return spj_correct(ds, ape_functional, dims or split_dims(ds), full=full)


# --------------------------------------------------------------------------
# covariance

def _group_outer_sum(codes, n_levels, A, minus_diag=False):
    sums = np.column_stack([np.bincount(codes, weights=A[:, k], minlength=n_levels)
                            for k in range(A.shape[1])])
    out = sums.T @ sums
    if minus_diag:
        out -= A.T @ A
    return out


def ape_covariance(ape: ApeSet, fit: FitResult, variant: str = "general",
                   weakly_exogenous: bool | None = None,
                   controls: NewtonControl | None = None) -> np.ndarray:
    """Covariance of the APE estimator.

    ``variant="general"`` uses the outer product of the summed demeaned effects;
    ``variant="independence"`` replaces it by within-cell double sums that exploit
    independent fixed-effect sequences. The cross term between the demeaned
    effects and later-period influence terms is added for pair-effect layouts
    with weakly exogenous regressors (default: when a lag column is present).
    """
    if variant not in ("general", "independence"):
        raise ValueError(f"unknown covariance variant {variant!r}")
    ctl = controls or NewtonControl()
    ds = fit.ds
    n = ds.n
    m = ape.delta.size
    if ape.Delta.shape != (n, m):
        raise ValueError("APE caches do not match the fit's sample")
    if m == 0:
        return np.zeros((0, 0))
    lv = fit.link.evaluate(fit.eta, ds.y)
    _, _, PPsi = _projections(ape, fit, ctl)
    Dbar = ape.Delta - ape.delta
    PX = ds.X - fit.MX
    jac = (ape.jac_sum - PX.T @ ape.dDelta) / n
    Winv_jac = la.solve(np.atleast_2d(fit.W_hat), jac, assume_a="sym")
    Gamma = (fit.MX @ Winv_jac) * (lv.omega * lv.nu)[:, None] + PPsi * lv.dl[:, None]

    lay = ds.layout
    if variant == "general":
        s = Dbar.sum(axis=0)
        v1 = np.outer(s, s)
    else:
        v1 = np.zeros((m, m))
        if "IT" in lay.dims:
            v1 += _group_outer_sum(lay.codes["IT"], lay.level_counts["IT"], Dbar)
        if "JT" in lay.dims:
            v1 += _group_outer_sum(lay.codes["JT"], lay.level_counts["JT"], Dbar, minus_diag=True)
        if "IJ" in lay.dims:
            pairs = ds.pair_codes()
            v1 += _group_outer_sum(pairs, int(pairs.max()) + 1, Dbar, minus_diag=True)
    v2 = Gamma.T @ Gamma
    if weakly_exogenous is None:
        weakly_exogenous = ds.lag_col is not None
    v3 = np.zeros((m, m))
    if weakly_exogenous and "IJ" in lay.dims:
        # sum over pairs of sum_{s>t} Dbar_t Gamma_s', via within-pair cumulative sums
        pairs = ds.pair_codes()
        csum = np.cumsum(Dbar, axis=0)
        start = np.r_[0, np.flatnonzero(np.diff(pairs)) + 1]
        first = np.repeat(start, np.diff(np.r_[start, n]))
        before = csum - Dbar - np.where(first[:, None] > 0, csum[np.maximum(first - 1, 0)], 0.0)
        A = before.T @ Gamma
        v3 = A + A.T
    V = (v1 + v2 + v3) / float(n) ** 2
    return 0.5 * (V + V.T)
