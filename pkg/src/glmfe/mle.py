"""Maximum likelihood for binary-choice models with high-dimensional fixed effects.

The Newton iterations concentrate out the fixed effects: each step projects the
working residual and the regressors with the weighted alternating-projection
operator and updates the linear predictor directly, so the dummy matrix is never
formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import scipy.linalg as la
from scipy.linalg import lapack

from .demean import ConvergenceError, GroupSums, map_project_columns
from .links import LinkFamily, get_link
from .panel import PanelDataset, PanelError

log = logging.getLogger(__name__)


class CollinearityError(np.linalg.LinAlgError):
    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


@dataclass(frozen=True)
class NewtonControl:
    tol_beta: float = 1e-8
    tol_dev: float = 1e-10
    tol_inner: float = 1e-9
    max_newton: int = 100
    step_halving_max: int = 10
    max_inner: int = 10_000
    pivot_tol: float = 1e-10
    #: "observed" (Newton) or "expected" (Fisher scoring) information in the iterations
    hessian: str = "observed"


@dataclass(frozen=True)
class SeparationReport:
    levels_dropped: Mapping[str, int]
    rows_dropped: int
    passes: int

    def __str__(self):
        parts = ", ".join(f"{d}={k}" for d, k in self.levels_dropped.items())
        return f"{self.rows_dropped} rows dropped ({parts}) in {self.passes} pass(es)"


@dataclass(frozen=True)
class FitResult:
    """Converged fit. ``MX`` is the projected regressor matrix at the final weights."""

    beta: np.ndarray
    fe: Mapping[str, np.ndarray]
    eta: np.ndarray
    omega: np.ndarray
    W_hat: np.ndarray
    deviance: float
    beta_cov: np.ndarray
    dropped: SeparationReport | None
    MX: np.ndarray = field(repr=False)
    ds: PanelDataset = field(repr=False)
    link: LinkFamily = LinkFamily()
    iterations: int = 0
    trace: tuple = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return self.ds.n

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))

    @property
    def x_names(self) -> tuple[str, ...]:
        return self.ds.x_names


# --------------------------------------------------------------------------
# separation screening

def screen_separation(ds: PanelDataset, link: LinkFamily | str | None = None):
    """Drop fixed-effect levels whose outcomes are all 0 or all 1, until none remain.

    Returns the screened dataset and a :class:`SeparationReport`.
    """
    keep = np.ones(ds.n, dtype=bool)
    dropped = {d: 0 for d in ds.layout.dims}
    passes = 0
    while True:
        passes += 1
        changed = False
        for d in ds.layout.dims:
            codes = ds.layout.codes[d]
            L = ds.layout.level_counts[d]
            cnt = np.bincount(codes[keep], minlength=L)
            ones = np.bincount(codes[keep], weights=ds.y[keep], minlength=L)
            bad = (cnt > 0) & ((ones == 0) | (ones == cnt))
            if bad.any():
                dropped[d] += int(bad.sum())
                keep &= ~bad[codes]
                changed = True
        if not keep.any():
            raise PanelError("no identifiable sample: every row belongs to a perfectly classified level")
        if not changed:
            break
    report = SeparationReport(dropped, int(ds.n - keep.sum()), passes)
    if keep.all():
        return ds, report
    return ds.subset(keep), report


# --------------------------------------------------------------------------
# helpers

def _solve_normal(MX: np.ndarray, omega: np.ndarray, rhs: np.ndarray, X: np.ndarray,
                  names, pivot_tol: float) -> np.ndarray:
    A = MX.T @ (omega[:, None] * MX)
    scale = np.sqrt(np.maximum(np.einsum("ik,i,ik->k", X, omega, X), 1e-300))
    As = A / np.outer(scale, scale)
    c, piv, rank, info = lapack.dpstrf(As, lower=1, tol=pivot_tol)
    if rank < A.shape[0]:
        bad = int(piv[rank]) - 1
        raise CollinearityError(
            f"regressor {names[bad]!r} is collinear with the fixed effects or other regressors",
            names[bad],
        )
    return la.cho_solve(la.cho_factor(A), rhs)


def recover_fixed_effects(ds: PanelDataset, target: np.ndarray, tol: float = 1e-11,
                          max_iter: int = 100_000, normalization: str = "first") -> dict:
    """Least-squares fixed-effect values reproducing ``target`` (an element of the dummy span)."""
    dims = ds.layout.dims
    codes = ds.layout.codes
    counts = {d: np.bincount(codes[d], minlength=ds.layout.level_counts[d]) for d in dims}
    fe = {d: np.zeros(ds.layout.level_counts[d]) for d in dims}
    resid = np.asarray(target, dtype=float).copy()
    for it in range(max_iter):
        delta = 0.0
        for d in dims:
            step = np.bincount(codes[d], weights=resid, minlength=fe[d].size) / counts[d]
            fe[d] += step
            resid -= step[codes[d]]
            delta = max(delta, float(np.max(np.abs(step))) if step.size else 0.0)
        if delta < tol:
            break
    else:
        raise ConvergenceError("fixed-effect recovery did not converge", delta)
    return normalize_fe(fe, normalization)


def normalize_fe(fe: Mapping[str, np.ndarray], how: str = "first") -> dict:
    """Shift constants between dimensions: level 0 (``"first"``) or the mean (``"mean"``)
    of every dimension but the first is set to zero. The linear predictor is unchanged."""
    fe = {d: np.array(v, dtype=float) for d, v in fe.items()}
    dims = list(fe)
    for d in dims[1:]:
        if fe[d].size == 0:
            continue
        shift = fe[d][0] if how == "first" else fe[d].mean()
        fe[d] -= shift
        fe[dims[0]] += shift
    return fe


def fe_contribution(ds: PanelDataset, fe: Mapping[str, np.ndarray]) -> np.ndarray:
    out = np.zeros(ds.n)
    for d, v in fe.items():
        out += v[ds.layout.codes[d]]
    return out


def _initial_eta(ds: PanelDataset, link: LinkFamily, offset: np.ndarray, ctl: NewtonControl):
    """Starting predictor in ``offset + span(D)``."""
    u = np.clip(link.inverse((ds.y + 0.5) / 2.0), -3.0, 3.0)
    # project onto the dummy span so that eta = offset + D alpha holds from the start
    Mu = map_project_columns(u - offset, np.ones(ds.n), ds, ctl.tol_inner, ctl.max_inner)
    return u - Mu


def _finish(ds, link, beta, eta_raw, ctl, dropped, iterations, trace, MX_start=None):
    p = ds.p
    offset = ds.X @ beta if p else np.zeros(ds.n)
    fe = recover_fixed_effects(ds, eta_raw - offset)
    eta = offset + fe_contribution(ds, fe)
    lv = link.evaluate(eta, ds.y)
    start = ds.X if MX_start is None else MX_start
    if p:
        MX = map_project_columns(start, lv.omega, ds, ctl.tol_inner, ctl.max_inner)
        W = MX.T @ (lv.omega[:, None] * MX) / ds.n
        try:
            cov = la.inv(W) / ds.n
        except la.LinAlgError as exc:
            raise CollinearityError("singular W_hat") from exc
    else:
        MX = np.zeros((ds.n, 0))
        W = np.zeros((0, 0))
        cov = np.zeros((0, 0))
    return FitResult(
        beta=np.asarray(beta, dtype=float), fe=fe, eta=eta, omega=lv.omega, W_hat=W,
        deviance=link.deviance(eta, ds.y), beta_cov=cov, dropped=dropped, MX=MX, ds=ds,
        link=link, iterations=iterations, trace=tuple(trace),
    )


# --------------------------------------------------------------------------
# estimation

def fit_mle(ds: PanelDataset, link: LinkFamily | str = "probit",
            controls: NewtonControl | None = None, screen: bool = True) -> FitResult:
    """Newton-Raphson MLE of the structural coefficients with concentrated-out fixed effects.

    Parameters
    ----------
    ds : PanelDataset
        Estimation sample; perfectly classified levels are screened out first
        unless ``screen`` is false.
    link : LinkFamily or {"probit", "logit"}
    controls : NewtonControl, optional
        Tolerances and iteration limits.

    Raises
    ------
    CollinearityError
        When a regressor is (numerically) absorbed by the fixed effects.
    ConvergenceError
        When the outer Newton loop exceeds ``max_newton`` iterations.
    """
    link = get_link(link)
    ctl = controls or NewtonControl()
    dropped = None
    if screen:
        ds, dropped = screen_separation(ds, link)
    if ds.p < 1:
        raise ValueError("fit_mle needs at least one regressor; use refit_fixed_effects_offset")
    X, y, names = ds.X, ds.y, ds.x_names
    beta = np.zeros(ds.p)
    eta = _initial_eta(ds, link, np.zeros(ds.n), ctl)
    dev = link.deviance(eta, y)
    MX = X
    trace = []
    for r in range(1, ctl.max_newton + 1):
        w, nu = link.working(eta, y, ctl.hessian)
        gs = GroupSums(ds, w)
        # previous projection is a valid warm start: it differs from X by a dummy-span element
        proj = map_project_columns(np.column_stack([nu, MX]), w, ds,
                                   ctl.tol_inner, ctl.max_inner, sums=gs)
        Mnu, MX = proj[:, 0], proj[:, 1:]
        step = _solve_normal(MX, w, MX.T @ (w * Mnu), X, names, ctl.pivot_tol)
        deta = nu - Mnu + MX @ step
        s = 1.0
        for _ in range(ctl.step_halving_max + 1):
            eta_new = eta + s * deta
            dev_new = link.deviance(eta_new, y)
            if dev_new <= dev + 1e-12 * max(1.0, abs(dev)):
                break
            s *= 0.5
        else:
            raise ConvergenceError(f"step halving failed at iteration {r}", float(np.max(np.abs(step))), trace)
        beta = beta + s * step
        dchange = abs(dev - dev_new) / (0.1 + abs(dev_new))
        bchange = float(np.max(np.abs(s * step)))
        trace.append((r, dev_new, bchange, s))
        log.debug("newton %d: deviance %.10g, |dbeta| %.3g, step %.3g", r, dev_new, bchange, s)
        eta, dev = eta_new, dev_new
        if bchange < ctl.tol_beta and dchange < ctl.tol_dev:
            break
    else:
        raise ConvergenceError(f"Newton-Raphson did not converge in {ctl.max_newton} iterations",
                               bchange, trace)
    return _finish(ds, link, beta, eta, ctl, dropped, r, trace, MX_start=MX)


def refit_fixed_effects_offset(ds: PanelDataset, link: LinkFamily | str, beta_fixed,
                               tol: float = 1e-10, controls: NewtonControl | None = None,
                               eta_start: np.ndarray | None = None) -> FitResult:
    """Maximize the likelihood over the fixed effects only, holding ``X @ beta_fixed`` as offset.

    ``eta_start`` (e.g. the predictor of a nearby fit) speeds up convergence.
    The returned :class:`FitResult` carries ``beta_fixed`` and the weights,
    projections and covariance evaluated at the refitted predictor.
    """
    link = get_link(link)
    ctl = controls or NewtonControl()
    beta = np.asarray(beta_fixed, dtype=float).ravel()
    if beta.size != ds.p:
        raise ValueError(f"beta_fixed has {beta.size} entries, dataset has {ds.p} regressors")
    if not np.isfinite(beta).all():
        raise ValueError("beta_fixed must be finite")
    offset = ds.X @ beta if ds.p else np.zeros(ds.n)
    y = ds.y
    if eta_start is None:
        eta = _initial_eta(ds, link, offset, ctl)
    else:
        r0 = np.asarray(eta_start, dtype=float) - offset
        eta = offset + r0 - map_project_columns(r0, np.ones(ds.n), ds, ctl.tol_inner, ctl.max_inner)
    dev = link.deviance(eta, y)
    trace = []
    for r in range(1, ctl.max_newton + 1):
        w, nu = link.working(eta, y, ctl.hessian)
        Mnu = map_project_columns(nu, w, ds, ctl.tol_inner, ctl.max_inner)
        deta = nu - Mnu
        s = 1.0
        for _ in range(ctl.step_halving_max + 1):
            eta_new = eta + s * deta
            dev_new = link.deviance(eta_new, y)
            if dev_new <= dev + 1e-12 * max(1.0, abs(dev)):
                break
            s *= 0.5
        else:
            raise ConvergenceError(f"offset refit step halving failed at iteration {r}", trace=trace)
        change = float(np.max(np.abs(s * deta)))
        dchange = abs(dev - dev_new) / (0.1 + abs(dev_new))
        trace.append((r, dev_new, change, s))
        eta, dev = eta_new, dev_new
        if change < tol or (dchange < ctl.tol_dev * 1e-2 and change < 1e3 * tol):
            break
    else:
        raise ConvergenceError(f"offset refit did not converge in {ctl.max_newton} iterations",
                               change, trace)
    return _finish(ds, link, beta, eta, ctl, None, r, trace)


def beta_covariance(fit: FitResult, n: int | None = None) -> np.ndarray:
    """``W_hat^{-1} / n``; ``n`` defaults to the estimation sample size."""
    n = fit.n if n is None else n
    W = np.atleast_2d(fit.W_hat)
    try:
        cov = la.inv(W) / n
    except la.LinAlgError as exc:
        raise CollinearityError("W_hat is singular") from exc
    if not np.isfinite(cov).all():
        raise CollinearityError("W_hat is singular")
    return 0.5 * (cov + cov.T)


def with_beta_cov(fit: FitResult, cov: np.ndarray) -> FitResult:
    return replace(fit, beta_cov=cov)
