"""Analytical and split-panel jackknife corrections of the incidental parameter bias."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.linalg as la
from scipy import stats

from .links import LinkFamily, get_link
from .mle import CollinearityError, FitResult
from .panel import PanelDataset, PanelError


@dataclass(frozen=True)
class AbcTerms:
    """Leading bias terms of the coefficients. ``B3`` is ``None`` without pair effects.

    ``B3_spectral`` is the part of ``B3`` coming from the truncated spectral sum.
    """

    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray | None
    W_hat: np.ndarray
    L: int
    B3_spectral: np.ndarray | None = None
    skipped_cells: int = 0


def cell_ratio_sum(codes: np.ndarray, n_levels: int, num: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """``sum_cells (sum_in_cell num) / (sum_in_cell omega)`` for a (rows x k) numerator."""
    num = np.asarray(num, dtype=float).reshape(codes.size, -1)
    wsum = np.bincount(codes, weights=omega, minlength=n_levels)
    sums = np.column_stack([np.bincount(codes, weights=num[:, k], minlength=n_levels)
                            for k in range(num.shape[1])]) if num.shape[1] else np.zeros((n_levels, 0))
    ok = wsum > 0
    return (sums[ok] / wsum[ok][:, None]).sum(axis=0)


def cell_scales(ds: PanelDataset) -> tuple[float, float, float]:
    """Normalizers ``n/I``, ``n/J``, ``n/T`` of the ``jt``, ``it`` and ``ij`` bias sums.

    They equal ``JT``, ``IT`` and ``IJ`` on a balanced panel; on an unbalanced one
    (e.g. after dropping perfectly classified pairs) each bias term divided by its
    extent becomes a per-observation average, ``sum_cells(...) / (2 n)``.
    """
    I, J, T = ds.extents
    n = float(ds.n)
    return n / I, n / J, n / T


def spectral_sum(ds: PanelDataset, dl: np.ndarray, weighted: np.ndarray, L: int,
                 factor: str = "l") -> np.ndarray:
    """``sum_{l=1..L} c_l sum_t dl[t-l] * weighted[t]`` per pair, stacked as (pairs x k).

    ``factor="L"`` uses ``c_l = T/(T-L)`` for every lag, ``factor="l"`` uses ``T/(T-l)``.
    ``T`` is the number of distinct periods.
    """
    weighted = np.asarray(weighted, dtype=float).reshape(ds.n, -1)
    pairs = ds.pair_codes()
    n_pairs = int(pairs.max()) + 1 if ds.n else 0
    out = np.zeros((n_pairs, weighted.shape[1]))
    T = ds.extents[2]
    if L >= T:
        raise ValueError(f"bandwidth L={L} is too large for T={T}")
    for lag in range(1, L + 1):
        prev = ds.lag_index(lag)
        has = prev >= 0
        if not has.any():
            continue
        c = T / (T - (L if factor == "L" else lag))
        contrib = dl[prev[has]][:, None] * weighted[has]
        for k in range(weighted.shape[1]):
            out[:, k] += c * np.bincount(pairs[has], weights=contrib[:, k], minlength=n_pairs)
    return out


def _pair_ratio(ds, omega, num_rows, extra_pairs=None):
    pairs = ds.pair_codes()
    n_pairs = int(pairs.max()) + 1
    num = np.asarray(num_rows, dtype=float).reshape(ds.n, -1)
    sums = np.column_stack([np.bincount(pairs, weights=num[:, k], minlength=n_pairs)
                            for k in range(num.shape[1])])
    if extra_pairs is not None:
        sums = sums + extra_pairs
    wsum = np.bincount(pairs, weights=omega, minlength=n_pairs)
    return (sums / wsum[:, None]).sum(axis=0)


def _check_layout(ds, want):
    if set(ds.layout.dims) != set(want):
        raise PanelError(f"layout {ds.layout.dims} does not match the expected {want}")


def abc_terms(fit: FitResult, ds: PanelDataset | None = None, link: LinkFamily | str | None = None,
              L: int = 1, factor: str = "l") -> AbcTerms:
    """Bias terms of the three-way (``IT``, ``JT``, ``IJ``) estimator.

    ``L`` is the bandwidth of the spectral part of ``B3``; ``L=0`` for strictly
    exogenous regressors. ``factor`` selects the small-sample weight of lag ``l``
    (see :func:`spectral_sum`); ``"l"`` is the default. ``ds`` and ``link`` default
    to the ones stored in ``fit``.
    """
    if factor not in ("l", "L"):
        raise ValueError(f"factor must be 'l' or 'L', got {factor!r}")
    ds = fit.ds if ds is None else ds
    link = fit.link if link is None else get_link(link)
    _check_layout(ds, ("IT", "JT", "IJ"))
    if L < 0:
        raise ValueError("bandwidth L must be non-negative")
    nJT, nIT, nIJ = cell_scales(ds)
    lv = link.evaluate(fit.eta, ds.y)
    num = (lv.H * lv.d2F)[:, None] * fit.MX
    lay = ds.layout
    B1 = -cell_ratio_sum(lay.codes["JT"], lay.level_counts["JT"], num, lv.omega) / (2 * nJT)
    B2 = -cell_ratio_sum(lay.codes["IT"], lay.level_counts["IT"], num, lv.omega) / (2 * nIT)
    B3_base = -_pair_ratio(ds, lv.omega, num) / (2 * nIJ)
    if L > 0:
        spec = spectral_sum(ds, lv.dl, lv.omega[:, None] * fit.MX, L, factor)
        pairs = ds.pair_codes()
        wsum = np.bincount(pairs, weights=lv.omega, minlength=spec.shape[0])
        B3_spec = -(2.0 * spec / wsum[:, None]).sum(axis=0) / (2 * nIJ)
    else:
        B3_spec = np.zeros(ds.p)
    return AbcTerms(B1, B2, B3_base + B3_spec, fit.W_hat, L, B3_spec)


def abc_terms_twoway(fit: FitResult, ds: PanelDataset | None = None,
                     link: LinkFamily | str | None = None, L: int = 0) -> AbcTerms:
    """Bias terms of the two-way (``IT``, ``JT``) estimator; there is no spectral term."""
    ds = fit.ds if ds is None else ds
    link = fit.link if link is None else get_link(link)
    _check_layout(ds, ("IT", "JT"))
    nJT, nIT, _ = cell_scales(ds)
    lv = link.evaluate(fit.eta, ds.y)
    num = (lv.H * lv.d2F)[:, None] * fit.MX
    lay = ds.layout
    B1 = -cell_ratio_sum(lay.codes["JT"], lay.level_counts["JT"], num, lv.omega) / (2 * nJT)
    B2 = -cell_ratio_sum(lay.codes["IT"], lay.level_counts["IT"], num, lv.omega) / (2 * nIT)
    return AbcTerms(B1, B2, None, fit.W_hat, L)


def abc_correct_beta(fit: FitResult, terms: AbcTerms, I: int | None = None, J: int | None = None,
                     T: int | None = None) -> np.ndarray:
    """``beta - W^{-1} B1 / I - W^{-1} B2 / J - W^{-1} B3 / T``."""
    eI, eJ, eT = fit.ds.extents
    I, J, T = I or eI, J or eJ, T or eT
    bias = terms.B1 / I + terms.B2 / J
    if terms.B3 is not None:
        bias = bias + terms.B3 / T
    try:
        corr = la.solve(np.atleast_2d(terms.W_hat), bias, assume_a="sym")
    except la.LinAlgError as exc:
        raise CollinearityError("W_hat is singular") from exc
    return fit.beta - corr


def abc_terms_auto(fit: FitResult, L: int = 1) -> AbcTerms:
    if fit.ds.layout.is_three_way:
        return abc_terms(fit, L=L)
    if fit.ds.layout.is_two_way:
        return abc_terms_twoway(fit)
    raise PanelError(f"no analytical correction for layout {fit.ds.layout.dims}")


# --------------------------------------------------------------------------
# split-panel jackknife

@dataclass(frozen=True)
class SplitScheme:
    dim: str
    half_a: np.ndarray
    half_b: np.ndarray


LAG_MODES = ("observed", "rebuild")


def split_scheme(ds: PanelDataset, dim: str) -> SplitScheme:
    """First ``floor(n/2)`` and last ``floor(n/2)`` sorted labels of ``i``, ``j`` or ``t``.

    For an odd number of labels the middle one belongs to neither half.
    """
    labels = np.unique({"I": ds.i, "J": ds.j, "T": ds.t}[dim])
    n = labels.size
    if n < 2:
        raise PanelError(f"cannot split dimension {dim} with {n} level(s)")
    h = n // 2
    return SplitScheme(dim, labels[:h], labels[n - h:])


def split_halves(ds: PanelDataset, dim: str, lag: str = "observed") -> tuple[PanelDataset, PanelDataset]:
    """Row subsets for the two halves of ``dim``.

    With a lagged outcome and ``dim="T"``, ``lag="observed"`` keeps every row
    with its observed lag; ``lag="rebuild"`` drops rows whose previous period
    lies in the other half, so each half only uses its own periods.
    """
    if lag not in LAG_MODES:
        raise ValueError(f"lag must be one of {LAG_MODES}")
    scheme = split_scheme(ds, dim)
    col = {"I": ds.i, "J": ds.j, "T": ds.t}[dim]
    masks = [np.isin(col, scheme.half_a), np.isin(col, scheme.half_b)]
    if lag == "rebuild" and dim == "T" and ds.lag_col is not None:
        masks[1] &= ~np.isin(ds.t - 1, scheme.half_a)
        masks[0] &= ~np.isin(ds.t - 1, scheme.half_b)
    return ds.subset(masks[0]), ds.subset(masks[1])


def split_dims(ds: PanelDataset) -> tuple[str, ...]:
    if ds.layout.is_three_way:
        return ("I", "J", "T")
    if ds.layout.is_two_way:
        return ("I", "J")
    raise PanelError(f"no split-panel jackknife for layout {ds.layout.dims}")


def spj_combine(full, halves: Mapping[str, tuple]) -> np.ndarray:
    """``(1 + K) full - sum_d mean(halves_d)``, written so identical inputs return ``full`` exactly."""
    full = np.asarray(full, dtype=float)
    out = full.copy()
    for a, b in halves.values():
        out = out + (full - 0.5 * (np.asarray(a, dtype=float) + np.asarray(b, dtype=float)))
    return out


def spj_correct(ds: PanelDataset, estimator: Callable[[PanelDataset], np.ndarray],
                dims: tuple[str, ...] | None = None, full=None, return_halves: bool = False,
                lag: str = "observed"):
    """Split-panel jackknife of an arbitrary estimator functional.

    ``estimator`` maps a dataset to a vector (coefficients or APEs). Each half is
    a row subset of ``ds``; see :func:`split_halves` for ``lag``.
    """
    dims = split_dims(ds) if dims is None else dims
    full = estimator(ds) if full is None else full
    halves = {}
    for d in dims:
        a, b = split_halves(ds, d, lag)
        res = []
        for tag, half in (("first", a), ("second", b)):
            try:
                res.append(estimator(half))
            except Exception as exc:
                raise RuntimeError(f"{tag} half of split by {d} failed: {exc}") from exc
        halves[d] = tuple(res)
    out = spj_combine(full, halves)
    return (out, halves) if return_halves else out


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


def wald_homogeneity(beta_a, cov_a, beta_b, cov_b) -> WaldResult:
    """Wald test of equal coefficients across two independent half panels."""
    d = np.atleast_1d(np.asarray(beta_a, dtype=float) - np.asarray(beta_b, dtype=float))
    V = np.atleast_2d(cov_a) + np.atleast_2d(cov_b)
    try:
        stat = float(d @ la.solve(V, d, assume_a="sym"))
    except la.LinAlgError as exc:
        raise np.linalg.LinAlgError("pooled covariance of the halves is singular") from exc
    df = d.size
    return WaldResult(stat, df, float(stats.chi2.sf(stat, df)))
