"""Weighted within transformations and alternating projections onto the fixed-effect complement.

``map_project`` computes ``v - D (D' W D)^{-1} D' W v`` by cycling one-way weighted
demeaning over the active fixed-effect dimensions without forming ``D``.
"""

from __future__ import annotations

import numpy as np

from .panel import PanelDataset

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


class ConvergenceError(RuntimeError):
    """An iterative routine stopped before reaching its tolerance."""

    def __init__(self, message: str, last_delta: float = float("nan"), trace=None):
        super().__init__(message)
        self.last_delta = last_delta
        self.trace = trace or []


class GroupSums:
    """Per-dimension accumulators of ``sum(w * v)`` and ``sum(w)`` over fixed-effect levels."""

    def __init__(self, ds: PanelDataset, omega: np.ndarray, dims=None):
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (ds.n,):
            raise ValueError(f"weights have shape {omega.shape}, expected ({ds.n},)")
        self.ds = ds
        self.omega = omega
        self.dims = tuple(dims) if dims is not None else ds.layout.dims
        self.codes = {d: ds.layout.codes[d] for d in self.dims}
        self.inv_wsum = {}
        for d in self.dims:
            wsum = np.bincount(self.codes[d], weights=omega, minlength=ds.layout.level_counts[d])
            bad = np.flatnonzero(~(wsum > 0))
            if bad.size:
                key = ds.layout.level_keys[d][bad[0]]
                raise ValueError(f"level {tuple(int(k) for k in key)} of {d} has zero total weight")
            self.inv_wsum[d] = 1.0 / wsum

    def cell_means(self, dim: str, V: np.ndarray) -> np.ndarray:
        """Weighted level means of the columns of ``V`` (levels x columns)."""
        S = self.ds.indicator(dim)
        sums = S @ (self.omega[:, None] * V)
        return sums * self.inv_wsum[dim][:, None]

    def demean(self, dim: str, V: np.ndarray) -> np.ndarray:
        return V - self.cell_means(dim, V)[self.codes[dim]]


def within_transform(dim: str, v, omega, ds: PanelDataset) -> np.ndarray:
    """One-way weighted demeaning of ``v`` within the levels of ``dim``."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != ds.n:
        raise ValueError("vector length does not match the dataset")
    gs = GroupSums(ds, omega, (dim,))
    return gs.demean(dim, v.reshape(ds.n, -1)).reshape(v.shape)


def _sweep_until_converged(gs: GroupSums, V: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    V = np.array(V, dtype=float, copy=True)
    active = np.arange(V.shape[1])
    delta = np.inf
    for _ in range(max_iter):
        if active.size == 0:
            return V
        W = V[:, active]
        prev = W.copy()
        for d in gs.dims:
            W = gs.demean(d, W)
        change = np.max(np.abs(W - prev), axis=0) if W.size else np.zeros(active.size)
        V[:, active] = W
        delta = float(change.max()) if change.size else 0.0
        active = active[change >= tol]
    if active.size == 0:
        return V
    raise ConvergenceError(
        f"alternating projections did not converge in {max_iter} sweeps (last change {delta:.3g})",
        last_delta=delta,
    )


def map_project_columns(V, omega, ds: PanelDataset, tol: float = DEFAULT_TOL,
                        max_iter: int = DEFAULT_MAX_ITER, sums: GroupSums | None = None) -> np.ndarray:
    """Column-wise :func:`map_project` sharing one set of level weight sums.

    Any input already differing from the target columns by an element of the
    fixed-effect span gives the same result, so a previous projection is a valid
    warm start.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.asarray(V, dtype=float)
    one_d = V.ndim == 1
    V = V.reshape(ds.n, -1)
    gs = sums if sums is not None else GroupSums(ds, omega)
    if len(gs.dims) == 1:
        out = gs.demean(gs.dims[0], V)
    else:
        out = _sweep_until_converged(gs, V, tol, max_iter)
    return out.ravel() if one_d else out


def map_project(v, omega, ds: PanelDataset, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Residual of the weighted projection of ``v`` on all fixed-effect dummies."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("map_project expects a vector; use map_project_columns for matrices")
    return map_project_columns(v, omega, ds, tol, max_iter)
