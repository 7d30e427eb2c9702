"""Network panel data model: (exporter, importer, period) rows, fixed-effect layouts and lags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

#: Fixed-effect dimensions and the index components that key each of them.
DIM_KEYS: dict[str, tuple[str, ...]] = {
    "IT": ("i", "t"),
    "JT": ("j", "t"),
    "IJ": ("i", "j"),
    "I": ("i",),
    "J": ("j",),
    "T": ("t",),
}

THREE_WAY = ("IT", "JT", "IJ")
TWO_WAY = ("IT", "JT")
ONE_WAY_EACH = ("I", "J", "T")

# canonical sweep order used everywhere
_DIM_ORDER = ("IT", "JT", "IJ", "I", "J", "T")


class PanelError(ValueError):
    """Invalid panel input. ``rows`` holds offending row positions when known."""

    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = list(rows)


@dataclass(frozen=True)
class ObsIndex:
    i: int
    j: int
    t: int


@dataclass(frozen=True)
class FeLayout:
    """Active fixed-effect groupings with dense level codes per row.

    Codes are assigned in first-appearance order over the canonically sorted rows.
    """

    dims: tuple[str, ...]
    codes: Mapping[str, np.ndarray]
    level_counts: Mapping[str, int]
    level_keys: Mapping[str, np.ndarray] = field(repr=False)

    @classmethod
    def build(cls, dims: Iterable[str], i: np.ndarray, j: np.ndarray, t: np.ndarray) -> "FeLayout":
        dims = tuple(dims)
        if not dims:
            raise PanelError("fixed-effect layout needs at least one dimension")
        unknown = [d for d in dims if d not in DIM_KEYS]
        if unknown:
            raise PanelError(f"unknown fixed-effect dimension(s): {unknown}")
        if len(set(dims)) != len(dims):
            raise PanelError(f"duplicate fixed-effect dimension in {dims}")
        dims = tuple(sorted(dims, key=_DIM_ORDER.index))
        comps = {"i": i, "j": j, "t": t}
        codes, counts, keys = {}, {}, {}
        for d in dims:
            key = np.column_stack([comps[c] for c in DIM_KEYS[d]])
            uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
            # relabel so that level codes follow first appearance
            order = np.argsort(first, kind="stable")
            rank = np.empty_like(order)
            rank[order] = np.arange(order.size)
            c = rank[inv.ravel()].astype(np.intp)
            c.setflags(write=False)
            codes[d] = c
            counts[d] = int(uniq.shape[0])
            keys[d] = uniq[order]
        return cls(dims, codes, counts, keys)

    @property
    def is_three_way(self) -> bool:
        return set(self.dims) == set(THREE_WAY)

    @property
    def is_two_way(self) -> bool:
        return set(self.dims) == set(TWO_WAY)


@dataclass(frozen=True)
class PanelDataset:
    """Immutable panel of binary outcomes.

    Rows are kept sorted by ``(i, j, t)`` so that each directed pair forms a
    contiguous, time-ordered block.
    """

    i: np.ndarray
    j: np.ndarray
    t: np.ndarray
    y: np.ndarray
    X: np.ndarray
    x_names: tuple[str, ...]
    layout: FeLayout
    lag_col: int | None = None
    balanced: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def extents(self) -> tuple[int, int, int]:
        """Number of distinct exporters, importers and periods."""
        return (np.unique(self.i).size, np.unique(self.j).size, np.unique(self.t).size)

    @property
    def rows(self) -> list[ObsIndex]:
        return [ObsIndex(int(a), int(b), int(c)) for a, b, c in zip(self.i, self.j, self.t)]

    def indicator(self, dim: str) -> sp.csr_matrix:
        """Sparse level-by-row indicator matrix of ``dim`` (cached)."""
        key = ("ind", dim)
        if key not in self._cache:
            codes = self.layout.codes[dim]
            self._cache[key] = sp.csr_matrix(
                (np.ones(self.n), (codes, np.arange(self.n))),
                shape=(self.layout.level_counts[dim], self.n),
            )
        return self._cache[key]

    def pair_codes(self) -> np.ndarray:
        """Dense code of the directed pair (i, j) of each row, regardless of the layout."""
        if "pair" not in self._cache:
            _, inv = np.unique(np.column_stack([self.i, self.j]), axis=0, return_inverse=True)
            self._cache["pair"] = inv.ravel()
        return self._cache["pair"]

    def lag_index(self, lag: int) -> np.ndarray:
        """Row position of ``(i, j, t - lag)`` for every row, ``-1`` when unobserved."""
        key = ("lagidx", lag)
        if key not in self._cache:
            out = np.full(self.n, -1, dtype=np.intp)
            if self.n:
                # rows are sorted by (i, j, t), so pair * span + t is increasing
                t0 = self.t.min()
                span = int(self.t.max() - t0) + 1
                pair = self.pair_codes().astype(np.int64)
                keys = pair * span + (self.t - t0)
                pos = np.searchsorted(keys, keys - lag)
                pos_c = np.minimum(pos, self.n - 1)
                hit = (
                    (pos < self.n)
                    & (self.i[pos_c] == self.i)
                    & (self.j[pos_c] == self.j)
                    & (self.t[pos_c] == self.t - lag)
                )
                out[hit] = pos_c[hit]
            self._cache[key] = out
        return self._cache[key]

    def subset(self, mask: np.ndarray, dims: Sequence[str] | None = None) -> "PanelDataset":
        """Row subset with fixed-effect levels recoded densely."""
        mask = np.asarray(mask)
        if mask.dtype != bool:
            m = np.zeros(self.n, dtype=bool)
            m[mask] = True
            mask = m
        return _assemble(
            self.i[mask], self.j[mask], self.t[mask], self.y[mask], self.X[mask],
            self.x_names, dims or self.layout.dims, self.lag_col, presorted=True,
        )

    def with_layout(self, dims: Sequence[str]) -> "PanelDataset":
        return self.subset(np.ones(self.n, dtype=bool), dims)

    def with_X(self, X: np.ndarray, x_names: Sequence[str], lag_col: int | None) -> "PanelDataset":
        return _assemble(self.i, self.j, self.t, self.y, X, tuple(x_names),
                         self.layout.dims, lag_col, presorted=True)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _assemble(i, j, t, y, X, x_names, dims, lag_col, presorted=False) -> PanelDataset:
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    if not presorted:
        order = np.lexsort((t, j, i))
        i, j, t, y, X = i[order], j[order], t[order], y[order], X[order]
    layout = FeLayout.build(dims, i, j, t)
    n_pairs = np.unique(np.column_stack([i, j]), axis=0).shape[0] if i.size else 0
    balanced = bool(i.size) and i.size == n_pairs * np.unique(t).size
    return PanelDataset(
        _freeze(i), _freeze(j), _freeze(t), _freeze(y), _freeze(X),
        tuple(x_names), layout, lag_col, balanced,
    )


def from_arrays(
    i, j, t, y, X, *,
    x_names: Sequence[str] | None = None,
    fe_dims: Sequence[str] = THREE_WAY,
    no_self_flows: bool = False,
    lag_col: int | None = None,
) -> PanelDataset:
    """Validate column arrays and build a :class:`PanelDataset`.

    Raises
    ------
    PanelError
        On duplicate ``(i, j, t)`` keys, non-binary outcomes, non-finite regressors
        or an empty sample. ``PanelError.rows`` lists offending input positions.
    """
    i = np.asarray(i, dtype=np.int64).ravel()
    j = np.asarray(j, dtype=np.int64).ravel()
    t = np.asarray(t, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(n, -1) if X.size else np.zeros((n, 0))
    if not (i.shape[0] == j.shape[0] == t.shape[0] == n == X.shape[0]):
        raise PanelError("index, outcome and regressor arrays differ in length")
    if n == 0:
        raise PanelError("at least one row is required")
    if x_names is None:
        x_names = [f"x{k + 1}" for k in range(X.shape[1])]
    if len(x_names) != X.shape[1]:
        raise PanelError("x_names does not match the number of regressor columns")

    bad = np.flatnonzero((y != 0) & (y != 1))
    if bad.size:
        raise PanelError(f"non-binary outcome in row(s) {bad[:10].tolist()}", bad)
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise PanelError(f"non-finite regressor in row(s) {bad[:10].tolist()}", bad)

    keep = np.ones(n, dtype=bool)
    if no_self_flows:
        keep &= i != j
    pos = np.flatnonzero(keep)
    order = pos[np.lexsort((t[pos], j[pos], i[pos]))]
    si, sj, st = i[order], j[order], t[order]
    dup = np.flatnonzero((si[1:] == si[:-1]) & (sj[1:] == sj[:-1]) & (st[1:] == st[:-1]))
    if dup.size:
        r = [int(order[dup[0]]), int(order[dup[0] + 1])]
        raise PanelError(
            f"duplicate observation (i={si[dup[0]]}, j={sj[dup[0]]}, t={st[dup[0]]}) in rows {r}", r
        )
    if order.size == 0:
        raise PanelError("no rows left after removing self-flows")
    return _assemble(si, sj, st, y[order], X[order], x_names, fe_dims, lag_col, presorted=True)


def build_dataset(
    rows: Iterable[Sequence[float]],
    *,
    no_self_flows: bool = False,
    fe_dims: Sequence[str] = THREE_WAY,
    x_names: Sequence[str] | None = None,
) -> PanelDataset:
    """Build a dataset from ``(i, j, t, y, x1, ..., xp)`` tuples."""
    rows = [tuple(r) for r in rows]
    if not rows:
        raise PanelError("at least one row is required")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or min(widths) < 4:
        raise PanelError("rows must all have the form (i, j, t, y, x1, ..., xp)")
    arr = np.array(rows, dtype=float)
    return from_arrays(
        arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4:],
        x_names=x_names, fe_dims=fe_dims, no_self_flows=no_self_flows,
    )


def add_lag_column(ds: PanelDataset, name: str = "y_lag") -> PanelDataset:
    """Prepend ``y`` at ``(i, j, t-1)`` as a regressor, dropping rows without a predecessor."""
    prev = ds.lag_index(1)
    ok = prev >= 0
    if not ok.any():
        raise PanelError("no estimable rows: no pair is observed in two consecutive periods")
    while name in ds.x_names:
        name = name + "_"
    lag = ds.y[prev[ok]]
    X = np.column_stack([lag, ds.X[ok]])
    return _assemble(
        ds.i[ok], ds.j[ok], ds.t[ok], ds.y[ok], X, (name,) + ds.x_names,
        ds.layout.dims, 0, presorted=True,
    )


def binary_columns(ds: PanelDataset) -> np.ndarray:
    """Boolean mask of regressors whose observed support is within {0, 1}; the lag always counts."""
    X = ds.X
    mask = np.all((X == 0) | (X == 1), axis=0) if ds.n else np.zeros(ds.p, dtype=bool)
    if ds.lag_col is not None:
        mask[ds.lag_col] = True
    return mask
