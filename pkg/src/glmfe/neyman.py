"""Variance estimation with additive fixed effects: closed-form biases and a simulation check.

The uncorrected estimator is the mean squared residual after removing all
fixed-effect means. Its expectation has a closed form, which gives exact
expected relative biases for the uncorrected, analytically corrected and
split-panel jackknife estimators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYOUTS = ("three-way", "two-way")

#: Grids of the reference tables: (N, T) for three-way, N for two-way.
THREE_WAY_GRID = ((10, 10), (25, 10), (25, 25), (50, 10), (50, 25), (50, 50))
TWO_WAY_GRID = (10, 25, 50, 100)


def _check_layout(layout):
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def within_residuals(z: np.ndarray, layout: str = "three-way") -> np.ndarray:
    """Residuals of a balanced ``(..., I, J, T)`` array after removing all fixed-effect means.

    Three-way removes the ``ij``, ``jt`` and ``it`` means (eight-term
    inclusion-exclusion); two-way removes the ``jt`` and ``it`` means.
    """
    _check_layout(layout)
    z = np.asarray(z, dtype=float)
    if z.ndim < 3:
        raise ValueError("expected a balanced array with trailing axes (I, J, T)")
    a_i, a_j, a_t = -3, -2, -1

    def m(*axes):
        return z.mean(axis=axes, keepdims=True)

    r = z - m(a_i) - m(a_j) + m(a_i, a_j)
    if layout == "three-way":
        r = r - m(a_t) + m(a_i, a_t) + m(a_j, a_t) - m(a_i, a_j, a_t)
    return r


def neyman_variance_fit(z: np.ndarray, layout: str = "three-way") -> np.ndarray:
    """Uncorrected variance estimate ``mean(residual**2)`` per leading batch index."""
    r = within_residuals(z, layout)
    return (r * r).mean(axis=(-3, -2, -1))


def expected_ratio(I: float, J: float, T: float, layout: str = "three-way") -> float:
    """``E[beta_hat] / beta``."""
    _check_layout(layout)
    out = (1 - 1 / I) * (1 - 1 / J)
    if layout == "three-way":
        out *= 1 - 1 / T
    return out


@dataclass(frozen=True)
class NeymanRow:
    N: int
    T: int | None
    uncorrected: float
    abc: float
    spj: float


def neyman_corrections(I: int, J: int, T: int | None = None, layout: str = "three-way",
                       beta_hat: float | None = None) -> dict:
    """Expected relative biases of the uncorrected, analytical and jackknife estimators.

    When ``beta_hat`` is given the analytically corrected estimate
    ``beta_hat * (1 + 1/I + 1/J [+ 1/T])`` is returned as well.
    """
    _check_layout(layout)
    three = layout == "three-way"
    if three and T is None:
        raise ValueError("three-way layout needs T")
    T = T if three else 1
    e = expected_ratio(I, J, T, layout)
    factor = 1 + 1 / I + 1 / J + (1 / T if three else 0.0)
    halves = expected_ratio(I / 2, J, T, layout) + expected_ratio(I, J / 2, T, layout)
    if three:
        halves += expected_ratio(I, J, T / 2, layout)
    k = 3 if three else 2
    out = {
        "uncorrected": e - 1,
        "abc": e * factor - 1,
        "spj": (k + 1) * e - halves - 1,
    }
    if beta_hat is not None:
        out["abc_estimate"] = float(beta_hat) * factor
    return out


def neyman_table(layout: str = "three-way") -> list[NeymanRow]:
    _check_layout(layout)
    rows = []
    if layout == "three-way":
        for N, T in THREE_WAY_GRID:
            c = neyman_corrections(N, N, T, layout)
            rows.append(NeymanRow(N, T, c["uncorrected"], c["abc"], c["spj"]))
    else:
        for N in TWO_WAY_GRID:
            c = neyman_corrections(N, N, None, layout)
            rows.append(NeymanRow(N, None, c["uncorrected"], c["abc"], c["spj"]))
    return rows


def format_table(rows, sep="\t") -> str:
    head = ["N", "T", "uncorrected", "abc", "spj"]
    lines = [sep.join(head)]
    for r in rows:
        lines.append(sep.join([str(r.N), "" if r.T is None else str(r.T),
                               f"{r.uncorrected:.3f}", f"{r.abc:.3f}", f"{r.spj:.3f}"]))
    return "\n".join(lines) + "\n"


def simulate_neyman(I: int, J: int, T: int, R: int, layout: str = "three-way", beta: float = 1.0,
                    seed: int = 0, batch: int = 500, fe_sd: float = 1.0) -> np.ndarray:
    """Uncorrected estimates over ``R`` replications of normal data with additive fixed effects."""
    _check_layout(layout)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = np.empty(R)
    done = 0
    while done < R:
        b = min(batch, R - done)
        fe = rng.normal(0, fe_sd, (b, I, 1, T)) + rng.normal(0, fe_sd, (b, 1, J, T))
        if layout == "three-way":
            fe = fe + rng.normal(0, fe_sd, (b, I, J, 1))
        z = fe + rng.normal(0, np.sqrt(beta), (b, I, J, T))
        out[done:done + b] = neyman_variance_fit(z, layout)
        done += b
    return out
