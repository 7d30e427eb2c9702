"""Probit and logit link families with the derivatives used by estimation and bias correction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

#: Probabilities are clamped to ``[EPS, 1 - EPS]`` before ratios and logs.
EPS = 1e-15
_TINY = 1e-300
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class LinkValues(NamedTuple):
    F: np.ndarray
    dF: np.ndarray
    d2F: np.ndarray
    nu: np.ndarray
    H: np.ndarray
    omega: np.ndarray
    dl: np.ndarray


@dataclass(frozen=True)
class LinkFamily:
    """Binary-choice link.

    ``omega`` selects the working weight: ``"table"`` uses ``H * dF`` (the
    expected-Hessian weight; identical to ``dF`` for logit), ``"dF"`` uses ``dF``.
    """

    kind: str = "probit"
    omega: str = "table"

    def __post_init__(self):
        if self.kind not in ("probit", "logit"):
            raise ValueError(f"unknown link {self.kind!r}; expected 'probit' or 'logit'")
        if self.omega not in ("table", "dF"):
            raise ValueError(f"unknown weight variant {self.omega!r}")

    # -- scalar functions of the index -----------------------------------
    def cdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "logit":
            return special.expit(eta)
        return special.ndtr(eta)

    def sf(self, eta):
        """``1 - F(eta)`` computed without cancellation."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "logit":
            return special.expit(-eta)
        return special.ndtr(-eta)

    def pdf(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "logit":
            F = special.expit(eta)
            return F * special.expit(-eta)
        return _INV_SQRT_2PI * np.exp(-0.5 * eta * eta)

    def dpdf(self, eta):
        """Second derivative of F."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "logit":
            F = special.expit(eta)
            return self.pdf(eta) * (1.0 - 2.0 * F)
        return -eta * self.pdf(eta)

    def d2pdf(self, eta):
        """Third derivative of F."""
        eta = np.asarray(eta, dtype=float)
        f = self.pdf(eta)
        if self.kind == "logit":
            F = special.expit(eta)
            return f * (1.0 - 6.0 * F * (1.0 - F))
        return (eta * eta - 1.0) * f

    def taylor(self, eta, order: int = 3) -> np.ndarray:
        """Taylor coefficients ``F^(k)(eta) / k!`` for ``k = 0..order`` stacked on axis 0."""
        fns = (self.cdf, self.pdf, self.dpdf, self.d2pdf)
        if order > 3:
            raise ValueError("derivatives above third order are not available")
        fact = (1.0, 1.0, 2.0, 6.0)
        return np.stack([fns[k](eta) / fact[k] for k in range(order + 1)])

    def inverse(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "logit":
            return special.logit(p)
        return special.ndtri(p)

    # -- per-observation quantities ------------------------------------------
    def evaluate(self, eta, y) -> LinkValues:
        """Elementwise F, its derivatives, working residual, H, weight and score."""
        eta = np.asarray(eta, dtype=float)
        y = np.asarray(y, dtype=float)
        F = np.clip(self.cdf(eta), EPS, 1.0 - EPS)
        S = np.clip(self.sf(eta), EPS, 1.0 - EPS)
        dF = np.maximum(self.pdf(eta), _TINY)
        d2F = self.dpdf(eta)
        resid = np.where(y > 0.5, S, -F)  # y - F without cancellation
        nu = resid / dF
        if self.kind == "logit":
            H = np.ones_like(eta)
            omega = dF
            dl = resid
        else:
            H = dF / (F * S)
            omega = H * dF if self.omega == "table" else dF
            dl = H * resid
        return LinkValues(F, dF, d2F, nu, H, omega, dl)

    def working(self, eta, y, hessian: str = "observed"):
        """Newton weights and working residual ``score / weight`` at ``eta``.

        ``hessian="observed"`` uses minus the second derivative of the
        log-likelihood (positive for both links by log-concavity);
        ``"expected"`` uses the weight ``omega``. Both share the same fixed point.
        """
        if hessian == "expected" or self.kind == "logit":
            lv = self.evaluate(eta, y)
            return lv.omega, lv.dl / lv.omega
        if hessian != "observed":
            raise ValueError(f"unknown hessian variant {hessian!r}")
        eta = np.asarray(eta, dtype=float)
        pos = np.asarray(y) > 0.5
        logpdf = -0.5 * eta * eta - 0.5 * np.log(2.0 * np.pi)
        # inverse Mills ratios, stable in both tails
        lam = np.where(pos, np.exp(logpdf - special.log_ndtr(eta)),
                       -np.exp(logpdf - special.log_ndtr(-eta)))
        w = np.maximum(lam * (lam + eta), _TINY)
        return w, lam / w

    def loglik(self, eta, y) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        F = np.clip(self.cdf(eta), EPS, 1.0 - EPS)
        S = np.clip(self.sf(eta), EPS, 1.0 - EPS)
        return np.where(np.asarray(y) > 0.5, np.log(F), np.log(S))

    def deviance(self, eta, y) -> float:
        return float(-2.0 * self.loglik(eta, y).sum())


def get_link(link: "LinkFamily | str") -> LinkFamily:
    return link if isinstance(link, LinkFamily) else LinkFamily(link)


def link_eval(link: LinkFamily | str, eta, y) -> dict[str, np.ndarray]:
    """Dictionary form of :meth:`LinkFamily.evaluate`."""
    return get_link(link).evaluate(eta, y)._asdict()
