"""Simulation designs, replication runner and summary statistics for the bias-correction experiments."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .ape import ape_abc_correct, ape_covariance, compute_apes
from .bias import abc_correct_beta, abc_terms_auto, spj_correct
from .links import get_link
from .mle import fit_mle, refit_fixed_effects_offset, screen_separation
from .panel import THREE_WAY, TWO_WAY, PanelDataset, add_lag_column, from_arrays

log = logging.getLogger(__name__)

#: Bit generator used for every replication stream.
RNG_ALGORITHM = "PCG64"

KINDS = ("dynamic3way", "dynamic2way", "static3way")
ESTIMATORS = ("MLE", "ABC1", "ABC2", "SPJ")
TARGETS = ("coef_z", "coef_y", "ape_z", "ape_y", "ape_z_lr")


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``fe_var`` defaults to 1/24 for three-way and 1/16 for two-way designs.
    """

    kind: str = "dynamic3way"
    N: int = 50
    T: int = 10
    beta_y: float = 0.5
    beta_z: float = 1.0
    fe_var: float | None = None
    z_ar: float = 0.5
    z_innov_var: float = 0.5
    link: str = "probit"
    seed: int = 20240101

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown design {self.kind!r}; expected one of {KINDS}")
        if self.N < 2 or self.T < 2:
            raise ValueError("N and T must be at least 2")

    @property
    def dynamic(self) -> bool:
        return self.kind.startswith("dynamic")

    @property
    def has_pair_effects(self) -> bool:
        return self.kind.endswith("3way")

    @property
    def variance(self) -> float:
        if self.fe_var is not None:
            return self.fe_var
        return 1.0 / 24.0 if self.has_pair_effects else 1.0 / 16.0

    @property
    def fe_dims(self):
        return THREE_WAY if self.has_pair_effects else TWO_WAY


@dataclass(frozen=True)
class SimulatedPanel:
    """One simulated panel. ``fe_draws`` holds the exporter-time, importer-time and
    pair effects as ``(N, T+1)``, ``(N, T+1)`` and ``(N, N)`` arrays."""

    ds: PanelDataset
    eta_true: np.ndarray
    beta_true: np.ndarray
    targets: dict
    fe_draws: dict = field(default_factory=dict, repr=False)


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for replication ``rep``, a pure function of ``(seed, rep)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(rep,))))


def simulate(spec: DgpSpec, rng: np.random.Generator | None = None) -> SimulatedPanel:
    """Draw one panel over all ``N*N`` ordered pairs (self pairs included).

    Periods ``0..T`` are generated; the estimation sample is ``t = 1..T``, with
    the period-0 outcome serving as the first lag in dynamic designs.
    """
    rng = replication_rng(spec.seed, 0) if rng is None else rng
    N, T = spec.N, spec.T
    sd = np.sqrt(spec.variance)
    periods = T + 1
    lam = rng.normal(0.0, sd, size=(N, periods))       # exporter-time
    psi = rng.normal(0.0, sd, size=(N, periods))       # importer-time
    mu = rng.normal(0.0, sd, size=(N, N)) if spec.has_pair_effects else np.zeros((N, N))
    eps = rng.normal(size=(N, N, periods))
    innov = rng.normal(0.0, np.sqrt(spec.z_innov_var), size=(N, N, periods))
    z0 = rng.normal(size=(N, N))

    fe = lam[:, None, :] + psi[None, :, :] + mu[:, :, None]
    z = np.empty((N, N, periods))
    z[:, :, 0] = z0
    for t in range(1, periods):
        z[:, :, t] = spec.z_ar * z[:, :, t - 1] + fe[:, :, t] + innov[:, :, t]
    y = np.empty((N, N, periods))
    index = spec.beta_z * z + fe
    y[:, :, 0] = index[:, :, 0] >= eps[:, :, 0]
    for t in range(1, periods):
        lagged = spec.beta_y * y[:, :, t - 1] if spec.dynamic else 0.0
        y[:, :, t] = index[:, :, t] + lagged >= eps[:, :, t]

    ii, jj, tt = np.meshgrid(np.arange(N), np.arange(N), np.arange(periods), indexing="ij")
    ds = from_arrays(ii.ravel(), jj.ravel(), tt.ravel(), y.ravel(), z.reshape(-1, 1),
                     x_names=("z",), fe_dims=spec.fe_dims, no_self_flows=False)
    fe_flat = fe.ravel()
    if spec.dynamic:
        ds = add_lag_column(ds)
        beta = np.array([spec.beta_y, spec.beta_z])
    else:
        ds = ds.subset(ds.t >= 1)
        beta = np.array([spec.beta_z])
    # rows of ds are sorted by (i, j, t), the same order as the flattened arrays
    keep = (ds.i * N + ds.j) * periods + ds.t
    eta = ds.X @ beta + fe_flat[keep]
    targets = true_targets(ds, spec.link, beta, eta)
    return SimulatedPanel(ds, eta, beta, targets, {"IT": lam, "JT": psi, "IJ": mu})


def true_targets(ds: PanelDataset, link, beta, eta) -> dict:
    """Coefficients and APEs at the data-generating parameters, averaged over the estimation sample."""
    names = ds.x_names
    out = {"coef_z": float(beta[names.index("z")])}
    direct = compute_apes(ds, link, beta, eta)
    out["ape_z"] = float(direct.delta[names.index("z")])
    if ds.lag_col is not None:
        out["coef_y"] = float(beta[ds.lag_col])
        out["ape_y"] = float(direct.delta[ds.lag_col])
        lr = compute_apes(ds, link, beta, eta, longrun=True)
        out["ape_z_lr"] = float(lr.delta[lr.names.index("z")])
    return out


# --------------------------------------------------------------------------
# estimation of one replication

def _ape_block(ds, fit, link, cov_variant, L=None, scale=1.0):
    """Direct and long-run APE estimates and SEs at ``fit``; ABC-corrected when ``L`` is given.

    ``scale`` multiplies estimates and SEs (share of rows kept by screening when
    averaging over the full sample).
    """
    est, se = {}, {}
    sets = [("", compute_apes(ds, link, fit.beta, fit.eta))]
    if ds.lag_col is not None:
        sets.append(("_lr", compute_apes(ds, link, fit.beta, fit.eta, longrun=True)))
    for suffix, ape in sets:
        vals = ape.delta if L is None else ape_abc_correct(ape, fit, L=L)
        cov = ape_covariance(ape, fit, cov_variant)
        for c, name in enumerate(ape.names):
            key = "ape_" + ("y" if name == "y_lag" else name) + suffix
            est[key] = scale * float(vals[c])
            se[key] = scale * float(np.sqrt(max(cov[c, c], 0.0)))
        est.setdefault("_min_eig_ratio", [])
        tr = float(np.trace(cov))
        eig = float(np.linalg.eigvalsh(cov).min())
        est["_min_eig_ratio"].append(eig / tr if tr > 0 else 0.0)
    return est, se


def _coef_block(fit, beta):
    names = fit.x_names
    se = np.sqrt(np.clip(np.diag(fit.beta_cov), 0, None))
    est, ses = {}, {}
    for k, name in enumerate(names):
        key = "coef_" + ("y" if name == "y_lag" else name)
        est[key] = float(beta[k])
        ses[key] = float(se[k])
    return est, ses


def _spj_vector(ds, link, full_sample):
    fit = fit_mle(ds, link)
    scale = fit.ds.n / ds.n if full_sample else 1.0
    apes = [compute_apes(fit.ds, link, fit.beta, fit.eta).delta]
    if fit.ds.lag_col is not None:
        apes.append(compute_apes(fit.ds, link, fit.beta, fit.eta, longrun=True).delta)
    return np.concatenate([fit.beta] + [scale * a for a in apes])


def estimate_replication(ds: PanelDataset, link, estimators: Sequence[str] = ESTIMATORS,
                         cov_variant: str = "independence", ape_average: str = "full") -> dict:
    """Estimates and standard errors per estimator and target for one dataset.

    ``ape_average="full"`` averages partial effects over all rows of ``ds``,
    rows of perfectly classified levels contributing their limiting effect of
    zero; ``"estimation"`` averages over the rows kept by screening.

    Returns ``{estimator: {"est": {target: value}, "se": {target: value}}}`` plus
    ``"min_eig_ratio"``: the smallest ratio of minimum eigenvalue to trace over
    all APE covariance matrices computed.
    """
    if ape_average not in ("full", "estimation"):
        raise ValueError(f"unknown APE averaging {ape_average!r}")
    full_sample = ape_average == "full"
    link = get_link(link)
    fit = fit_mle(ds, link)
    dsf = fit.ds
    scale = dsf.n / ds.n if full_sample else 1.0
    out = {}
    eig = []
    mle_est, mle_se = _coef_block(fit, fit.beta)
    a_est, a_se = _ape_block(dsf, fit, link, cov_variant, scale=scale)
    eig += a_est.pop("_min_eig_ratio")
    mle_est.update(a_est)
    mle_se.update(a_se)
    if "MLE" in estimators:
        out["MLE"] = {"est": mle_est, "se": mle_se}
    for name in estimators:
        if not name.startswith("ABC"):
            continue
        L = int(name[3:] or 1) if dsf.lag_col is not None else 0
        terms = abc_terms_auto(fit, L=L)
        beta_c = abc_correct_beta(fit, terms)
        refit = refit_fixed_effects_offset(dsf, link, beta_c, eta_start=fit.eta)
        est, se = _coef_block(refit, beta_c)
        a_est, a_se = _ape_block(dsf, refit, link, cov_variant, L=L, scale=scale)
        eig += a_est.pop("_min_eig_ratio")
        est.update(a_est)
        se.update(a_se)
        out[name] = {"est": est, "se": se}
    if "SPJ" in estimators:
        full = np.array([mle_est[k] for k in _spj_keys(dsf)])
        vec = spj_correct(ds if full_sample else dsf, lambda d: _spj_vector(d, link, full_sample),
                          full=full)
        keys = _spj_keys(dsf)
        # standard errors are taken from the uncorrected estimator
        out["SPJ"] = {"est": dict(zip(keys, map(float, vec))), "se": {k: mle_se[k] for k in keys}}
    out["min_eig_ratio"] = min(eig) if eig else 0.0
    return out


def _spj_keys(ds):
    coef = ["coef_" + ("y" if n == "y_lag" else n) for n in ds.x_names]
    ape = ["ape_" + ("y" if n == "y_lag" else n) for n in ds.x_names]
    keys = coef + ape
    if ds.lag_col is not None:
        keys += ["ape_" + n + "_lr" for n in ds.x_names if n != "y_lag"]
    return keys


# --------------------------------------------------------------------------
# campaign

@dataclass(frozen=True)
class McRecord:
    rep: int
    truth: dict
    results: dict | None
    error: str | None = None


@dataclass(frozen=True)
class CellStats:
    bias_pct: float
    sd_pct: float
    bias_se: float
    se_sd: float
    cp95: float
    n: int


@dataclass(frozen=True)
class McReport:
    spec: DgpSpec
    replications: int
    failures: int
    stats: dict
    records: tuple = field(repr=False, default=())
    seconds: float = 0.0

    def cell(self, estimator: str, target: str) -> CellStats:
        return self.stats[estimator][target]

    def min_eig_ratio(self) -> float:
        vals = [r.results["min_eig_ratio"] for r in self.records if r.results is not None]
        return min(vals) if vals else float("nan")

    def to_table(self, sep: str = "\t") -> str:
        """Delimited table: estimator, target, Bias, SD, Bias/SE, SE/SD, CP .95."""
        lines = [sep.join(["estimator", "target", "bias_pct", "sd_pct", "bias_se", "se_sd", "cp95", "n"])]
        for est in self.stats:
            for tgt, c in self.stats[est].items():
                lines.append(sep.join([est, tgt, f"{c.bias_pct:.2f}", f"{c.sd_pct:.2f}",
                                       f"{c.bias_se:.2f}", f"{c.se_sd:.2f}", f"{c.cp95:.2f}", str(c.n)]))
        return "\n".join(lines) + "\n"


def row_positions(sub: PanelDataset, full: PanelDataset) -> np.ndarray:
    """Positions in ``full`` of the rows of ``sub`` (both sorted by ``(i, j, t)``)."""
    span_j = int(max(full.j.max(), sub.j.max())) + 1
    span_t = int(max(full.t.max(), sub.t.max())) + 1

    def key(d):
        return (d.i.astype(np.int64) * span_j + d.j) * span_t + d.t

    kf, ks = key(full), key(sub)
    pos = np.searchsorted(kf, ks)
    if np.any(pos >= kf.size) or np.any(kf[np.minimum(pos, kf.size - 1)] != ks):
        raise ValueError("subset rows are not contained in the full dataset")
    return pos


def _one_replication(args):
    spec, rep, estimators, cov_variant, ape_average = args
    rng = replication_rng(spec.seed, rep)
    sim = simulate(spec, rng)
    try:
        truth = sim.targets
        if ape_average == "estimation":
            # the truth is averaged over the rows the estimator actually uses
            screened, _ = screen_separation(sim.ds)
            pos = row_positions(screened, sim.ds)
            truth = true_targets(screened, spec.link, sim.beta_true, sim.eta_true[pos])
        res = estimate_replication(sim.ds, spec.link, estimators, cov_variant, ape_average)
        return McRecord(rep, truth, res)
    except Exception as exc:  # failures are counted, not fatal
        return McRecord(rep, sim.targets, None, f"{type(exc).__name__}: {exc}")


def cell_statistics(estimates, ses, truths) -> CellStats:
    """Relative bias and SD in percent, Bias/SE, SE/SD and 95% coverage."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    tru = np.asarray(truths, dtype=float)
    n = est.size
    rel = est / tru - 1.0
    sd = est.std(ddof=1) if n > 1 else float("nan")
    bias = float(np.mean(est - tru))
    return CellStats(
        bias_pct=100.0 * float(rel.mean()),
        sd_pct=100.0 * float(rel.std(ddof=1)) if n > 1 else float("nan"),
        bias_se=bias / float(se.mean()),
        se_sd=float(se.mean()) / sd if n > 1 else float("nan"),
        cp95=float(np.mean(np.abs(est - tru) <= 1.96 * se)),
        n=n,
    )


def summarize(records: Sequence[McRecord], estimators: Sequence[str]) -> dict:
    ok = [r for r in records if r.results is not None]
    stats = {}
    for e in estimators:
        stats[e] = {}
        for tgt in TARGETS:
            rows = [r for r in ok if tgt in r.results[e]["est"] and tgt in r.truth]
            if not rows:
                continue
            stats[e][tgt] = cell_statistics([r.results[e]["est"][tgt] for r in rows],
                                            [r.results[e]["se"][tgt] for r in rows],
                                            [r.truth[tgt] for r in rows])
    return stats


def run_campaign(spec: DgpSpec, estimators: Sequence[str] = ("MLE", "ABC1", "ABC2"), R: int = 100,
                 parallelism: int = 1, cov_variant: str = "independence",
                 ape_average: str = "full") -> McReport:
    """Run ``R`` replications; replication ``r`` always uses the stream ``(spec.seed, r)``.

    See :func:`estimate_replication` for ``ape_average``; the true APE is
    averaged over the same rows as the estimate.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    start = time.perf_counter()
    jobs = [(spec, r, tuple(estimators), cov_variant, ape_average) for r in range(R)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(_one_replication, jobs))
    else:
        records = [_one_replication(j) for j in jobs]
    failures = sum(r.results is None for r in records)
    for r in records:
        if r.error:
            log.warning("replication %d failed: %s", r.rep, r.error)
    return McReport(spec, R, failures, summarize(records, estimators), tuple(records),
                    time.perf_counter() - start)


def spec_dict(spec: DgpSpec) -> dict:
    d = asdict(spec)
    d["fe_var"] = spec.variance
    d["rng"] = RNG_ALGORITHM
    return d
