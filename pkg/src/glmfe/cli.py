"""Command-line front end: ``glmfe <command> [options]``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import montecarlo, neyman, trade
from .bias import split_halves, wald_homogeneity
from .links import get_link
from .mle import fit_mle
from .panel import THREE_WAY, PanelDataset, PanelError

log = logging.getLogger("glmfe")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "GLMFE_THREADS"


class InputError(Exception):
    """Bad command-line input."""


# --------------------------------------------------------------------------
# config file

def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; keys are long flag names."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, config: dict):
    """Use config values as defaults of ``sub`` so explicit flags win."""
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    defaults = {}
    for key, raw in config.items():
        if key not in actions:
            raise InputError(f"unknown config key {key!r}")
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(a, argparse._AppendAction) or a.nargs in ("+", "*"):
            items = [s for s in raw.replace(",", " ").split() if s]
            defaults[key] = [a.type(s) if a.type else s for s in items]
        else:
            try:
                defaults[key] = a.type(raw) if a.type else raw
            except (TypeError, ValueError) as exc:
                raise InputError(f"config key {key!r}: {exc}") from exc
            if a.choices is not None and defaults[key] not in a.choices:
                raise InputError(f"config key {key!r}: {raw!r} not in {list(a.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# input

def _x_spec(text: str) -> tuple[str, str]:
    name, _, kind = text.partition(":")
    kind = kind or "continuous"
    if kind not in trade.X_KINDS:
        raise argparse.ArgumentTypeError(f"regressor kind must be one of {trade.X_KINDS}, got {kind!r}")
    return name, kind


def _add_input(p):
    g = p.add_argument_group("input")
    g.add_argument("data", nargs="?", help="delimited text file with a header row")
    g.add_argument("--exporter", default="exporter")
    g.add_argument("--importer", default="importer")
    g.add_argument("--year", default="year")
    g.add_argument("--value", default="value",
                   help="trade value column; zeros are constructed from it")
    g.add_argument("--outcome", default=None,
                   help="binary outcome column of an already constructed panel (skips zero construction)")
    g.add_argument("--x", action="append", type=_x_spec, default=None, metavar="NAME[:KIND]",
                   help="regressor column, kind continuous (default) or binary; repeatable")
    g.add_argument("--delimiter", default=None)
    g.add_argument("--synthetic", action="store_true",
                   help="use the bundled synthetic gravity data instead of a file")


def _load_panel(args) -> trade.TradePanel:
    x_specs = list(args.x or [])
    if args.synthetic:
        flows = trade.read_flows(bundled_data_path(), "exporter", "importer", "year", "value",
                                 [("tariff", "continuous"), ("fta", "binary")])
        return trade.construct_zeros(flows)
    if not args.data:
        raise InputError("no input file given (or use --synthetic)")
    if args.outcome:
        return _read_binary_panel(args, x_specs)
    flows = trade.read_flows(args.data, args.exporter, args.importer, args.year, args.value,
                             x_specs, args.delimiter)
    return trade.construct_zeros(flows, [c for c, _ in x_specs])


def _read_binary_panel(args, x_specs) -> trade.TradePanel:
    flows = trade.read_flows(args.data, args.exporter, args.importer, args.year, args.outcome,
                             x_specs, args.delimiter)
    countries = sorted({f.exporter for f in flows} | {f.importer for f in flows})
    code = {c: k for k, c in enumerate(countries)}
    y = np.array([np.nan if f.value is None else f.value for f in flows])
    bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
    if bad.size:
        raise PanelError(f"outcome column {args.outcome!r} must be 0/1 (first bad data row {bad[0] + 1})",
                         bad.tolist())
    names = tuple(c for c, _ in x_specs)
    X = np.array([[f.x[c] for c in names] for f in flows], dtype=float).reshape(len(flows), len(names))
    return trade.TradePanel(tuple(countries), np.array([code[f.exporter] for f in flows]),
                            np.array([code[f.importer] for f in flows]),
                            np.array([f.year for f in flows]), y, X, names)


def bundled_data_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "synthetic_gravity.csv")


# --------------------------------------------------------------------------
# output

@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        try:
            fh = open(path, "w", encoding="utf-8", newline="")
        except OSError as exc:
            raise InputError(f"cannot write {path}: {exc}") from exc
        with fh:
            yield fh


def _emit(args, text: str):
    with _output(args.out) as fh:
        fh.write(text)


def _sep(args) -> str:
    return "," if args.format == "csv" else "\t"


# --------------------------------------------------------------------------
# commands

def _spec_config(args, correction=None) -> trade.SpecConfig:
    return trade.SpecConfig(spec=args.spec, link=args.link, L=args.L,
                            correction=correction or args.correction,
                            cov_variant=args.cov,
                            bandwidths=tuple(args.bandwidths or ()))


def _report_lines(rep: trade.SpecReport, sections, sep):
    lines = []
    for name, rows in sections:
        lines += trade.format_rows(rows, name, sep)
    head = sep.join(["section", "name", "estimate", "se", "sig", "corrected", "corrected_se", "corrected_sig"])
    meta = (f"# spec={rep.config.spec} link={rep.config.link} correction={rep.config.effective_correction} "
            f"L={rep.config.L} n={rep.n} deviance={rep.deviance:.6f}")
    if rep.dropped is not None and rep.dropped.rows_dropped:
        meta += f" screened_rows={rep.dropped.rows_dropped}"
    return "\n".join([meta, head] + lines) + "\n"


def cmd_zeros(args):
    tp = _load_panel(args)
    sep = _sep(args)
    lines = [sep.join(("exporter", "importer", "year", "y") + tp.x_names)]
    for k in range(tp.n):
        lines.append(sep.join([tp.countries[tp.i[k]], tp.countries[tp.j[k]], str(int(tp.t[k])),
                               str(int(tp.y[k]))] + [repr(float(v)) for v in tp.X[k]]))
    _emit(args, "\n".join(lines) + "\n")
    log.info("%d candidate rows, %d zeros, %d dropped without regressors",
             tp.n, int(np.sum(tp.y == 0)), tp.missing_covariates)


def cmd_fit(args):
    rep = trade.run_spec(_spec_config(args), _load_panel(args))
    sections = [("coef", rep.coefficients)]
    sections += [(f"coef_L{L}", c) for L, c, _, _ in rep.bandwidth_sweep]
    _emit(args, _report_lines(rep, sections, _sep(args)))


def cmd_ape(args):
    rep = trade.run_spec(_spec_config(args), _load_panel(args))
    sections = [("ape", rep.apes), ("ape_longrun", rep.longrun)]
    for L, _, a, lr in rep.bandwidth_sweep:
        sections += [(f"ape_L{L}", a), (f"ape_longrun_L{L}", lr)]
    _emit(args, _report_lines(rep, sections, _sep(args)))


def cmd_spj(args):
    rep = trade.run_spec(_spec_config(args, correction="spj"), _load_panel(args))
    sections = [("coef", rep.coefficients), ("ape", rep.apes), ("ape_longrun", rep.longrun)]
    _emit(args, _report_lines(rep, sections, _sep(args)))


def _spec_dataset(args, tp) -> PanelDataset:
    cfg = _spec_config(args, correction="none")
    return tp.dataset(cfg.fe_dims, cfg.lag)


def cmd_transitions(args):
    tp = _load_panel(args)
    tm = trade.transition_matrix(tp.dataset(THREE_WAY, lag=False))
    sep = _sep(args)
    lines = [sep.join(["from", "to_0", "to_1", "n"])]
    for a in (0, 1):
        p = tm.probs[a]
        cells = ["", ""] if np.isnan(p).any() else [f"{p[0]:.6f}", f"{p[1]:.6f}"]
        lines.append(sep.join([str(a)] + cells + [str(int(tm.counts[a].sum()))]))
    _emit(args, "\n".join(lines) + "\n")


def cmd_predict(args):
    tp = _load_panel(args)
    ds = _spec_dataset(args, tp)
    rep = trade.run_spec(_spec_config(args), tp)
    fit = rep.corrected_fit if (args.use_corrected and rep.corrected_fit is not None) else rep.fit
    pr = trade.predict_score(fit, ds, args.threshold)
    sep = _sep(args)
    lines = [f"# spec={args.spec} threshold={args.threshold} scored={pr.model.n} "
             f"model_rows={pr.n_model} naive_fallback_rows={pr.n_naive_fallback} skipped={pr.n_skipped}",
             sep.join(["model", "accuracy", "true_negative_rate", "true_positive_rate", "tp", "tn", "fp", "fn"])]
    for name, s in (("spec", pr.model), ("naive", pr.naive)):
        lines.append(sep.join([name, f"{s.accuracy:.6f}", f"{s.true_negative_rate:.6f}",
                               f"{s.true_positive_rate:.6f}", str(s.tp), str(s.tn), str(s.fp), str(s.fn)]))
    _emit(args, "\n".join(lines) + "\n")


def cmd_percentiles(args):
    tp = _load_panel(args)
    ds = tp.dataset(THREE_WAY, lag=False)
    if args.potential in ds.x_names:
        potential = ds.X[:, ds.x_names.index(args.potential)]
    else:
        raise InputError(f"potential column {args.potential!r} is not a regressor; have {list(ds.x_names)}")
    # lag status is read from the full panel before restricting the year
    prev, has = trade.previous_outcome(ds)
    lag = np.where(has, prev, -1).astype(int)
    mask = np.ones(ds.n, dtype=bool)
    if args.in_year is not None:
        mask = ds.t == args.in_year
        if not mask.any():
            raise InputError(f"no rows in year {args.in_year}")
    rows = trade.percentile_breakdown(ds.subset(mask), potential[mask], args.bins, lag=lag[mask])
    sep = _sep(args)
    lines = [sep.join(["percentile", "n", "share", "share_lag0", "share_lag1"])]

    def f(v):
        return "" if np.isnan(v) else f"{v:.6f}"

    for r in rows:
        lines.append(sep.join([str(r.percentile), str(r.n), f(r.share), f(r.share_lag0), f(r.share_lag1)]))
    _emit(args, "\n".join(lines) + "\n")


def cmd_wald(args):
    tp = _load_panel(args)
    ds = _spec_dataset(args, tp)
    link = get_link(args.link)
    a, b = split_halves(ds, args.split)
    fa, fb = fit_mle(a, link), fit_mle(b, link)
    res = wald_homogeneity(fa.beta, fa.beta_cov, fb.beta, fb.beta_cov)
    sep = _sep(args)
    lines = [sep.join(["split", "statistic", "df", "p_value"]),
             sep.join([args.split, f"{res.statistic:.6f}", str(res.df), f"{res.p_value:.6f}"])]
    _emit(args, "\n".join(lines) + "\n")


def cmd_mc(args):
    spec = montecarlo.DgpSpec(kind=args.design, N=args.N, T=args.T, beta_y=args.beta_y,
                              link=args.link, seed=args.seed)
    rep = montecarlo.run_campaign(spec, tuple(args.estimators), R=args.R, parallelism=args.threads,
                                  cov_variant=args.cov, ape_average=args.ape_average)
    head = (f"# design={args.design} N={args.N} T={args.T} R={args.R} seed={args.seed} "
            f"rng={montecarlo.RNG_ALGORITHM} failures={rep.failures}\n")
    _emit(args, head + rep.to_table(_sep(args)))
    log.info("campaign finished in %.1f s", rep.seconds)


def cmd_neyman(args):
    sep = _sep(args)
    if args.simulate:
        I = J = args.N
        T = args.T
        draws = neyman.simulate_neyman(I, J, T, args.simulate, args.layout, seed=args.seed)
        c = neyman.neyman_corrections(I, J, T, args.layout)
        lines = [sep.join(["N", "T", "R", "simulated", "closed_form"]),
                 sep.join([str(args.N), str(T), str(args.simulate), f"{draws.mean() - 1.0:.4f}",
                           f"{c['uncorrected']:.4f}"])]
        _emit(args, "\n".join(lines) + "\n")
        return
    text = neyman.format_table(neyman.neyman_table(args.layout), sep)
    _emit(args, text)


# --------------------------------------------------------------------------
# parser

def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_common(p):
    p.add_argument("--config", default=None, help="flat key = value file; flags win on conflict")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--threads", type=_positive, default=None,
                   help=f"parallel workers (default ${THREADS_ENV} or 1); results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p, correction=True):
    p.add_argument("--spec", type=int, choices=sorted(trade.SPEC_LAYOUTS), default=5)
    p.add_argument("--link", choices=("probit", "logit"), default="probit")
    p.add_argument("--L", type=int, default=1, help="bandwidth for the spectral bias terms")
    p.add_argument("--cov", choices=("general", "independence"), default="general")
    if correction:
        p.add_argument("--correction", choices=trade.CORRECTIONS, default="abc")
        p.add_argument("--bandwidths", type=int, nargs="*", default=None,
                       help="extra bandwidths for a sensitivity sweep, e.g. 1 2 3 4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glmfe", description="Binary-choice panels with three-way fixed effects.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("zeros", help="construct zero flows and write the binary panel")
    _add_input(p)
    _add_common(p)
    p.set_defaults(func=cmd_zeros)

    for name, func, helptext in (("fit", cmd_fit, "coefficients, uncorrected and corrected"),
                                 ("ape", cmd_ape, "direct and long-run average partial effects")):
        p = subs.add_parser(name, help=helptext)
        _add_input(p)
        _add_model(p)
        _add_common(p)
        p.set_defaults(func=func)

    p = subs.add_parser("spj", help="split-panel jackknife coefficients and APEs")
    _add_input(p)
    _add_model(p, correction=False)
    _add_common(p)
    p.set_defaults(func=cmd_spj, correction="spj", bandwidths=None)

    p = subs.add_parser("predict", help="in-sample classification against the lagged-outcome rule")
    _add_input(p)
    _add_model(p)
    _add_common(p)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--use-corrected", action="store_true",
                   help="score at the corrected coefficients and refitted fixed effects")
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("transitions", help="2x2 transition probabilities of the binary outcome")
    _add_input(p)
    _add_common(p)
    p.set_defaults(func=cmd_transitions)

    p = subs.add_parser("percentiles", help="share of non-zero flows by percentile of a potential column")
    _add_input(p)
    _add_common(p)
    p.add_argument("--potential", required=True, help="regressor column used as trade potential")
    p.add_argument("--in-year", type=int, default=None, help="restrict to one year")
    p.add_argument("--bins", type=_positive, default=100)
    p.set_defaults(func=cmd_percentiles)

    p = subs.add_parser("wald", help="Wald test of equal coefficients across split halves")
    _add_input(p)
    _add_model(p, correction=False)
    _add_common(p)
    p.add_argument("--split", choices=("I", "J", "T"), default="T")
    p.set_defaults(func=cmd_wald, correction="none", bandwidths=None)

    p = subs.add_parser("mc", help="Monte Carlo campaign")
    _add_common(p)
    p.add_argument("--design", choices=montecarlo.KINDS, default="dynamic3way")
    p.add_argument("--N", type=_positive, default=50)
    p.add_argument("--T", type=_positive, default=10)
    p.add_argument("--R", type=_positive, default=100)
    p.add_argument("--beta-y", type=float, default=0.5)
    p.add_argument("--link", choices=("probit", "logit"), default="probit")
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--estimators", nargs="+", choices=montecarlo.ESTIMATORS, default=["MLE", "ABC1", "ABC2"])
    p.add_argument("--cov", choices=("general", "independence"), default="independence")
    p.add_argument("--ape-average", choices=("full", "estimation"), default="full")
    p.set_defaults(func=cmd_mc)

    p = subs.add_parser("neyman", help="variance-estimation bias table or simulation check")
    _add_common(p)
    p.add_argument("--layout", choices=neyman.LAYOUTS, default="three-way")
    p.add_argument("--simulate", type=_positive, default=None, metavar="R",
                   help="simulate R replications at --N, --T instead of printing the table")
    p.add_argument("--N", type=_positive, default=10)
    p.add_argument("--T", type=_positive, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_neyman)
    return parser


def _subparser(parser, name):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
        if args.config:
            try:
                args = _apply_config(parser, _subparser(parser, args.command), argv, read_config(args.config))
            except SystemExit as exc:
                return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.threads is None:
            args.threads = _default_threads()
        args.func(args)
        return EXIT_OK
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return EXIT_OK
    except (InputError, PanelError, OSError, KeyError) as exc:
        print(f"glmfe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"glmfe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"glmfe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
