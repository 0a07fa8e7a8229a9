"""Command-line front end: ``chartdqn {synth,ingest,train,backtest,mc,report}``.

Exit status is 0 on success, 1 for user errors (bad arguments, missing or
malformed files) and 2 for anything unexpected.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import data_ingest, dqn_trainer, portfolio, qnet, stats_eval, synth_market
from .errors import ChartDQNError

log = logging.getLogger("chartdqn")

FIG2_COLUMNS = ("group", "period", "portfolio_kind", "K", "annual_return")


class UsageError(ChartDQNError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _period(text):
    try:
        start, end = text.split(",")
        return np.datetime64(start.strip(), "D"), np.datetime64(end.strip(), "D")
    except ValueError:
        raise argparse.ArgumentTypeError(f"period must be START,END in yyyy-mm-dd, got {text!r}") from None


def _threads(value):
    if value is None:
        return os.cpu_count() or 1
    return max(1, value)


def load_dataset(path, w: int, neutralize_flag: bool, period=None, n=None, window_days=30,
                 zero_volume_limit=0.25, bound=data_ingest.DEFAULT_BOUND) -> data_ingest.Dataset:
    """Dataset from a saved ``.npz``, a manifest file, or a folder holding ``manifest.csv``."""
    path = Path(path)
    if path.suffix == ".npz":
        ds = data_ingest.Dataset.load(path)
        if ds.w != w:
            raise UsageError(f"{path}: dataset has w={ds.w}, expected {w}")
        if neutralize_flag and not ds.neutralized:
            ds = data_ingest.neutralize(ds)
        return ds
    manifest = path / "manifest.csv" if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    series = data_ingest.load_manifest(manifest)
    if period is not None:
        series = data_ingest.filter_universe(series, period, zero_volume_limit)
        if n is not None:
            universe = data_ingest.select_top_liquid(series, n, period[0], window_days, test_end=period[1])
            series = universe.companies
        # keep the W days of history that the first charts need
        series = [_trim(s, period, w) for s in series]
    return data_ingest.build_dataset(series, w, neutralize_flag, bound)


def _trim(series, period, w):
    start, end = period
    first = np.searchsorted(series.dates, start)
    lo = max(0, first - w)
    hi = np.searchsorted(series.dates, end, side="right") + 1
    return data_ingest.PriceSeries(series.company_id, series.dates[lo:hi], series.adj_close[lo:hi], series.volume[lo:hi])


def _hp(args):
    hp = dqn_trainer.load_config(args.config) if getattr(args, "config", None) else dqn_trainer.HyperParams()
    if getattr(args, "maxiter", None) is not None:
        hp = dqn_trainer.parse_config(f"maxiter={args.maxiter}", hp)
    return hp


# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = synth_market.SynthSpec(
        n_companies=args.n_companies, n_days=args.n_days, pattern=args.pattern,
        signal_strength=args.signal, noise_sigma=args.noise, seed=args.seed,
    )
    manifest = synth_market.write_yahoo_csvs(synth_market.generate(spec), args.out)
    print(manifest)


def cmd_ingest(args):
    ds = load_dataset(args.data, args.w, args.neutralize, args.period, args.n, args.window, args.zero_volume_limit, args.bound)
    ds.save(args.out)
    print(f"{ds.n_companies} companies, {ds.n_samples} samples -> {args.out}")


def cmd_train(args):
    hp = _hp(args)
    ds = load_dataset(args.data, hp.w, True, args.period)
    every = max(1, args.progress_every)

    def progress(record):
        if record["iteration"] % every:
            return
        loss = "-" if record["loss"] is None else f"{record['loss']:.5f}"
        print(f"iter {record['iteration']} eps {record['epsilon']:.4f} loss {loss} buffer {record['buffer_size']}",
              file=sys.stderr)

    dqn_trainer.train(ds, hp, args.seed, log_path=args.log, checkpoint_path=args.out,
                      on_log=None if args.quiet else progress)


def cmd_backtest(args):
    net, _, _ = qnet.load_checkpoint(args.model)
    ds = load_dataset(args.data, qnet.INPUT_SIZE, False, args.period)
    rho, dates = portfolio.evaluate_network(net, ds)
    returns, _ = portfolio.return_matrix(ds)
    ks = args.k if args.kind == "topk" else [None]
    if args.kind == "topk" and not ks:
        raise UsageError("--kind topk needs at least one --k")
    reports = [portfolio.backtest_from_values(rho, returns, dates, args.kind, k) for k in ks]
    portfolio.write_report_csv(reports, args.out)
    if args.daily:
        portfolio.write_daily_csv(reports[0], args.daily)


def cmd_mc(args):
    if args.data:
        ds = load_dataset(args.data, qnet.INPUT_SIZE, False, args.period)
    else:
        spec = synth_market.SynthSpec(n_companies=args.n_companies, n_days=args.n_days, signal_strength=0.0, seed=args.seed)
        ds = data_ingest.build_dataset(synth_market.generate(spec), qnet.INPUT_SIZE)
    ks = args.k if args.kind == "topk" else [None]
    if args.kind == "topk" and not ks:
        raise UsageError("--kind topk needs at least one --k")
    rows = []
    rho = returns = dates = net = None
    if args.model:
        net, _, _ = qnet.load_checkpoint(args.model)
        rho, dates = portfolio.evaluate_network(net, ds)
        returns, _ = portfolio.return_matrix(ds)
    for k in ks:
        stats = stats_eval.monte_carlo(ds, args.kind, k, args.sims, args.seed, _threads(args.threads))
        mu_bar = args.mu_bar
        if net is not None:
            mu_bar = portfolio.backtest_from_values(rho, returns, dates, args.kind, k).annual_return
        rows.append(stats_eval.zscore_row(stats, mu_bar))
    stats_eval.write_zscore_csv(rows, args.out)


def _group_of(initial_n):
    if initial_n is None:
        return "all"
    return "large" if initial_n >= 500 else "small"


def emit_fig2_data(reports, path=None):
    """Long-format rows (group, period, portfolio_kind, K, annual_return).

    ``reports`` holds :class:`BacktestReport` objects or report-CSV rows
    (dicts); an optional ``initial_n`` on either splits the output into the
    ``large`` (N >= 500) and ``small`` groups. Reports sharing a group,
    period, kind and K are averaged, and one ``market`` row per group and
    period carries the averaged market return.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    sums = defaultdict(list)
    market = defaultdict(list)
    for r in reports:
        if isinstance(r, dict):
            period, kind, k = r["period"], r["kind"], portfolio.format_k(r.get("K", ""))
            annual, mkt = float(r["annual_return"]), float(r["market_avg_return"])
            n = r.get("initial_n")
            n = int(n) if n not in (None, "") else None
        else:
            period, kind = r.period_label, r.kind
            k = portfolio.format_k(r.k_pct)
            annual, mkt, n = r.annual_return, r.market_avg_return, r.initial_n
        group = _group_of(n)
        sums[(group, period, kind, k)].append(annual)
        market[(group, period)].append(mkt)
    rows = []
    for group, period in sorted(market):
        keys = [key for key in sums if key[:2] == (group, period)]
        keys.sort(key=lambda key: (key[2] != "neutral", -float(key[3]) if key[3] else 0.0))
        for key in keys:
            rows.append({"group": group, "period": period, "portfolio_kind": key[2], "K": key[3],
                         "annual_return": repr(float(np.mean(sums[key])))})
        rows.append({"group": group, "period": period, "portfolio_kind": "market", "K": "",
                     "annual_return": repr(float(np.mean(market[(group, period)])))})
    if path is not None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=FIG2_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return rows


def cmd_report(args):
    if args.dump_config:
        sys.stdout.write(dqn_trainer.dump_config(_hp(args)))
        if not args.reports:
            return
    if not args.reports:
        raise UsageError("report needs --reports (or --dump-config)")
    if not args.out:
        raise UsageError("report needs --out")
    rows = []
    for spec in args.reports:
        path, _, initial_n = spec.partition(":")
        for row in portfolio.read_report_csv(path):
            if initial_n:
                row["initial_n"] = initial_n
            rows.append(row)
    emit_fig2_data(rows, args.out)


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="chartdqn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, threads=False):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")

    p = sub.add_parser("synth", help="write a synthetic market as Yahoo-layout CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--n-companies", type=int, default=50)
    p.add_argument("--n-days", type=int, default=1000)
    p.add_argument("--pattern", choices=synth_market.PATTERNS, default="momentum")
    p.add_argument("--signal", type=float, default=0.5, help="planted drift in percent")
    p.add_argument("--noise", type=float, default=2.0, help="daily noise in percent")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a chart dataset (.npz) from CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--period", type=_period)
    p.add_argument("--n", type=int, help="keep the N most liquid companies")
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--zero-volume-limit", type=float, default=0.25)
    p.add_argument("--bound", type=float, default=data_ingest.DEFAULT_BOUND)
    p.add_argument("--neutralize", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a Q-network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--period", type=_period)
    p.add_argument("--maxiter", type=int)
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--progress-every", type=int, default=10_000)
    p.add_argument("--quiet", action="store_true")
    common(p, threads=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="backtest a trained network")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=portfolio.KINDS, default="neutral")
    p.add_argument("--k", type=float, action="append", default=[], help="top/bottom K percent (repeatable)")
    p.add_argument("--period", type=_period)
    p.add_argument("--out", required=True)
    p.add_argument("--daily", help="per-day return series CSV")
    common(p, seed=False, threads=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("mc", help="random-portfolio Monte Carlo and Z-scores")
    p.add_argument("--data", help="dataset; default is a no-signal synthetic market")
    p.add_argument("--kind", choices=portfolio.KINDS, default="neutral")
    p.add_argument("--k", type=float, action="append", default=[])
    p.add_argument("--sims", type=int, default=10_000)
    p.add_argument("--period", type=_period)
    p.add_argument("--model", help="checkpoint whose backtest supplies mu_bar")
    p.add_argument("--mu-bar", type=float, help="observed annual return to score")
    p.add_argument("--n-companies", type=int, default=100)
    p.add_argument("--n-days", type=int, default=1000)
    p.add_argument("--out", required=True)
    common(p, threads=True)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("report", help="plot data across reports; dump effective config")
    p.add_argument("--reports", nargs="*", default=[], help="report CSVs, each optionally suffixed :INITIAL_N")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--dump-config", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ChartDQNError, OSError, ValueError) as exc:
        print(f"chartdqn {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort handler maps to exit code 2
        log.exception("internal error")
        print(f"chartdqn {args.command}: internal error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
