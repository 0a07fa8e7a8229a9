"""Daily-rebalanced market-neutral and top/bottom-K portfolios, and backtests.

Return accounting used throughout:

* a portfolio's day return is ``sum(alpha * L)`` in percent;
* the annual return compounds the day returns inside each calendar year,
  rescales that year's growth to ``TRADING_DAYS`` days geometrically, and
  averages the yearly figures weighted by the number of days in each year;
* a transaction is any day on which a company's position sign changes;
  ``avg_tr_count`` is transactions per company per year and
  ``per_tr_return`` is the summed day returns divided by transactions per
  company, so ``per_tr_return * avg_tr_count`` equals the arithmetic annual
  return.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qnet
from .data_ingest import Dataset
from .errors import DatasetError, ShapeError

TRADING_DAYS = 250
KINDS = ("neutral", "topk")
REPORT_COLUMNS = ("period", "kind", "K", "per_tr_return", "annual_return", "avg_tr_count", "market_avg_return")


@dataclass(frozen=True, eq=False)
class PortfolioWeights:
    weights: np.ndarray
    date: object = None
    kind: str = "neutral"


@dataclass
class BacktestReport:
    kind: str
    k_pct: float | None
    dates: np.ndarray
    daily_returns: np.ndarray
    market_daily_returns: np.ndarray
    per_tr_return: float
    annual_return: float
    avg_tr_count: float
    market_avg_return: float
    period: tuple
    initial_n: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def period_label(self) -> str:
        return f"{self.period[0]}..{self.period[1]}"


def eta_to_actions(etas) -> np.ndarray:
    """One-hot [long, neutral, short] rows to scalar positions +1/0/-1."""
    etas = np.asarray(etas)
    return 1 - np.argmax(etas, axis=-1)


def neutral_from_actions(actions) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64)
    a = a - a.mean(axis=-1, keepdims=True)
    total = np.abs(a).sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, a / np.where(total > 0, total, 1.0), 0.0)
    return out


def neutral_portfolio(etas, date=None) -> PortfolioWeights:
    """Long/neutral/short per company, de-meaned and scaled to unit gross exposure.

    If every company takes the same action the de-meaned vector is zero and
    the portfolio holds cash (all weights 0).
    """
    etas = np.asarray(etas)
    if etas.ndim != 2 or etas.shape[1] != 3 or etas.shape[0] < 1:
        raise ValueError("etas must have shape (N, 3) with N >= 1")
    return PortfolioWeights(neutral_from_actions(eta_to_actions(etas)), date, "neutral")


def topk_count(n: int, k_pct: float) -> int:
    if not 0 < k_pct <= 50:
        raise ValueError(f"K must be in (0, 50], got {k_pct}")
    m = int(math.floor(n * k_pct / 100.0 + 1e-9))
    if m < 1:
        raise ValueError(f"K={k_pct}% of N={n} companies selects no company")
    return m


def topk_from_scores(scores, k_pct: float) -> np.ndarray:
    """Rows of scores (..., N) to top/bottom-K weights. Ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    m = topk_count(n, k_pct)
    order = np.argsort(-scores, axis=-1, kind="stable")
    out = np.zeros(scores.shape)
    np.put_along_axis(out, order[..., :m], 1.0 / (2 * m), axis=-1)
    np.put_along_axis(out, order[..., n - m :], -1.0 / (2 * m), axis=-1)
    return out


def topk_portfolio(rhos, k_pct: float, date=None) -> PortfolioWeights:
    """Long the top K% of ``rho[long] - rho[short]``, short the bottom K%."""
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.ndim != 2 or rhos.shape[1] != 3:
        raise ValueError("rhos must have shape (N, 3)")
    return PortfolioWeights(topk_from_scores(rhos[:, 0] - rhos[:, 2], k_pct), date, "topk")


def portfolio_day_return(alpha, returns) -> float:
    w = alpha.weights if isinstance(alpha, PortfolioWeights) else np.asarray(alpha, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if w.shape != returns.shape:
        raise ValueError(f"weights and returns differ in length ({w.shape} vs {returns.shape})")
    return float(w @ returns)


def count_transactions(actions) -> float:
    """Average position changes per company per year for an (N, T) action grid."""
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[1] < 2:
        raise ValueError("actions must have shape (N, T) with T >= 2")
    n, t = actions.shape
    changes = np.count_nonzero(np.diff(actions, axis=1), axis=1)
    return float(changes.sum()) / n / (t / TRADING_DAYS)


def _year_segments(dates):
    years = np.asarray(dates, dtype="datetime64[Y]")
    if len(years) == 0:
        return []
    cut = np.flatnonzero(years[1:] != years[:-1]) + 1
    bounds = np.concatenate([[0], cut, [len(years)]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def annualize(daily_returns, dates) -> float | np.ndarray:
    """Annual return (percent) from daily percent returns.

    ``daily_returns`` may be (T,) or (S, T) for S independent series.
    """
    r = np.asarray(daily_returns, dtype=np.float64)
    segments = _year_segments(dates)
    if r.shape[-1] != len(dates):
        raise ValueError("daily_returns and dates differ in length")
    if not segments:
        return np.zeros(r.shape[:-1]) if r.ndim > 1 else 0.0
    logs = np.log1p(r / 100.0)
    total = np.zeros(r.shape[:-1])
    for a, b in segments:
        n = b - a
        growth = logs[..., a:b].sum(axis=-1) * (TRADING_DAYS / n)
        total = total + n * np.expm1(growth)
    out = 100.0 * total / r.shape[-1]
    return float(out) if r.ndim == 1 else out


def market_annual(returns_matrix, dates) -> float:
    """Annual return of an equal-weight buy-and-hold portfolio, re-based each calendar year."""
    segments = _year_segments(dates)
    if not segments:
        return 0.0
    total = 0.0
    logs = np.log1p(returns_matrix / 100.0)  # (T, N)
    for a, b in segments:
        n = b - a
        growth = np.exp(logs[a:b].sum(axis=0)).mean()
        total += n * np.expm1(np.log(growth) * TRADING_DAYS / n)
    return 100.0 * total / returns_matrix.shape[0]


# ---------------------------------------------------------------------------

def aligned_days(ds: Dataset):
    """Dates shared by every company and, per company, the sample row of each such date.

    Returns ``(dates, rows)`` with ``rows`` of shape (N, T).
    """
    if ds.n_companies == 0:
        raise DatasetError("dataset has no companies")
    common = ds.dates[0]
    for d in ds.dates[1:]:
        common = np.intersect1d(common, d)
    if len(common) == 0:
        raise DatasetError("companies share no sample dates")
    rows = np.stack([np.searchsorted(d, common) for d in ds.dates])
    return common, rows


def return_matrix(ds: Dataset):
    """(T, N) matrix of next-day returns on the shared dates, plus those dates."""
    dates, rows = aligned_days(ds)
    mat = np.stack([ds.returns[c][rows[c]] for c in range(ds.n_companies)], axis=1)
    return mat, dates


def evaluate_network(net, ds: Dataset, chunk: int = 256):
    """Eval-mode action values for every (company, shared day): array (T, N, 3)."""
    if ds.w != qnet.INPUT_SIZE:
        raise ShapeError(f"network expects {qnet.INPUT_SIZE}x{qnet.INPUT_SIZE} charts, dataset has w={ds.w}")
    dates, rows = aligned_days(ds)
    n, t = rows.shape
    rho = np.empty((t, n, 3))
    for c in range(n):
        states = ds.charts[c][rows[c] + 1]
        for a in range(0, t, chunk):
            rho[a : a + chunk, c] = qnet.forward(net, states[a : a + chunk], "eval")
    return rho, dates


def backtest_from_values(rho, returns, dates, kind: str, k_pct: float | None = None) -> BacktestReport:
    """Backtest given precomputed action values ``rho`` (T, N, 3) and returns (T, N)."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    rho = np.asarray(rho, dtype=np.float64)
    t, n, _ = rho.shape
    if kind == "neutral":
        actions = 1 - np.argmax(rho, axis=-1)  # (T, N)
        weights = neutral_from_actions(actions)
    else:
        if k_pct is None:
            raise ValueError("top/bottom-K backtest needs k_pct")
        weights = topk_from_scores(rho[..., 0] - rho[..., 2], k_pct)
        actions = np.sign(weights).astype(np.int64)
    daily = np.einsum("tn,tn->t", weights, returns)
    market_daily = returns.mean(axis=1)
    if t >= 2:
        avg_tr = count_transactions(actions.T)
        total_tr = np.count_nonzero(np.diff(actions, axis=0))
    else:
        avg_tr, total_tr = 0.0, 0
    per_tr = float(daily.sum()) / (total_tr / n) if total_tr else 0.0
    return BacktestReport(
        kind=kind,
        k_pct=k_pct if kind == "topk" else None,
        dates=np.asarray(dates),
        daily_returns=daily,
        market_daily_returns=market_daily,
        per_tr_return=per_tr,
        annual_return=annualize(daily, dates),
        avg_tr_count=avg_tr,
        market_avg_return=market_annual(returns, dates),
        period=(dates[0], dates[-1]),
    )


def backtest(net, ds: Dataset, kind: str = "neutral", k_pct: float | None = None) -> BacktestReport:
    """Run the network over every shared day of ``ds`` and account the chosen portfolio."""
    if ds.neutralized:
        raise DatasetError("backtests need raw returns; the dataset is neutralized")
    rho, dates = evaluate_network(net, ds)
    returns, _ = return_matrix(ds)
    return backtest_from_values(rho, returns, dates, kind, k_pct)


# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def format_k(k) -> str:
    """K as written to CSVs: empty for none, ``10`` for whole percentages, else ``2.5``."""
    if k is None or k == "":
        return ""
    k = float(k)
    return str(int(k)) if k.is_integer() else repr(k)


def report_row(report: BacktestReport) -> dict:
    return {
        "period": report.period_label,
        "kind": report.kind,
        "K": format_k(report.k_pct),
        "per_tr_return": _fmt(float(report.per_tr_return)),
        "annual_return": _fmt(float(report.annual_return)),
        "avg_tr_count": _fmt(float(report.avg_tr_count)),
        "market_avg_return": _fmt(float(report.market_avg_return)),
    }


def write_report_csv(reports, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(report_row(r))


def read_report_csv(path) -> list:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_daily_csv(report: BacktestReport, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "portfolio_return", "market_return"])
        for d, r, m in zip(report.dates, report.daily_returns, report.market_daily_returns):
            writer.writerow([str(d), repr(float(r)), repr(float(m))])
