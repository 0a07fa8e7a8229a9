"""Random-portfolio baselines and Z-scores against them."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_ingest import Dataset
from .errors import DegenerateDistributionError
from .portfolio import PortfolioWeights, annualize, format_k, neutral_from_actions, return_matrix, topk_count

ZSCORE_COLUMNS = ("portfolio_kind", "K", "N", "mu", "sigma", "mu_bar", "z")


@dataclass(frozen=True)
class McStats:
    mu: float
    sigma: float
    sims: int
    kind: str
    k_pct: float | None = None
    n: int | None = None


@dataclass(frozen=True)
class ZScoreResult:
    mu_bar: float
    z: float


def _random_neutral_rows(rng, shape):
    return neutral_from_actions(rng.uniform(-1.0, 1.0, size=shape))


def _random_topk_rows(rng, rows, n, m):
    order = np.argsort(rng.random((rows, n)), axis=1)
    out = np.zeros((rows, n))
    np.put_along_axis(out, order[:, :m], 1.0 / (2 * m), axis=1)
    np.put_along_axis(out, order[:, m : 2 * m], -1.0 / (2 * m), axis=1)
    return out


def random_neutral(n: int, rng) -> PortfolioWeights:
    """Uniform [-1, 1] draws, de-meaned and scaled to unit gross exposure."""
    if n < 2:
        raise ValueError("a market-neutral portfolio needs n >= 2")
    return PortfolioWeights(_random_neutral_rows(rng, (n,)), kind="neutral")


def random_topk(n: int, k_pct: float, rng) -> PortfolioWeights:
    """Disjoint random long and short sets of size floor(n*K/100), weights +-1/(2m)."""
    m = topk_count(n, k_pct)
    return PortfolioWeights(_random_topk_rows(rng, 1, n, m)[0], kind="topk")


def _simulate(returns, dates, kind, k_pct, seed, sim_ids):
    t, n = returns.shape
    out = np.empty(len(sim_ids))
    m = topk_count(n, k_pct) if kind == "topk" else None
    for j, s in enumerate(sim_ids):
        rng = np.random.default_rng([seed, s])
        if kind == "neutral":
            weights = _random_neutral_rows(rng, (t, n))
        else:
            weights = _random_topk_rows(rng, t, n, m)
        daily = np.einsum("tn,tn->t", weights, returns)
        out[j] = annualize(daily, dates)
    return out


def simulate_annual_returns(returns, dates, kind: str, k_pct, sims: int, seed: int, threads: int = 1) -> np.ndarray:
    """Annual return of ``sims`` random daily-rebalanced portfolios.

    Simulation ``s`` draws from its own stream seeded by ``(seed, s)``, so the
    result does not depend on ``threads``.
    """
    if kind not in ("neutral", "topk"):
        raise ValueError(f"unknown portfolio kind {kind!r}")
    returns = np.asarray(returns, dtype=np.float64)
    ids = np.arange(sims)
    if threads <= 1 or sims < 2 * threads:
        return _simulate(returns, dates, kind, k_pct, seed, ids)
    chunks = np.array_split(ids, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda c: _simulate(returns, dates, kind, k_pct, seed, c), chunks)
        return np.concatenate(list(parts))


def monte_carlo(ds: Dataset, kind: str, k_pct=None, sims: int = 10_000, seed: int = 0, threads: int = 1) -> McStats:
    """Mean and sample standard deviation of random-portfolio annual returns on ``ds``."""
    if sims < 2:
        raise ValueError("monte_carlo needs sims >= 2")
    returns, dates = return_matrix(ds)
    annual = simulate_annual_returns(returns, dates, kind, k_pct, sims, seed, threads)
    return McStats(
        mu=float(annual.mean()),
        sigma=float(annual.std(ddof=1)),
        sims=sims,
        kind=kind,
        k_pct=k_pct if kind == "topk" else None,
        n=returns.shape[1],
    )


def z_score(mu_bar: float, stats: McStats) -> ZScoreResult:
    if not stats.sigma > 0:
        raise DegenerateDistributionError("random-portfolio returns have zero spread; Z-score undefined")
    return ZScoreResult(mu_bar=mu_bar, z=(mu_bar - stats.mu) / stats.sigma)


def zscore_row(stats: McStats, mu_bar: float | None = None) -> dict:
    z = z_score(mu_bar, stats).z if mu_bar is not None else None
    return {
        "portfolio_kind": stats.kind,
        "K": format_k(stats.k_pct),
        "N": "" if stats.n is None else str(stats.n),
        "mu": repr(stats.mu),
        "sigma": repr(stats.sigma),
        "mu_bar": "" if mu_bar is None else repr(float(mu_bar)),
        "z": "" if z is None else repr(float(z)),
    }


def write_zscore_csv(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ZSCORE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
