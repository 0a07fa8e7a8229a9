"""Synthetic markets with a planted, chart-visible pattern.

Prices follow a geometric random walk with Gaussian log-returns. Whenever the
trailing W-day window shows the planted pattern, the next day's expected
simple return is shifted by ``signal_strength`` percent. Because the pattern
is evaluated on exactly the window the chart encoder sees, a network reading
the chart can in principle recover the signal.

Patterns:

``momentum``
    The 5-day return ending today is at or above the 75th percentile of all
    5-day returns inside the window. Next-day drift ``+signal_strength``.
``reversal``
    Same condition, drift ``-signal_strength``.
``volume-spike``
    Today's volume is the largest in the window. Next-day drift
    ``+signal_strength``. Volumes carry random spikes so this happens often
    enough to learn.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_ingest import PriceSeries, Universe

PATTERNS = ("momentum", "reversal", "volume-spike")
LOOKBACK = 5
SPIKE_PROB = 0.08
SPIKE_SCALE = 4.0


@dataclass(frozen=True)
class SynthSpec:
    n_companies: int
    n_days: int
    pattern: str = "momentum"
    signal_strength: float = 0.5
    noise_sigma: float = 2.0
    seed: int = 0
    w: int = 32
    start: dt.date = dt.date(2001, 1, 1)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.n_companies < 1:
            raise ValueError("n_companies must be >= 1")
        if self.n_days <= self.w + 2:
            raise ValueError(f"n_days must exceed w + 2 = {self.w + 2}")
        if not np.isfinite(self.signal_strength) or not np.isfinite(self.noise_sigma):
            raise ValueError("signal_strength and noise_sigma must be finite")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")


def business_days(start, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward").astype("datetime64[D]")


def pattern_present(closes, volumes, pattern: str) -> bool:
    """Whether ``pattern`` holds on the last day of a trailing window."""
    closes = np.asarray(closes, dtype=np.float64)
    if pattern == "volume-spike":
        volumes = np.asarray(volumes, dtype=np.float64)
        return bool(volumes[-1] >= volumes.max() and volumes[-1] > np.median(volumes))
    r = closes[LOOKBACK:] / closes[:-LOOKBACK]
    return bool(r[-1] >= np.quantile(r, 0.75))


def _drift(pattern: str, present: bool, strength: float) -> float:
    if not present:
        return 0.0
    return -strength if pattern == "reversal" else strength


def oracle_score(series: PriceSeries, t: int, spec: SynthSpec) -> float:
    """Expected next-day percent return at day index ``t`` under the generator."""
    if t < spec.w - 1 or t >= len(series):
        raise ValueError(f"day {t} has no full trailing window of {spec.w} days")
    lo = t - spec.w + 1
    present = pattern_present(series.adj_close[lo : t + 1], series.volume[lo : t + 1], spec.pattern)
    return _drift(spec.pattern, present, spec.signal_strength)


def oracle_scores(series: PriceSeries, spec: SynthSpec) -> np.ndarray:
    """Oracle score for every day with a full window (index 0 = day ``w - 1``)."""
    return np.array([oracle_score(series, t, spec) for t in range(spec.w - 1, len(series))])


def _generate_company(spec: SynthSpec, index: int, dates) -> PriceSeries:
    rng = np.random.default_rng([spec.seed, index])
    n, w = spec.n_days, spec.w
    sigma = spec.noise_sigma / 100.0
    base_volume = rng.uniform(2e5, 5e6)
    log_vol = rng.normal(0.0, 0.5, size=n)
    if spec.pattern == "volume-spike":
        log_vol += np.where(rng.random(n) < SPIKE_PROB, np.log(SPIKE_SCALE), 0.0)
    volumes = np.round(base_volume * np.exp(log_vol))
    noise = rng.standard_normal(n)
    closes = np.empty(n)
    closes[0] = round(float(rng.uniform(10.0, 200.0)), 2)
    for t in range(n - 1):
        drift = 0.0
        if t >= w - 1:
            present = pattern_present(closes[t - w + 1 : t + 1], volumes[t - w + 1 : t + 1], spec.pattern)
            drift = _drift(spec.pattern, present, spec.signal_strength)
        # lognormal step whose arithmetic mean return is exactly `drift` percent
        mu = np.log1p(drift / 100.0) - 0.5 * sigma * sigma
        closes[t + 1] = closes[t] * np.exp(mu + sigma * noise[t])
    return PriceSeries(company_id=f"SYN{index:04d}", dates=dates, adj_close=closes, volume=volumes)


def generate(spec: SynthSpec) -> Universe:
    dates = business_days(spec.start, spec.n_days)
    companies = [_generate_company(spec, c, dates) for c in range(spec.n_companies)]
    return Universe(companies=companies, period=(dates[0], dates[-1]), n_selected=spec.n_companies)


def write_yahoo_csvs(universe: Universe, out_dir) -> Path:
    """Write one Yahoo-layout CSV per company plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as mf:
        mwriter = csv.writer(mf, lineterminator="\n")
        for s in universe.companies:
            name = f"{s.company_id}.csv"
            with (out_dir / name).open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["Date", "Open", "High", "Low", "Close", "Adj Close", "Volume"])
                for day, close, vol in zip(s.dates, s.adj_close, s.volume):
                    c = repr(float(close))
                    writer.writerow([str(day), c, c, c, c, c, repr(float(vol))])
            mwriter.writerow([s.company_id, name])
    return manifest
