"""Reading per-company price files and turning them into chart datasets."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chart_encoder import ChartImage, encode_windows
from .errors import DatasetError, DomainError, EmptySeriesError, FormatError

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("Date", "Open", "High", "Low", "Close", "Adj Close", "Volume")
DEFAULT_BOUND = 20.0


@dataclass(frozen=True, eq=False)
class PriceSeries:
    company_id: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    adj_close: np.ndarray
    volume: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        n = len(self.dates)
        if len(self.adj_close) != n or len(self.volume) != n:
            raise ValueError(f"{self.company_id}: dates, adj_close and volume differ in length")
        if n > 1 and not np.all(np.diff(self.dates.astype(np.int64)) > 0):
            raise ValueError(f"{self.company_id}: dates are not strictly increasing")
        if n and np.any(self.adj_close <= 0):
            raise ValueError(f"{self.company_id}: non-positive adjusted close")

    def __len__(self):
        return len(self.dates)

    def __eq__(self, other):
        if not isinstance(other, PriceSeries):
            return NotImplemented
        return (
            self.company_id == other.company_id
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.adj_close, other.adj_close)
            and np.array_equal(self.volume, other.volume)
        )

    def between(self, start, end) -> "PriceSeries":
        """Rows with ``start <= date <= end``."""
        keep = (self.dates >= np.datetime64(start, "D")) & (self.dates <= np.datetime64(end, "D"))
        return PriceSeries(self.company_id, self.dates[keep], self.adj_close[keep], self.volume[keep])


@dataclass
class Universe:
    companies: list
    period: tuple
    n_selected: int

    def __post_init__(self):
        if len(self.companies) > self.n_selected:
            raise ValueError("universe holds more companies than n_selected")


@dataclass(frozen=True)
class Sample:
    company_id: str
    date: np.datetime64
    chart: ChartImage
    next_return: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-company rows of samples.

    For company ``c`` with ``n`` samples, ``charts[c]`` holds ``n + 2`` charts:
    chart ``i + 1`` is the state of sample ``i``, chart ``i`` the state the day
    before and chart ``i + 2`` the state the day after. ``returns[c][i]`` is
    the (bounded, possibly neutralised) next-day return of sample ``i``.
    """

    company_ids: tuple
    w: int
    dates: tuple  # per company, datetime64[D] of each sample day
    charts: tuple  # per company, uint8 (n + 2, w, w)
    returns: tuple  # per company, float64 (n,)
    neutralized: bool = False
    mean_return: float = 0.0
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.array([len(r) for r in self.returns], dtype=np.int64)
        object.__setattr__(self, "_offsets", np.concatenate([[0], np.cumsum(counts)]))

    @property
    def n_companies(self) -> int:
        return len(self.company_ids)

    @property
    def n_samples(self) -> int:
        return int(self._offsets[-1])

    def samples_for(self, c: int) -> int:
        return len(self.returns[c])

    def locate(self, flat_index):
        """Map flat sample indices (company-major) to ``(company, row)`` pairs."""
        flat_index = np.asarray(flat_index)
        c = np.searchsorted(self._offsets, flat_index, side="right") - 1
        return c, flat_index - self._offsets[c]

    def chart(self, c: int, i: int, shift: int = 0) -> np.ndarray:
        """State of sample ``i`` of company ``c``; ``shift`` -1/+1 gives the day before/after."""
        if not 0 <= i < self.samples_for(c):
            raise IndexError(f"sample {i} out of range for company {c}")
        return self.charts[c][i + 1 + shift]

    def sample(self, c: int, i: int) -> Sample:
        return Sample(
            company_id=self.company_ids[c],
            date=self.dates[c][i],
            chart=ChartImage(self.w, self.chart(c, i)),
            next_return=float(self.returns[c][i]),
        )

    def all_returns(self) -> np.ndarray:
        if not self.returns:
            return np.zeros(0)
        return np.concatenate(self.returns)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.company_ids == other.company_ids
            and self.w == other.w
            and self.neutralized == other.neutralized
            and self.mean_return == other.mean_return
            and all(np.array_equal(a, b) for a, b in zip(self.dates, other.dates))
            and all(np.array_equal(a, b) for a, b in zip(self.charts, other.charts))
            and all(np.array_equal(a, b) for a, b in zip(self.returns, other.returns))
        )

    def save(self, path) -> None:
        arrays = {"w": np.array(self.w), "neutralized": np.array(self.neutralized),
                  "mean_return": np.array(self.mean_return), "company_ids": np.array(self.company_ids, dtype=str)}
        for c in range(self.n_companies):
            arrays[f"dates_{c}"] = self.dates[c]
            arrays[f"charts_{c}"] = self.charts[c]
            arrays[f"returns_{c}"] = self.returns[c]
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            ids = tuple(str(s) for s in z["company_ids"])
            return cls(
                company_ids=ids,
                w=int(z["w"]),
                dates=tuple(z[f"dates_{c}"] for c in range(len(ids))),
                charts=tuple(z[f"charts_{c}"] for c in range(len(ids))),
                returns=tuple(z[f"returns_{c}"] for c in range(len(ids))),
                neutralized=bool(z["neutralized"]),
                mean_return=float(z["mean_return"]),
            )


# ---------------------------------------------------------------------------

def _parse_float(text):
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def parse_price_csv(path, company_id: str | None = None) -> PriceSeries:
    """Read a Yahoo-layout CSV (Date,Open,High,Low,Close,Adj Close,Volume).

    Rows with an unparseable date, Adj Close or Volume, or a non-positive
    Adj Close, are dropped; the count is kept in ``PriceSeries.dropped``.
    Duplicate dates keep the first occurrence.
    """
    path = Path(path)
    if company_id is None:
        company_id = path.stem
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptySeriesError(f"{path}: file is empty") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise FormatError(f"{path}: missing required column {col!r}")
        i_date, i_close, i_vol = header.index("Date"), header.index("Adj Close"), header.index("Volume")
        rows = {}
        dropped = 0
        for row in reader:
            if not row:
                continue
            try:
                day = np.datetime64(dt.date.fromisoformat(row[i_date].strip()), "D")
            except (IndexError, ValueError):
                dropped += 1
                continue
            close = _parse_float(row[i_close]) if len(row) > i_close else None
            volume = _parse_float(row[i_vol]) if len(row) > i_vol else None
            if close is None or volume is None or close <= 0 or volume < 0 or day in rows:
                dropped += 1
                continue
            rows[day] = (close, volume)
    if not rows:
        raise EmptySeriesError(f"{path}: no parseable rows ({dropped} dropped)")
    if dropped:
        log.info("%s: dropped %d rows", path, dropped)
    days = sorted(rows)
    return PriceSeries(
        company_id=company_id,
        dates=np.array(days, dtype="datetime64[D]"),
        adj_close=np.array([rows[d][0] for d in days]),
        volume=np.array([rows[d][1] for d in days]),
        dropped=dropped,
    )


def read_manifest(path) -> list:
    """``company_id,path`` lines; relative paths resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'company_id,path'")
            cid, rel = row[0].strip(), row[1].strip()
            target = Path(rel)
            entries.append((cid, target if target.is_absolute() else path.parent / target))
    return entries


def load_manifest(path) -> list:
    return [parse_price_csv(p, company_id=cid) for cid, p in read_manifest(path)]


def filter_universe(series, period, zero_volume_limit: float = 0.25) -> list:
    """Drop companies with no rows in ``period`` or too many zero-volume days there."""
    if not 0 < zero_volume_limit <= 1:
        raise ValueError(f"zero_volume_limit must be in (0, 1], got {zero_volume_limit}")
    start, end = period
    kept = []
    for s in series:
        window = s.between(start, end)
        n = len(window)
        if n == 0:
            continue
        if np.count_nonzero(window.volume == 0) > zero_volume_limit * n:
            continue
        kept.append(s)
    return kept


def liquidity(series: PriceSeries, start, end) -> float:
    """Mean dollar volume (adj_close x volume) over the rows in [start, end)."""
    keep = (series.dates >= np.datetime64(start, "D")) & (series.dates < np.datetime64(end, "D"))
    if not keep.any():
        return 0.0
    return float(np.mean(series.adj_close[keep] * series.volume[keep]))


def select_top_liquid(series, n: int, as_of, window_days: int = 30, test_end=None) -> Universe:
    """Keep the ``n`` most liquid companies over the ``window_days`` business days before ``as_of``.

    Business days are the union of dates found in ``series``. A candidate must
    be listed over the whole ranking window and, when ``test_end`` is given,
    still be listed on the last business day up to ``test_end``. Ties in
    liquidity go to the lexicographically smaller company id.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if window_days < 1:
        raise ValueError(f"window_days must be >= 1, got {window_days}")
    as_of = np.datetime64(as_of, "D")
    calendar = np.unique(np.concatenate([s.dates for s in series])) if series else np.array([], "datetime64[D]")
    before = calendar[calendar < as_of]
    if len(before) < window_days:
        return Universe(companies=[], period=(as_of, test_end), n_selected=n)
    window_start = before[-window_days]
    last_needed = None
    if test_end is not None:
        upto = calendar[calendar <= np.datetime64(test_end, "D")]
        last_needed = upto[-1] if len(upto) else None

    ranked = []
    for s in series:
        if not len(s) or s.dates[0] > window_start:
            continue
        if last_needed is not None and s.dates[-1] < last_needed:
            continue
        window = (s.dates >= window_start) & (s.dates < as_of)
        if np.count_nonzero(window) < window_days:
            continue
        ranked.append((-liquidity(s, window_start, as_of), s.company_id, s))
    ranked.sort(key=lambda item: (item[0], item[1]))
    chosen = [s for _, _, s in ranked[:n]]
    return Universe(companies=chosen, period=(as_of, test_end), n_selected=n)


def compute_return(prc_t: float, prc_t1: float, bound: float = DEFAULT_BOUND) -> float:
    """Percent return from ``prc_t`` to ``prc_t1`` clipped to [-bound, bound]."""
    if not prc_t > 0:
        raise DomainError(f"price must be positive, got {prc_t}")
    if not bound > 0:
        raise DomainError(f"bound must be positive, got {bound}")
    r = 100.0 * (prc_t1 - prc_t) / prc_t
    return min(max(r, -bound), bound)


def compute_returns(prices, bound: float = DEFAULT_BOUND) -> np.ndarray:
    """Vector form of :func:`compute_return` over consecutive prices."""
    prices = np.asarray(prices, dtype=np.float64)
    if np.any(prices[:-1] <= 0):
        raise DomainError("prices must be positive")
    return np.clip(100.0 * (prices[1:] - prices[:-1]) / prices[:-1], -bound, bound)


def neutralize(dataset: Dataset) -> Dataset:
    """Subtract the grand mean of all next-day returns."""
    if dataset.neutralized:
        raise DatasetError("dataset is already neutralized")
    values = dataset.all_returns()
    if values.size == 0:
        raise DatasetError("cannot neutralize an empty dataset")
    mean = float(values.mean())
    shifted = tuple(r - mean for r in dataset.returns)
    # one correction pass absorbs the rounding left by the first subtraction
    residual = float(np.concatenate(shifted).mean()) if shifted else 0.0
    shifted = tuple(r - residual for r in shifted)
    return Dataset(
        company_ids=dataset.company_ids, w=dataset.w, dates=dataset.dates, charts=dataset.charts,
        returns=shifted, neutralized=True, mean_return=mean + residual,
    )


def company_rows(series: PriceSeries, w: int, bound: float = DEFAULT_BOUND, price_mode="pixel", volume_mode="bar"):
    """Sample dates, charts and bounded returns for one company."""
    n_days = len(series)
    n_samples = max(0, n_days - w - 1)
    if n_samples == 0:
        return (np.array([], dtype="datetime64[D]"), np.zeros((0, w, w), dtype=np.uint8), np.zeros(0))
    # charts for days w-1 .. n_days-1; sample t = w + i uses chart index i + 1
    charts = encode_windows(series.adj_close, series.volume, w, price_mode, volume_mode)
    returns = compute_returns(series.adj_close[w - 1 :], bound)[1:]
    dates = series.dates[w : n_days - 1]
    assert len(returns) == n_samples and len(charts) == n_samples + 2
    return dates, charts, returns


def build_dataset(universe, w: int = 32, neutralize_flag: bool = False, bound: float = DEFAULT_BOUND,
                  price_mode="pixel", volume_mode="bar") -> Dataset:
    """One sample per company per day t in [w, T-2] (zero-indexed)."""
    if w < 4:
        raise ValueError(f"chart width must be >= 4, got {w}")
    if w % 2:
        raise ValueError(f"chart width must be even, got {w}")
    companies = universe.companies if isinstance(universe, Universe) else list(universe)
    ids, dates, charts, returns = [], [], [], []
    for s in companies:
        d, ch, r = company_rows(s, w, bound, price_mode, volume_mode)
        ids.append(s.company_id)
        dates.append(d)
        charts.append(ch)
        returns.append(r)
    ds = Dataset(company_ids=tuple(ids), w=w, dates=tuple(dates), charts=tuple(charts), returns=tuple(returns))
    return neutralize(ds) if neutralize_flag else ds
