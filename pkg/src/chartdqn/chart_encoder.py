"""Binary chart images built from a window of closing prices and volumes.

A W x W chart has one column per day. The top ``W/2 - 1`` rows hold the
min-max scaled closing price, the bottom ``W/2 - 1`` rows hold the scaled
volume, and the two middle rows are always empty. Row 0 is the top.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RENDER_MODES = ("pixel", "bar")

# Near-ties are resolved toward the top of the band. The slack keeps the
# rounding stable when a scaled value lands a few ulps away from x.5.
_TIE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class ChartImage:
    w: int
    pixels: np.ndarray  # (w, w) uint8, values in {0, 1}

    def __eq__(self, other):
        if not isinstance(other, ChartImage):
            return NotImplemented
        return self.w == other.w and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.w, self.pixels.tobytes()))

    def price_band(self) -> np.ndarray:
        return self.pixels[: self.w // 2 - 1]

    def volume_band(self) -> np.ndarray:
        return self.pixels[self.w // 2 + 1 :]


def _scale_rows(values: np.ndarray, n_rows: int) -> np.ndarray:
    """Vectorised row scaling over the last axis of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    hi = values.max(axis=-1, keepdims=True)
    lo = values.min(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    safe = np.where(flat, 1.0, span)
    pos = (hi - values) / safe * (n_rows - 1)
    offsets = np.ceil(pos - 0.5 - _TIE_SLACK).astype(np.int64)
    offsets = np.clip(offsets, 0, n_rows - 1)
    return np.where(flat, (n_rows - 1) // 2, offsets)


def scale_to_rows(values, n_rows: int) -> np.ndarray:
    """Map each value to a row offset inside a band of ``n_rows`` rows.

    The maximum lands on offset 0 (top of the band) and the minimum on
    ``n_rows - 1``. A constant input maps to the middle offset.

    >>> scale_to_rows([1, 2, 3], 3).tolist()
    [2, 1, 0]
    """
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    return _scale_rows(values, n_rows)


def _check_modes(price_mode, volume_mode):
    if price_mode not in RENDER_MODES or volume_mode not in RENDER_MODES:
        raise ValueError(f"render modes must be one of {RENDER_MODES}")


def encode_windows(closes, volumes, w: int, price_mode="pixel", volume_mode="bar") -> np.ndarray:
    """Encode every length-``w`` window of two aligned series.

    Returns a uint8 array of shape ``(len(closes) - w + 1, w, w)`` where
    entry ``i`` is the chart for days ``i .. i + w - 1``.
    """
    _check_modes(price_mode, volume_mode)
    closes = np.asarray(closes, dtype=np.float64)
    volumes = np.asarray(volumes, dtype=np.float64)
    if closes.shape != volumes.shape or closes.ndim != 1:
        raise ValueError("closes and volumes must be 1-D arrays of equal length")
    if w < 4 or w % 2:
        raise ValueError(f"chart width must be even and >= 4, got {w}")
    n = len(closes) - w + 1
    if n <= 0:
        return np.zeros((0, w, w), dtype=np.uint8)
    cwin = np.lib.stride_tricks.sliding_window_view(closes, w)
    vwin = np.lib.stride_tricks.sliding_window_view(volumes, w)
    return _render(cwin, vwin, w, price_mode, volume_mode)


def _render(cwin, vwin, w, price_mode, volume_mode):
    band = w // 2 - 1
    n = cwin.shape[0]
    price_rows = _scale_rows(cwin, band)
    vol_rows = _scale_rows(vwin, band) + (w // 2 + 1)

    rows = np.arange(w)[None, :, None]  # broadcast over (n, row, column)
    if price_mode == "pixel":
        price = rows == price_rows[:, None, :]
    else:
        price = (rows >= price_rows[:, None, :]) & (rows < band)
    if volume_mode == "pixel":
        volume = rows == vol_rows[:, None, :]
    else:
        volume = rows >= vol_rows[:, None, :]
    out = (price | volume).astype(np.uint8)
    assert out.shape == (n, w, w)
    return out


def encode_chart(closes, volumes, price_mode="pixel", volume_mode="bar") -> ChartImage:
    """Encode one window of closes and volumes into a chart image."""
    closes = np.asarray(closes, dtype=np.float64)
    volumes = np.asarray(volumes, dtype=np.float64)
    if closes.shape != volumes.shape:
        raise ValueError(
            f"closes and volumes differ in length ({closes.shape} vs {volumes.shape})"
        )
    w = closes.shape[0]
    pixels = encode_windows(closes, volumes, w, price_mode, volume_mode)[0]
    return ChartImage(w=w, pixels=pixels)


def to_pbm(chart: ChartImage) -> str:
    """Plain-text P1 bitmap, one chart row per line, 1 = black."""
    lines = ["P1", f"{chart.w} {chart.w}"]
    lines += [" ".join(str(int(v)) for v in row) for row in chart.pixels]
    return "\n".join(lines) + "\n"


def write_pbm(chart: ChartImage, path) -> None:
    Path(path).write_text(to_pbm(chart), encoding="ascii")
