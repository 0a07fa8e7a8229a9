from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartdqn.chart_encoder import ChartImage, encode_chart, encode_windows, scale_to_rows, to_pbm


def nearest_row_oracle(values, n_rows):
    """Exact rational min-max scaling; ties go to the smaller offset."""
    vals = [Fraction(v) for v in values]
    hi, lo = max(vals), min(vals)
    if hi == lo:
        return [(n_rows - 1) // 2] * len(vals)
    out = []
    for v in vals:
        pos = (hi - v) / (hi - lo) * (n_rows - 1)
        out.append(min(range(n_rows), key=lambda k: (abs(k - pos), k)))
    return out


def test_scale_endpoints():
    assert scale_to_rows([1, 2, 3], 3).tolist() == [2, 1, 0]


def test_scale_constant_goes_to_middle():
    assert scale_to_rows([5] * 6, 15).tolist() == [7] * 6


def test_scale_hand_case():
    assert scale_to_rows([0, 10, 5], 15).tolist() == [14, 0, 7]


@pytest.mark.parametrize("n_rows", [1, 2, 3, 15])
def test_scale_matches_rational_oracle(n_rows):
    rng = np.random.default_rng(n_rows)
    for _ in range(200):
        values = rng.integers(0, 50, size=8).tolist()
        assert scale_to_rows(values, n_rows).tolist() == nearest_row_oracle(values, n_rows)


def test_scale_ties_go_to_top():
    # 1 sits exactly half-way between offsets 0 and 1 of a 2-row band
    assert scale_to_rows([0, 1, 2], 2).tolist() == [1, 0, 0]


def test_w8_ascending_prices_constant_volume():
    chart = encode_chart(np.arange(1.0, 9.0), np.full(8, 1000.0))
    expected = np.array(
        [
            [0, 0, 0, 0, 0, 0, 1, 1],
            [0, 0, 1, 1, 1, 1, 0, 0],
            [1, 1, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1, 1],
        ],
        dtype=np.uint8,
    )
    np.testing.assert_array_equal(chart.pixels, expected)
    # the price rows agree with the exact-arithmetic oracle
    rows = nearest_row_oracle(list(range(1, 9)), 3)
    assert [int(np.flatnonzero(chart.pixels[:3, c])[0]) for c in range(8)] == rows


def test_w8_flat_window():
    chart = encode_chart(np.full(8, 3.0), np.full(8, 7.0))
    assert chart.pixels[1].tolist() == [1] * 8
    assert chart.pixels[0].sum() == 0 and chart.pixels[2].sum() == 0
    assert chart.pixels[3:5].sum() == 0


def test_length_mismatch():
    with pytest.raises(ValueError):
        encode_chart(np.ones(8), np.ones(6))


def test_bar_and_pixel_modes():
    closes = np.arange(1.0, 9.0)
    vols = np.arange(1.0, 9.0)
    pix = encode_chart(closes, vols, price_mode="bar", volume_mode="pixel").pixels
    # price bar runs from the price row down to the bottom of the price band
    assert pix[:3, 0].tolist() == [0, 0, 1]
    assert pix[:3, 7].tolist() == [1, 1, 1]
    # volume pixel: exactly one per column
    assert (pix[5:].sum(axis=0) == 1).all()


def test_windows_match_single_encoding():
    rng = np.random.default_rng(3)
    closes = rng.uniform(1, 2, 50)
    vols = rng.uniform(0, 5, 50)
    stack = encode_windows(closes, vols, 16)
    assert stack.shape == (35, 16, 16)
    for i in (0, 17, 34):
        np.testing.assert_array_equal(stack[i], encode_chart(closes[i : i + 16], vols[i : i + 16]).pixels)


def test_pbm_output():
    chart = encode_chart(np.arange(1.0, 9.0), np.full(8, 1.0))
    text = to_pbm(chart).splitlines()
    assert text[0] == "P1" and text[1] == "8 8"
    assert text[2] == "0 0 0 0 0 0 1 1"
    assert len(text) == 10


windows = st.integers(2, 16).flatmap(
    lambda half: st.tuples(
        st.lists(st.floats(0.01, 1e4), min_size=2 * half, max_size=2 * half),
        st.lists(st.floats(0, 1e7), min_size=2 * half, max_size=2 * half),
    )
)


@settings(max_examples=200, deadline=None)
@given(windows, st.floats(0.1, 100), st.floats(0.1, 100))
def test_structure_and_scale_invariance(window, k, m):
    closes, vols = (np.array(v) for v in window)
    chart = encode_chart(closes, vols)
    w = chart.w
    pix = chart.pixels
    assert set(np.unique(pix)) <= {0, 1}
    assert pix[w // 2 - 1 : w // 2 + 1].sum() == 0
    assert (chart.price_band().sum(axis=0) == 1).all()
    vb = chart.volume_band()
    for col in vb.T:
        filled = np.flatnonzero(col)
        assert len(filled) >= 1 and filled[-1] == len(col) - 1
        assert (np.diff(filled) == 1).all()
    assert encode_chart(closes * k, vols * m) == chart


def test_chart_equality_and_hash():
    a = ChartImage(4, np.eye(4, dtype=np.uint8))
    b = ChartImage(4, np.eye(4, dtype=np.uint8))
    assert a == b and hash(a) == hash(b)
