import numpy as np
import pytest

from chartdqn import stats_eval as se
from chartdqn.errors import DegenerateDistributionError

from .helpers import small_dataset


def test_random_neutral_invariants():
    rng = np.random.default_rng(0)
    for n in (2, 3, 10, 57):
        for _ in range(200):
            w = se.random_neutral(n, rng).weights
            assert abs(w.sum()) <= 1e-12 and abs(np.abs(w).sum() - 1) <= 1e-12
    with pytest.raises(ValueError):
        se.random_neutral(1, rng)


def test_random_neutral_two_companies():
    rng = np.random.default_rng(1)
    for _ in range(100):
        assert sorted(se.random_neutral(2, rng).weights.tolist()) == [-0.5, 0.5]


def test_random_neutral_unbiased():
    rng = np.random.default_rng(2)
    draws = np.stack([se.random_neutral(8, rng).weights for _ in range(10_000)])
    se_mean = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert (np.abs(draws.mean(axis=0)) < 3 * se_mean).all()


def test_random_topk():
    rng = np.random.default_rng(3)
    counts = np.zeros(10)
    for _ in range(10_000):
        w = se.random_topk(10, 20, rng).weights
        assert (w > 0).sum() == 2 and (w < 0).sum() == 2
        assert set(np.abs(w[w != 0])) == {0.25}
        counts += w > 0
    freq = counts / 10_000
    stderr = np.sqrt(0.2 * 0.8 / 10_000)
    assert (np.abs(freq - 0.2) < 3 * stderr).all()


def _market(t=500, n=30, seed=0):
    rng = np.random.default_rng(seed)
    dates = np.busday_offset(np.datetime64("2001-01-01"), np.arange(t), roll="forward").astype("datetime64[D]")
    return rng.normal(0.05, 2.0, (t, n)), dates


def test_simulation_reproducible_and_thread_independent():
    rets, dates = _market()
    a = se.simulate_annual_returns(rets, dates, "neutral", None, 40, seed=9, threads=1)
    b = se.simulate_annual_returns(rets, dates, "neutral", None, 40, seed=9, threads=3)
    assert np.array_equal(a, b)
    c = se.simulate_annual_returns(rets, dates, "topk", 10, 40, seed=9, threads=2)
    assert np.array_equal(c, se.simulate_annual_returns(rets, dates, "topk", 10, 40, seed=9))
    assert not np.array_equal(a, se.simulate_annual_returns(rets, dates, "neutral", None, 40, seed=10))
    with pytest.raises(ValueError):
        se.simulate_annual_returns(rets, dates, "other", None, 4, 0)


def test_neutral_null_mean_and_k_ordering():
    rets, dates = _market(t=250, n=100, seed=1)
    sims = {k: se.simulate_annual_returns(rets, dates, "topk", k, 300, seed=2) for k in (5, 20)}
    assert sims[5].std(ddof=1) > sims[20].std(ddof=1)
    neutral = se.simulate_annual_returns(rets, dates, "neutral", None, 1000, seed=3)
    assert abs(neutral.mean()) < 4 * neutral.std(ddof=1) / np.sqrt(1000)


def test_monte_carlo_on_dataset():
    ds = small_dataset(n_companies=5, n_days=90)
    stats = se.monte_carlo(ds, "neutral", sims=2, seed=0)
    assert stats.sims == 2 and np.isfinite(stats.sigma) and stats.n == 5 and stats.k_pct is None
    again = se.monte_carlo(ds, "neutral", sims=2, seed=0)
    assert again == stats
    top = se.monte_carlo(ds, "topk", 20, sims=5, seed=0)
    assert top.k_pct == 20 and top.kind == "topk"
    with pytest.raises(ValueError):
        se.monte_carlo(ds, "neutral", sims=1)


def test_z_scores():
    assert se.z_score(11.38, se.McStats(0.0, 0.299, 10_000, "neutral")).z == pytest.approx(38.06, abs=0.01)
    assert se.z_score(40.04, se.McStats(0.0, 0.811, 10_000, "topk", 5)).z == pytest.approx(49.37, abs=0.01)
    assert se.z_score(1.5, se.McStats(1.5, 0.3, 10, "neutral")).z == 0.0
    with pytest.raises(DegenerateDistributionError):
        se.z_score(1.0, se.McStats(0.0, 0.0, 10, "neutral"))


def test_zscore_csv(tmp_path):
    rows = [
        se.zscore_row(se.McStats(0.01, 0.299, 10_000, "neutral", None, 500), 11.38),
        se.zscore_row(se.McStats(0.0, 0.811, 10_000, "topk", 5, 3000)),
    ]
    se.write_zscore_csv(rows, tmp_path / "z.csv")
    lines = (tmp_path / "z.csv").read_text().splitlines()
    assert lines[0] == "portfolio_kind,K,N,mu,sigma,mu_bar,z"
    assert lines[1].startswith("neutral,,500,0.01,0.299,11.38,")
    assert lines[2] == "topk,5,3000,0.0,0.811,,"
