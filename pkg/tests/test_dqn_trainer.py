import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartdqn import dqn_trainer as dt
from chartdqn import qnet
from chartdqn.dqn_trainer import Action, Batch, Experience, HyperParams, ReplayBuffer
from chartdqn.errors import DatasetError, FormatError

from .helpers import constant_network, small_dataset, tagged_dataset
from .oracles import REWARD_PENALTY, REWARD_RETURNS, REWARD_TABLE


def test_action_scalars():
    assert dt.action_to_scalar(Action.LONG) == 1
    assert dt.action_to_scalar(Action.NEUTRAL) == 0
    assert dt.action_to_scalar(Action.SHORT) == -1
    assert [dt.scalar_to_index(a) for a in (1, 0, -1)] == [0, 1, 2]


def test_table_defaults():
    hp = HyperParams()
    assert (hp.maxiter, hp.learning_rate, hp.eps_min, hp.w) == (5_000_000, 0.00001, 0.1, 32)
    assert (hp.buffer_capacity, hp.update_interval, hp.target_interval) == (1000, 10, 1000)
    assert (hp.penalty, hp.gamma, hp.batch_size, hp.eps_decay) == (0.05, 0.99, 32, 0.999999)


@pytest.mark.parametrize(
    "kw", [{"maxiter": 0}, {"eps_min": 0}, {"eps_min": 1.5}, {"gamma": 1.0}, {"batch_size": 2000}, {"penalty": -1}]
)
def test_hyperparams_validated(kw):
    with pytest.raises(ValueError):
        HyperParams(**kw)


def test_config_round_trip_and_errors():
    hp = HyperParams(maxiter=1234, target_interval=7, penalty=0.0)
    assert dt.parse_config(dt.dump_config(hp)) == hp
    text = "# comment\nmaxiter = 200000\nW=32\nM=500\nB=5\nC=20\nP=0.1\ngamma=0.9\nbatch_size=16\nlearning_rate=1e-4\neps_min=0.2\n"
    hp = dt.parse_config(text)
    assert (hp.maxiter, hp.buffer_capacity, hp.update_interval, hp.target_interval) == (200000, 500, 5, 20)
    assert (hp.penalty, hp.gamma, hp.batch_size, hp.learning_rate, hp.eps_min) == (0.1, 0.9, 16, 1e-4, 0.2)
    for bad in ("foo=1\n", "maxiter\n", "maxiter=abc\n", "gamma=1.5\n"):
        with pytest.raises(FormatError):
            dt.parse_config(bad)


def test_reward_examples():
    assert dt.compute_reward(1, 1, 2.0, 0.05) == 2.0
    assert dt.compute_reward(-1, 1, -3.0, 0.05) == 2.9
    assert dt.compute_reward(0, 0, 7.0, 0.05) == 0.0


def test_reward_table():
    for (a, prev), row in REWARD_TABLE.items():
        for l, want in zip(REWARD_RETURNS, row):
            assert dt.compute_reward(a, prev, l, REWARD_PENALTY) == want


def test_epsilon_greedy_examples():
    rng = np.random.default_rng(0)
    assert dt.epsilon_greedy([0.1, 0.5, 0.2], 0.0, rng) == 0
    assert dt.epsilon_greedy([0.5, 0.5, 0.1], 0.0, rng) == 1
    assert dt.epsilon_greedy([0.1, 0.2, 0.3], 0.0, rng) == -1


def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(1)
    draws = np.array([dt.epsilon_greedy([1.0, 0.0, 0.0], 1.0, rng) for _ in range(30_000)])
    for a in (1, 0, -1):
        assert abs(np.mean(draws == a) - 1 / 3) < 0.02


def test_decay_epsilon():
    hp = HyperParams()
    assert dt.decay_epsilon(1.0, hp) == 0.999999
    assert dt.decay_epsilon(0.1, hp) == 0.1
    eps = 1.0
    for _ in range(5000):
        eps = dt.decay_epsilon(eps, hp)
    assert eps == pytest.approx(0.999999**5000, rel=1e-12)
    assert dt.epsilon_after(5000, hp) == max(0.1, 0.999999**5000)
    assert dt.epsilon_after(3_000_000, hp) == 0.1
    fast = HyperParams(eps_decay=0.5, eps_min=0.1)
    assert [dt.epsilon_after(n, fast) for n in range(5)] == [1.0, 0.5, 0.25, 0.125, 0.1]


def _experience(tag, w=4):
    s = np.full((w, w), tag % 256, dtype=np.uint8)
    return Experience(s=s, a=(tag % 3) - 1, r=float(tag), s_next=s)


def test_experience_action_validated():
    with pytest.raises(ValueError):
        Experience(np.zeros((4, 4)), 2, 0.0, np.zeros((4, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(0, 300))
def test_buffer_fifo(capacity, k):
    buf = ReplayBuffer(capacity, 4)
    for i in range(1, k + 1):
        buf.append(_experience(i))
    assert len(buf) == min(k, capacity)
    assert [e.r for e in buf] == [float(i) for i in range(max(1, k - capacity + 1), k + 1)]


def test_buffer_sample_distinct():
    buf = ReplayBuffer(10, 4)
    for i in range(25):
        buf.append(_experience(i))
    rng = np.random.default_rng(0)
    batch = buf.sample(10, rng)
    assert sorted(batch.r.tolist()) == [float(i) for i in range(15, 25)]
    with pytest.raises(ValueError):
        buf.sample(11, rng)


def test_generate_experience_constant_network():
    ds = small_dataset()
    net = constant_network([0.3, 0.1, 0.2])
    rng = np.random.default_rng(0)
    for _ in range(20):
        e = dt.generate_experience(ds, net, 0.0, HyperParams(), rng)
        # greedy on a constant network repeats its action, so no penalty is charged
        assert e.a == 1
        matches = [(c, i) for c in range(ds.n_companies) for i in range(ds.samples_for(c)) if np.array_equal(ds.chart(c, i), e.s)]
        assert any(e.r == ds.returns[c][i] and np.array_equal(e.s_next, ds.chart(c, i, 1)) for c, i in matches)


def test_generate_experience_uniform():
    ds = tagged_dataset(10, 100)
    rng = np.random.default_rng(7)
    hp = HyperParams()
    counts = np.zeros((10, 100))
    for _ in range(100_000):
        e = dt.generate_experience(ds, None, 1.0, hp, rng)
        c, row = int(e.s[0, 0]), int(e.s[0, 1]) - 1
        assert e.s_next[0, 1] == row + 2
        counts[c, row] += 1
    expected = 100_000 / 1000
    sigma = np.sqrt(100_000 * (1 / 1000) * (1 - 1 / 1000))
    assert np.abs(counts - expected).max() < 4 * sigma


def test_generate_experience_empty():
    ds = tagged_dataset(2, 0)
    with pytest.raises(DatasetError):
        dt.generate_experience(ds, None, 1.0, HyperParams(), np.random.default_rng(0))


def test_td_loss_hand_case():
    theta = constant_network([0.5, 0.0, 0.0])
    target = constant_network([2.0, 1.0, -1.0])
    s = np.zeros((32, 32), dtype=np.uint8)
    res = dt.td_loss([Experience(s, 1, 1.0, s)], theta, target, 0.99)
    assert abs(res.loss - 6.1504) < 1e-12
    assert res.dout.tolist() == [[2 * (0.5 - 2.98), 0.0, 0.0]]


def _batch(seed, k=6):
    rng = np.random.default_rng(seed)
    s = (rng.random((k, 32, 32)) < 0.2).astype(np.uint8)
    s_next = (rng.random((k, 32, 32)) < 0.2).astype(np.uint8)
    return Batch(s, rng.integers(-1, 2, k), rng.normal(size=k), s_next)


def test_td_loss_exact_fit():
    net = qnet.init_network(3)
    b = _batch(0)
    q = qnet.forward(net.copy(), b.s, "train")
    fitted = Batch(b.s, b.a, q[np.arange(len(b)), 1 - b.a], b.s_next)
    assert dt.td_loss(fitted, net, net.copy(), 0.0).loss == 0.0


def test_td_loss_permutation_and_gradient_slots():
    net, target = qnet.init_network(3), qnet.init_network(4)
    b = _batch(1)
    res = dt.td_loss(b, net.copy(), target, 0.99)
    perm = np.random.default_rng(0).permutation(len(b))
    shuffled = Batch(b.s[perm], b.a[perm], b.r[perm], b.s_next[perm])
    assert dt.td_loss(shuffled, net.copy(), target, 0.99).loss == pytest.approx(res.loss, rel=1e-12)
    nonzero = res.dout != 0
    assert (nonzero.sum(axis=1) == 1).all()
    assert (np.argmax(nonzero, axis=1) == 1 - b.a).all()


def test_td_loss_no_gradient_into_target():
    net, target = qnet.init_network(3), qnet.init_network(4)
    before = target.copy()
    res = dt.td_loss(_batch(2), net, target, 0.99)
    qnet.adam_step(net, qnet.backward(net, res.cache, res.dout), qnet.AdamState.for_network(net))
    assert target.equals(before)


def test_td_loss_empty():
    with pytest.raises(ValueError):
        dt.td_loss([], qnet.init_network(0), qnet.init_network(0), 0.9)


SMALL = dict(buffer_capacity=40, batch_size=32, update_interval=10, target_interval=3)


def test_train_counts_and_log(tmp_path):
    ds = small_dataset()
    res = dt.train(ds, HyperParams(maxiter=100, **SMALL), seed=0, log_path=tmp_path / "log.csv")
    assert res.grad_attempts == 10 and res.grad_steps == 7
    assert [r["loss"] is None for r in res.log] == [True] * 3 + [False] * 7
    assert res.epsilon == 0.999999**100
    assert res.target_syncs == 3 and res.sync_iterations == [30, 60, 90]
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,epsilon,loss,buffer_size,wall_ms" and len(lines) == 11
    assert lines[1].startswith("10,") and ",," in lines[1]


def test_target_tracks_theta_only_at_syncs():
    ds = small_dataset()
    hp = HyperParams(maxiter=60, buffer_capacity=8, batch_size=4, update_interval=2, target_interval=10)
    res = dt.train(ds, hp, seed=1)
    assert res.sync_iterations == [20, 40, 60]
    assert res.target.equals(res.net)
    hp = HyperParams(maxiter=50, buffer_capacity=8, batch_size=4, update_interval=2, target_interval=10)
    res = dt.train(ds, hp, seed=1)
    assert not res.target.equals(res.net)


def test_train_deterministic_and_checkpoints(tmp_path):
    ds = small_dataset()
    hp = HyperParams(maxiter=40, buffer_capacity=8, batch_size=4, update_interval=4, target_interval=3)
    a = dt.train(ds, hp, seed=5, checkpoint_path=tmp_path / "a.ckpt", checkpoint_every=16)
    b = dt.train(ds, hp, seed=5, checkpoint_path=tmp_path / "b.ckpt")
    assert a.checkpoints == [16, 32, 40] and b.checkpoints == [40]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    net, state, header = qnet.load_checkpoint(tmp_path / "a.ckpt")
    assert net.equals(a.net) and state.step == a.grad_steps
    assert header["seed"] == "5" and header["iteration"] == "40" and header["maxiter"] == "40"
    c = dt.train(ds, hp, seed=6)
    assert not c.net.equals(a.net)


def test_train_rejects_wrong_width():
    ds = tagged_dataset(2, 10)
    with pytest.raises(DatasetError):
        dt.train(ds, HyperParams(maxiter=10), seed=0)


def test_train_epsilon_monotone():
    ds = small_dataset()
    hp = HyperParams(maxiter=200, eps_decay=0.98, eps_min=0.1, buffer_capacity=64, batch_size=32, update_interval=5, target_interval=100)
    res = dt.train(ds, hp, seed=0)
    eps = [r["epsilon"] for r in res.log]
    assert all(a >= b for a, b in zip(eps, eps[1:])) and min(eps) >= 0.1 and res.epsilon == 0.1
