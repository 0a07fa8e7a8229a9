"""Deep Q-learning on chart datasets with experience replay and a frozen target network.

Each iteration draws a random (company, day), picks the previous and the
current action epsilon-greedily, stores one experience and decays epsilon.
Every ``B`` iterations one Adam step is taken on a minibatch sampled from the
replay buffer, and every ``B * C`` iterations the target network is synced.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import qnet
from .data_ingest import Dataset
from .errors import DatasetError, FormatError, TrainingDivergenceError

log = logging.getLogger(__name__)


class Action(IntEnum):
    """Index into the action-value vector."""

    LONG = 0
    NEUTRAL = 1
    SHORT = 2


ACTION_SCALARS = (1, 0, -1)


def action_to_scalar(action) -> int:
    return ACTION_SCALARS[Action(action)]


def scalar_to_index(a: int) -> int:
    return 1 - int(a)


# config-file name -> (HyperParams field, type)
CONFIG_KEYS = {
    "maxiter": ("maxiter", int),
    "learning_rate": ("learning_rate", float),
    "eps_min": ("eps_min", float),
    "W": ("w", int),
    "M": ("buffer_capacity", int),
    "B": ("update_interval", int),
    "C": ("target_interval", int),
    "P": ("penalty", float),
    "gamma": ("gamma", float),
    "batch_size": ("batch_size", int),
    "eps_decay": ("eps_decay", float),
}


@dataclass(frozen=True)
class HyperParams:
    maxiter: int = 5_000_000
    learning_rate: float = 1e-5
    eps_min: float = 0.1
    w: int = 32
    buffer_capacity: int = 1000
    update_interval: int = 10
    target_interval: int = 1000
    penalty: float = 0.05
    gamma: float = 0.99
    batch_size: int = 32
    eps_decay: float = 0.999999

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0 and f.name not in ("gamma", "penalty"):
                raise ValueError(f"{f.name} must be positive")
        if not 0 < self.eps_min <= 1:
            raise ValueError("eps_min must be in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")
        if not 0 < self.eps_decay <= 1:
            raise ValueError("eps_decay must be in (0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed the buffer capacity M")

    def to_config(self) -> dict:
        return {key: getattr(self, name) for key, (name, _) in CONFIG_KEYS.items()}


def parse_config(text: str, base: HyperParams | None = None) -> HyperParams:
    """Parse flat ``key=value`` lines. Blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise FormatError(f"config line {lineno}: expected key=value, got {raw!r}")
        if key not in CONFIG_KEYS:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        name, kind = CONFIG_KEYS[key]
        try:
            values[name] = kind(float(value)) if kind is int and "e" in value.lower() else kind(value)
        except ValueError:
            raise FormatError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    base = base or HyperParams()
    merged = {f.name: getattr(base, f.name) for f in fields(base)}
    merged.update(values)
    try:
        return HyperParams(**merged)
    except ValueError as exc:
        raise FormatError(f"invalid hyperparameters: {exc}") from None


def load_config(path) -> HyperParams:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(hp: HyperParams) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in hp.to_config().items())


# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Experience:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray

    def __post_init__(self):
        if self.a not in (1, 0, -1):
            raise ValueError(f"action must be +1, 0 or -1, got {self.a}")


@dataclass(frozen=True)
class Batch:
    s: np.ndarray  # (k, w, w)
    a: np.ndarray  # (k,) scalar actions
    r: np.ndarray
    s_next: np.ndarray

    @classmethod
    def of(cls, experiences) -> "Batch":
        experiences = list(experiences)
        return cls(
            s=np.stack([e.s for e in experiences]),
            a=np.array([e.a for e in experiences], dtype=np.int64),
            r=np.array([e.r for e in experiences], dtype=np.float64),
            s_next=np.stack([e.s_next for e in experiences]),
        )

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity FIFO of experiences backed by preallocated arrays."""

    def __init__(self, capacity: int, w: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._s = np.zeros((capacity, w, w), dtype=np.uint8)
        self._s_next = np.zeros((capacity, w, w), dtype=np.uint8)
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity, dtype=np.float64)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def append(self, e: Experience) -> None:
        slot = self.inserted % self.capacity
        self._s[slot] = e.s
        self._s_next[slot] = e.s_next
        self._a[slot] = e.a
        self._r[slot] = e.r
        self.inserted += 1

    def _slots(self):
        """Slots from oldest to newest."""
        n = len(self)
        start = self.inserted - n
        return (start + np.arange(n)) % self.capacity

    def __getitem__(self, i: int) -> Experience:
        n = len(self)
        if not -n <= i < n:
            raise IndexError(i)
        slot = self._slots()[i]
        return Experience(self._s[slot].copy(), int(self._a[slot]), float(self._r[slot]), self._s_next[slot].copy())

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def sample(self, k: int, rng) -> Batch:
        """``k`` distinct experiences chosen uniformly."""
        if k > len(self):
            raise ValueError(f"cannot sample {k} experiences from a buffer of {len(self)}")
        slots = self._slots()[rng.choice(len(self), size=k, replace=False)]
        return Batch(self._s[slots], self._a[slots], self._r[slots], self._s_next[slots])


# ---------------------------------------------------------------------------

def compute_reward(a_t: int, a_prev: int, l: float, p: float) -> float:
    return a_t * l - p * abs(a_t - a_prev)


def greedy_scalar(rho) -> int:
    return ACTION_SCALARS[int(np.argmax(rho))]


def epsilon_greedy(rho, eps: float, rng) -> int:
    """Uniform random action with probability ``eps``, else the argmax of ``rho``."""
    return _behaviour(lambda: rho, eps, rng)


def _behaviour(values_fn, eps, rng):
    if rng.random() < eps:
        return ACTION_SCALARS[int(rng.integers(3))]
    return greedy_scalar(values_fn())


def decay_epsilon(eps: float, hp: HyperParams) -> float:
    return max(hp.eps_min, eps * hp.eps_decay) if eps > hp.eps_min else eps


def epsilon_after(n: int, hp: HyperParams) -> float:
    """Epsilon after ``n`` decays starting from 1, in closed form."""
    return max(hp.eps_min, hp.eps_decay**n)


def generate_experience(ds: Dataset, net, eps: float, hp: HyperParams, rng) -> Experience:
    if ds.n_samples == 0:
        raise DatasetError("dataset has no valid (company, day) samples")
    c, i = ds.locate(int(rng.integers(ds.n_samples)))
    c, i = int(c), int(i)
    prev_state, state = ds.chart(c, i, -1), ds.chart(c, i)
    cache = {}

    def values():
        # both states go through the network together the first time either is needed
        if "rho" not in cache:
            cache["rho"] = qnet.forward(net, np.stack([prev_state, state]), "eval")
        return cache["rho"]

    a_prev = _behaviour(lambda: values()[0], eps, rng)
    a_t = _behaviour(lambda: values()[1], eps, rng)
    r = compute_reward(a_t, a_prev, float(ds.returns[c][i]), hp.penalty)
    return Experience(s=state, a=a_t, r=r, s_next=ds.chart(c, i, +1))


@dataclass
class TDResult:
    loss: float
    dout: np.ndarray  # d loss / d rho, (k, 3)
    cache: object
    q_taken: np.ndarray
    targets: np.ndarray


def td_loss(batch, net_theta, net_target, gamma: float) -> TDResult:
    """Mean squared Bellman error with targets from the frozen network."""
    if not isinstance(batch, Batch):
        batch = Batch.of(batch)
    k = len(batch)
    if k == 0:
        raise ValueError("empty batch")
    target_q = qnet.forward(net_target, batch.s_next, "eval")
    targets = batch.r + gamma * target_q.max(axis=1)
    q, cache = qnet.forward_cached(net_theta, batch.s, "train")
    idx = 1 - batch.a
    q_taken = q[np.arange(k), idx]
    diff = q_taken - targets
    dout = np.zeros_like(q)
    dout[np.arange(k), idx] = 2.0 * diff / k
    return TDResult(loss=float(np.mean(diff * diff)), dout=dout, cache=cache, q_taken=q_taken, targets=targets)


# ---------------------------------------------------------------------------

LOG_COLUMNS = ("iteration", "epsilon", "loss", "buffer_size", "wall_ms")


@dataclass
class TrainResult:
    net: qnet.Network
    adam: qnet.AdamState
    target: qnet.Network
    iterations: int
    epsilon: float
    grad_attempts: int
    grad_steps: int
    target_syncs: int
    sync_iterations: list = field(default_factory=list)
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def checkpoint_header(hp: HyperParams, seed: int, iteration: int) -> dict:
    header = {k: repr(v) for k, v in hp.to_config().items()}
    header["seed"] = str(seed)
    header["iteration"] = str(iteration)
    return header


def train(
    ds: Dataset,
    hp: HyperParams,
    seed: int,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 100_000,
    log_every: int = 1,
    on_log=None,
) -> TrainResult:
    """Run ``hp.maxiter`` iterations of the training loop.

    ``log_every`` counts gradient-step attempts between log records;
    ``on_log`` receives every record. Checkpoints (if ``checkpoint_path`` is
    set) are written every ``checkpoint_every`` iterations and at the end.
    """
    if ds.w != hp.w:
        raise DatasetError(f"dataset charts are {ds.w} wide but W={hp.w}")
    if ds.n_samples == 0:
        raise DatasetError("dataset has no valid (company, day) samples")
    rng = np.random.default_rng([seed, 1])
    net = qnet.init_network(seed)
    target = net.copy()
    adam = qnet.AdamState.for_network(net, learning_rate=hp.learning_rate)
    buf = ReplayBuffer(hp.buffer_capacity, hp.w)
    eps, decays = 1.0, 0
    sync_every = hp.update_interval * hp.target_interval
    result = TrainResult(net, adam, target, 0, eps, 0, 0, 0)
    t0 = time.perf_counter()
    log_fh = writer = None
    if log_path is not None:
        log_fh = Path(log_path).open("w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    last_checkpoint = None

    def save(iteration):
        nonlocal last_checkpoint
        qnet.save_checkpoint(net, adam, checkpoint_path, checkpoint_header(hp, seed, iteration))
        last_checkpoint = str(checkpoint_path)
        result.checkpoints.append(iteration)

    try:
        for b in range(1, hp.maxiter + 1):
            buf.append(generate_experience(ds, net, eps, hp, rng))
            if eps > hp.eps_min:
                decays += 1
                eps = epsilon_after(decays, hp)
            if b % hp.update_interval == 0:
                result.grad_attempts += 1
                loss = None
                if len(buf) >= hp.batch_size:
                    td = td_loss(buf.sample(hp.batch_size, rng), net, target, hp.gamma)
                    if not np.isfinite(td.loss):
                        raise TrainingDivergenceError(f"non-finite loss at iteration {b}", last_checkpoint)
                    grads = qnet.backward(net, td.cache, td.dout)
                    try:
                        qnet.adam_step(net, grads, adam)
                    except TrainingDivergenceError as exc:
                        raise TrainingDivergenceError(f"{exc} (iteration {b})", last_checkpoint) from None
                    result.grad_steps += 1
                    loss = td.loss
                if result.grad_attempts % log_every == 0:
                    record = {
                        "iteration": b,
                        "epsilon": eps,
                        "loss": loss,
                        "buffer_size": len(buf),
                        "wall_ms": int((time.perf_counter() - t0) * 1000),
                    }
                    result.log.append(record)
                    if writer is not None:
                        writer.writerow(["" if record[k] is None else record[k] for k in LOG_COLUMNS])
                    if on_log is not None:
                        on_log(record)
            if b % sync_every == 0:
                target.load_from(net)
                result.target_syncs += 1
                result.sync_iterations.append(b)
            if checkpoint_path is not None and b % checkpoint_every == 0 and b != hp.maxiter:
                save(b)
        result.iterations = hp.maxiter
        result.epsilon = eps
        if checkpoint_path is not None:
            save(hp.maxiter)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
