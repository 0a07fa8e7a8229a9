"""Convolutional Q-network over 32x32 binary charts.

Layer stack (all float64)::

    conv 16@5x5 -> BN -> ReLU
    conv 16@5x5 -> BN -> ReLU -> maxpool 2x2
    conv 32@5x5 -> BN -> ReLU
    conv 32@5x5 -> BN -> ReLU -> maxpool 2x2
    fc 2048->32 -> BN -> ReLU
    fc 32->3

The output is the action-value vector ``rho`` ordered [long, neutral, short].

Convolutions use "same" zero padding and are evaluated in the frequency
domain on a 36x36 grid, which is large enough that the circular transforms
reproduce the linear correlation exactly (up to rounding). The backward
pass reuses the cached input spectra.
"""
from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import FormatError, ShapeError, StaleCacheError, TrainingDivergenceError, UnsupportedVersionError

INPUT_SIZE = 32
N_ACTIONS = 3
KERNEL = 5
PAD = KERNEL // 2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

# (name, in_channels, out_channels, pool_after)
CONV_LAYERS = (
    ("conv1", 1, 16, False),
    ("conv2", 16, 16, True),
    ("conv3", 16, 32, False),
    ("conv4", 32, 32, True),
)
FC_LAYERS = (("fc1", 2048, 32), ("fc2", 32, N_ACTIONS))

PARAM_ORDER = []
for _name, _cin, _cout, _ in CONV_LAYERS:
    PARAM_ORDER += [f"{_name}.w", f"{_name}.b", f"{_name}.gamma", f"{_name}.beta"]
PARAM_ORDER += ["fc1.w", "fc1.b", "fc1.gamma", "fc1.beta", "fc2.w", "fc2.b"]
PARAM_ORDER = tuple(PARAM_ORDER)
BUFFER_ORDER = tuple(
    f"{name}.{stat}" for name in ("conv1", "conv2", "conv3", "conv4", "fc1") for stat in ("mean", "var")
)


def _param_shapes():
    shapes = {}
    for name, cin, cout, _ in CONV_LAYERS:
        shapes[f"{name}.w"] = (cout, cin, KERNEL, KERNEL)
        for p in ("b", "gamma", "beta"):
            shapes[f"{name}.{p}"] = (cout,)
    shapes["fc1.w"] = (2048, 32)
    for p in ("b", "gamma", "beta"):
        shapes[f"fc1.{p}"] = (32,)
    shapes["fc2.w"] = (32, N_ACTIONS)
    shapes["fc2.b"] = (N_ACTIONS,)
    return shapes


PARAM_SHAPES = _param_shapes()


def xavier_bound(name: str) -> float:
    """Glorot-uniform bound sqrt(6 / (fan_in + fan_out)) for a weight tensor."""
    shape = PARAM_SHAPES[name]
    if len(shape) == 4:
        cout, cin, kh, kw = shape
        fan_in, fan_out = cin * kh * kw, cout * kh * kw
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class Network:
    params: dict
    buffers: dict
    version: int = 0

    def copy(self) -> "Network":
        return Network(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            version=self.version,
        )

    def load_from(self, other: "Network") -> None:
        """Overwrite parameters and running statistics with those of ``other``."""
        for k in PARAM_ORDER:
            self.params[k][...] = other.params[k]
        for k in BUFFER_ORDER:
            self.buffers[k][...] = other.buffers[k]
        self.version += 1

    def equals(self, other: "Network") -> bool:
        return all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_ORDER) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in BUFFER_ORDER
        )


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, learning_rate=1e-5, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        return cls(
            m={k: np.zeros_like(p) for k, p in net.params.items()},
            v={k: np.zeros_like(p) for k, p in net.params.items()},
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            eps_hat=eps_hat,
        )

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class ActionValues:
    rho: np.ndarray
    eta: np.ndarray

    @classmethod
    def from_rho(cls, rho) -> "ActionValues":
        rho = np.asarray(rho, dtype=np.float64)
        eta = np.zeros(N_ACTIONS, dtype=np.int64)
        eta[int(np.argmax(rho))] = 1  # argmax returns the first maximum
        return cls(rho=rho, eta=eta)


def init_network(seed: int) -> Network:
    rng = np.random.default_rng(seed)
    params = {}
    for name in PARAM_ORDER:
        shape = PARAM_SHAPES[name]
        if name.endswith(".w"):
            bound = xavier_bound(name)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {}
    for name in BUFFER_ORDER:
        shape = PARAM_SHAPES[name.rsplit(".", 1)[0] + ".b"]
        buffers[name] = np.zeros(shape) if name.endswith(".mean") else np.ones(shape)
    return Network(params=params, buffers=buffers)


# ---------------------------------------------------------------------------
# Internally activations are laid out spatial-first, (H, W, N, C), so that the
# 2-D transforms over the leading axes hand back spectra already shaped for a
# batched matmul over channels.

def _fft_size(h):
    return h + KERNEL - 1


def _spectrum(x, size):
    return sfft.rfft2(x, s=(size, size), axes=(0, 1))


def _inverse(xf, size):
    return sfft.irfft2(xf, s=(size, size), axes=(0, 1))


def _kernel_spectrum(w, size):
    """Spectrum of an (F, C, k, k) kernel as (size, size//2+1, C, F)."""
    return _spectrum(w.transpose(2, 3, 1, 0), size)


def _conv_forward(xf, wf, h, size):
    """Same-padded cross-correlation from input and kernel spectra."""
    full = _inverse(xf @ np.conj(wf), size)
    idx = (np.arange(h) - PAD) % size
    return full[idx][:, idx]


def _conv_backward(xf, wf, dout, size, need_dx=True):
    h = dout.shape[0]
    df = _spectrum(dout, size)  # (.., .., N, F)
    cross = np.conj(df).swapaxes(-1, -2) @ xf  # (.., .., F, C)
    lags = np.arange(-PAD, PAD + 1) % size
    dw = _inverse(cross, size)[lags][:, lags].transpose(2, 3, 0, 1)
    dx = None
    if need_dx:
        dx = _inverse(df @ wf.swapaxes(-1, -2), size)[PAD : PAD + h, PAD : PAD + h]
    return dx, dw


def conv2d_same_direct(x, w):
    """Reference "same" correlation on NCHW input by explicit kernel offsets (slow, for tests)."""
    n, c, h, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    out = np.zeros((n, w.shape[0], h, h))
    for i in range(KERNEL):
        for j in range(KERNEL):
            out += np.einsum("nchw,fc->nfhw", xp[:, :, i : i + h, j : j + h], w[:, :, i, j])
    return out


def conv2d_same(x, w):
    """FFT "same" correlation on NCHW input, the path used by the network."""
    h = x.shape[-1]
    size = _fft_size(h)
    out = _conv_forward(_spectrum(x.transpose(2, 3, 0, 1), size), _kernel_spectrum(w, size), h, size)
    return out.transpose(2, 3, 0, 1)


# ---------------------------------------------------------------------------
# batch normalisation (channel axis last), pooling

def _bn_forward(z, gamma, beta, mean, var, train):
    """Normalise over every axis but the last (the channel axis)."""
    shape = z.shape
    z2 = z.reshape(-1, shape[-1])
    if train:
        ones = np.full(z2.shape[0], 1.0 / z2.shape[0])
        mu = ones @ z2
        centered = z2 - mu
        sigma2 = ones @ (centered * centered)
        mean *= BN_MOMENTUM
        mean += (1 - BN_MOMENTUM) * mu
        var *= BN_MOMENTUM
        var += (1 - BN_MOMENTUM) * sigma2
    else:
        centered = z2 - mean
        sigma2 = var
    inv_std = 1.0 / np.sqrt(sigma2 + BN_EPS)
    xhat = centered * inv_std
    return (xhat * gamma + beta).reshape(shape), (xhat, inv_std, train)


def _bn_backward(dy, gamma, cache):
    xhat, inv_std, batch_stats = cache
    shape = dy.shape
    dy2 = dy.reshape(-1, shape[-1])
    ones = np.ones(dy2.shape[0])
    dgamma = np.einsum("ij,ij->j", dy2, xhat)
    dbeta = ones @ dy2
    if batch_stats:
        m = dy2.shape[0]
        # d/dz of gamma * xhat, with xhat depending on the batch mean and variance
        dx = (gamma * inv_std) * (dy2 - (dbeta / m) - xhat * (dgamma / m))
    else:
        dx = dy2 * (gamma * inv_std)
    return dx.reshape(shape), dgamma, dbeta


def _pool_forward(x):
    h, w, n, c = x.shape
    blocks = x.reshape(h // 2, 2, w // 2, 2, n, c).transpose(0, 2, 4, 5, 1, 3).reshape(h // 2, w // 2, n, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx):
    h2, w2, n, c = dout.shape
    blocks = np.zeros((h2, w2, n, c, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(h2, w2, n, c, 2, 2).transpose(0, 4, 1, 5, 2, 3).reshape(h2 * 2, w2 * 2, n, c)


# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    version: int
    batch_stats: bool
    layers: list = field(default_factory=list)
    used: bool = False


def as_batch(charts) -> np.ndarray:
    """Coerce a chart, a stack of charts or an NCHW array into (N, 1, 32, 32) float64."""
    if hasattr(charts, "pixels"):
        charts = charts.pixels
    x = np.asarray(charts, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"expected charts of shape (N, 1, {INPUT_SIZE}, {INPUT_SIZE}), got {np.shape(charts)}")
    return x


def _run(net: Network, x, mode: str, keep_cache: bool):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    p, b = net.params, net.buffers
    cache = ForwardCache(version=net.version, batch_stats=train) if keep_cache else None
    n = x.shape[0]
    h = x.transpose(2, 3, 0, 1)
    for name, _cin, _cout, pool in CONV_LAYERS:
        side = h.shape[0]
        size = _fft_size(side)
        xf = _spectrum(h, size)
        wf = _kernel_spectrum(p[f"{name}.w"], size)
        z = _conv_forward(xf, wf, side, size) + p[f"{name}.b"]
        y, bn_cache = _bn_forward(
            z, p[f"{name}.gamma"], p[f"{name}.beta"], b[f"{name}.mean"], b[f"{name}.var"], train
        )
        mask = y > 0
        h = y * mask
        pool_idx = None
        if pool:
            h, pool_idx = _pool_forward(h)
        if keep_cache:
            cache.layers.append((xf, wf, size, bn_cache, mask, pool_idx))
    pooled_shape = h.shape
    flat = h.transpose(2, 3, 0, 1).reshape(n, -1)  # (N, C*H*W)
    z = flat @ p["fc1.w"] + p["fc1.b"]
    y, bn_cache = _bn_forward(z, p["fc1.gamma"], p["fc1.beta"], b["fc1.mean"], b["fc1.var"], train)
    mask = y > 0
    hid = y * mask
    out = hid @ p["fc2.w"] + p["fc2.b"]
    if keep_cache:
        cache.layers.append((flat, bn_cache, mask, hid, pooled_shape))
    return out, cache


def forward(net: Network, charts, mode: str = "eval") -> np.ndarray:
    """Action values for a batch of charts, shape (N, 3).

    Eval mode normalises with the running statistics and does not touch the
    network. Train mode normalises with batch statistics and updates the
    running statistics in place.
    """
    out, _ = _run(net, as_batch(charts), mode, keep_cache=False)
    return out


def forward_cached(net: Network, charts, mode: str = "train"):
    """Like :func:`forward` but also returns the activations needed by :func:`backward`.

    With ``mode="eval"`` the normalisation statistics are treated as
    constants in the backward pass.
    """
    return _run(net, as_batch(charts), mode, keep_cache=True)


def action_values(net: Network, chart) -> ActionValues:
    return ActionValues.from_rho(forward(net, chart, "eval")[0])


def backward(net: Network, cache: ForwardCache, dout) -> dict:
    """Gradients of every parameter given d(loss)/d(output)."""
    if cache is None or cache.used or cache.version != net.version:
        raise StaleCacheError("forward cache does not match the current network parameters")
    cache.used = True
    p = net.params
    dout = np.asarray(dout, dtype=np.float64)
    grads = {}
    flat, bn_cache, mask, hid, pooled_shape = cache.layers[-1]
    grads["fc2.w"] = hid.T @ dout
    grads["fc2.b"] = dout.sum(axis=0)
    dh = (dout @ p["fc2.w"].T) * mask
    dz, grads["fc1.gamma"], grads["fc1.beta"] = _bn_backward(dh, p["fc1.gamma"], bn_cache)
    grads["fc1.w"] = flat.T @ dz
    grads["fc1.b"] = dz.sum(axis=0)
    hh, ww, n, c = pooled_shape
    dh = (dz @ p["fc1.w"].T).reshape(n, c, hh, ww).transpose(2, 3, 0, 1)
    for layer_no in range(len(CONV_LAYERS) - 1, -1, -1):
        name, _cin, _cout, pool = CONV_LAYERS[layer_no]
        xf, wf, size, bn_cache, mask, pool_idx = cache.layers[layer_no]
        if pool:
            dh = _pool_backward(dh, pool_idx)
        dh = dh * mask
        dz, grads[f"{name}.gamma"], grads[f"{name}.beta"] = _bn_backward(dh, p[f"{name}.gamma"], bn_cache)
        grads[f"{name}.b"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        dh, grads[f"{name}.w"] = _conv_backward(xf, wf, dz, size, need_dx=layer_no > 0)
    return {k: grads[k] for k in PARAM_ORDER}


def adam_step(net: Network, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(net, state)``."""
    for k in PARAM_ORDER:
        g = grads[k]
        if g.shape != net.params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {net.params[k].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDivergenceError(f"{bad} non-finite gradient entries in {k} at Adam step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k in PARAM_ORDER:
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        net.params[k] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    net.version += 1
    return net, state


# ---------------------------------------------------------------------------
# checkpoint format:
#   b"CDQN" | u32 version | u32 header length | header (UTF-8 key=value lines)
#   | u64 adam step | f64 lr, beta1, beta2, eps_hat
#   | tensors: params, buffers, adam m, adam v  (each: u32 ndim, u32 dims..., f64 data)
# all little-endian

MAGIC = b"CDQN"
FORMAT_VERSION = 1


def _write_tensor(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("checkpoint is truncated")
    return data


def _read_tensor(fh, expected_shape, name):
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    if tuple(shape) != tuple(expected_shape):
        raise FormatError(f"tensor {name} has shape {shape}, expected {expected_shape}")
    count = int(np.prod(shape))
    return np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_bytes(net: Network, state: AdamState, header: dict | None = None) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    text = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    fh.write(struct.pack("<I", len(text)))
    fh.write(text)
    fh.write(struct.pack("<Q", state.step))
    fh.write(struct.pack("<4d", state.learning_rate, state.beta1, state.beta2, state.eps_hat))
    for k in PARAM_ORDER:
        _write_tensor(fh, net.params[k])
    for k in BUFFER_ORDER:
        _write_tensor(fh, net.buffers[k])
    for k in PARAM_ORDER:
        _write_tensor(fh, state.m[k])
    for k in PARAM_ORDER:
        _write_tensor(fh, state.v[k])
    return fh.getvalue()


def save_checkpoint(net: Network, state: AdamState, path, header: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net, state, header))
    tmp.replace(path)


def parse_checkpoint(data: bytes):
    """Decode checkpoint bytes into ``(net, state, header)``."""
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        text = _read_exact(fh, hlen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint header is not UTF-8") from exc
    header = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad checkpoint header line {line!r}")
        header[key] = value
    (step,) = struct.unpack("<Q", _read_exact(fh, 8))
    lr, b1, b2, eps = struct.unpack("<4d", _read_exact(fh, 32))
    params = {k: _read_tensor(fh, PARAM_SHAPES[k], k) for k in PARAM_ORDER}
    buffers = {k: _read_tensor(fh, PARAM_SHAPES[k.rsplit(".", 1)[0] + ".b"], k) for k in BUFFER_ORDER}
    m = {k: _read_tensor(fh, PARAM_SHAPES[k], k) for k in PARAM_ORDER}
    v = {k: _read_tensor(fh, PARAM_SHAPES[k], k) for k in PARAM_ORDER}
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    net = Network(params=params, buffers=buffers)
    state = AdamState(m=m, v=v, step=step, learning_rate=lr, beta1=b1, beta2=b2, eps_hat=eps)
    return net, state, header


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`. Returns ``(net, state, header)``."""
    return parse_checkpoint(Path(path).read_bytes())
