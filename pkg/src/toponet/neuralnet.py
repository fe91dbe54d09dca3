"""Minimal differentiable building blocks with hand-written backward passes.

Everything is float64 and batched along axis 0. Forward functions return an
output plus a cache; the matching backward takes the cache and the upstream
gradient, accumulates parameter gradients into the ``ParamStore`` and returns
the gradient with respect to the input.
"""
from __future__ import annotations

import json
import math

import numpy as np

from . import kernels
from .errors import DimensionError, UpdateError, ValidationError

CHECKPOINT_FORMAT = "topo-seq-ckpt-v1"
LOG_FLOOR = 1e-12


class ParamStore:
    """Named parameter blocks with paired gradients and Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name, value):
        if name in self.params:
            raise ValidationError(f"duplicate parameter block {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name, grad):
        self.grads[name] += grad

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        out = ParamStore()
        for k, p in self.params.items():
            out.add(k, p)
            out.m[k][...] = self.m[k]
            out.v[k][...] = self.v[k]
        out.t = self.t
        return out


def glorot(rng, shape, fan_in, fan_out):
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# dense


def init_dense(store, rng, name, n_in, n_out, gain=1.0):
    store.add(f"{name}.W", gain * glorot(rng, (n_in, n_out), n_in, n_out))
    store.add(f"{name}.b", np.zeros(n_out))


def dense_forward(store, name, x, activation=None):
    z = x @ store[f"{name}.W"] + store[f"{name}.b"]
    out = np.tanh(z) if activation == "tanh" else z
    return out, (name, x, out, activation)


def dense_backward(store, cache, dout):
    name, x, out, activation = cache
    if activation == "tanh":
        dout = dout * (1.0 - out * out)
    W = store[f"{name}.W"]
    store.accumulate(f"{name}.W", x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1]))
    store.accumulate(f"{name}.b", dout.reshape(-1, dout.shape[-1]).sum(axis=0))
    return dout @ W.T


# ---------------------------------------------------------------------------
# recurrent cells


def init_lstm(store, rng, name, input_dim, hidden_dim, peephole=True):
    H = hidden_dim
    store.add(f"{name}.W", glorot(rng, (input_dim, 4 * H), input_dim, H))
    store.add(f"{name}.U", glorot(rng, (H, 4 * H), H, H))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0  # forget gate starts open
    store.add(f"{name}.b", b)
    if peephole:
        store.add(f"{name}.p", np.zeros((3, H)))


def lstm_forward(store, name, x, peephole=True):
    """Peephole LSTM over x: (B, T, D) -> hidden states (B, T, H)."""
    if x.ndim != 3:
        raise DimensionError(f"LSTM input must be (batch, time, features), got {x.shape}")
    W, U, b = store[f"{name}.W"], store[f"{name}.U"], store[f"{name}.b"]
    if x.shape[2] != W.shape[0]:
        raise DimensionError(f"LSTM {name} expects {W.shape[0]} features, got {x.shape[2]}")
    if x.shape[1] < 1:
        raise DimensionError("LSTM needs at least one time step")
    B, T, _ = x.shape
    H = U.shape[0]
    p = store[f"{name}.p"] if peephole else np.zeros((3, H))
    xw = (x.transpose(1, 0, 2).reshape(T * B, -1) @ W).reshape(T, B, 4 * H) + b
    hs, cs, gates, tcs = kernels.lstm_seq_fwd(xw, U, p, peephole)
    return hs.transpose(1, 0, 2), ("lstm", name, x, (hs, cs, gates, tcs), peephole)


def lstm_backward(store, cache, dhs):
    _, name, x, (hs, cs, gates, tcs), peephole = cache
    W, U = store[f"{name}.W"], store[f"{name}.U"]
    B, T, D = x.shape
    H = U.shape[0]
    p = store[f"{name}.p"] if peephole else np.zeros((3, H))
    dhs = np.ascontiguousarray(dhs.transpose(1, 0, 2))
    da_all, dU, dp = kernels.lstm_seq_bwd(dhs, U, hs, cs, gates, tcs, p, peephole)
    flat = da_all.reshape(T * B, 4 * H)
    store.accumulate(f"{name}.W", x.transpose(1, 0, 2).reshape(T * B, D).T @ flat)
    store.accumulate(f"{name}.U", dU)
    store.accumulate(f"{name}.b", flat.sum(axis=0))
    if peephole:
        store.accumulate(f"{name}.p", dp)
    return (flat @ W.T).reshape(T, B, D).transpose(1, 0, 2)


def init_gru(store, rng, name, input_dim, hidden_dim):
    H = hidden_dim
    store.add(f"{name}.W", glorot(rng, (input_dim, 3 * H), input_dim, H))
    store.add(f"{name}.U", glorot(rng, (H, 3 * H), H, H))
    store.add(f"{name}.b", np.zeros(3 * H))


def gru_forward(store, name, x):
    """GRU (update z, reset r, candidate n applied to r*h) over (B, T, D)."""
    W, U, b = store[f"{name}.W"], store[f"{name}.U"], store[f"{name}.b"]
    if x.ndim != 3 or x.shape[2] != W.shape[0]:
        raise DimensionError(f"GRU {name} expects (batch, time, {W.shape[0]}), got {x.shape}")
    B, T, _ = x.shape
    H = U.shape[0]
    xw = (x.reshape(B * T, -1) @ W).reshape(B, T, 3 * H) + b
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    steps = []
    for t in range(T):
        zr = sigmoid(xw[:, t, : 2 * H] + h @ U[:, : 2 * H])
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        n = np.tanh(xw[:, t, 2 * H :] + rh @ U[:, 2 * H :])
        h_prev = h
        h = (1.0 - z) * n + z * h_prev
        hs[:, t] = h
        steps.append((h_prev, z, r, n, rh))
    return hs, ("gru", name, x, steps)


def gru_backward(store, cache, dhs):
    _, name, x, steps = cache
    W, U = store[f"{name}.W"], store[f"{name}.U"]
    B, T, D = x.shape
    H = U.shape[0]
    dh_next = np.zeros((B, H))
    da_all = np.empty((B, T, 3 * H))
    dU = np.zeros_like(U)
    for t in range(T - 1, -1, -1):
        h_prev, z, r, n, rh = steps[t]
        dh = dhs[:, t] + dh_next
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        drh = dan @ U[:, 2 * H :].T
        dU[:, 2 * H :] += rh.T @ dan
        dr = drh * h_prev
        dh_prev += drh * r
        dazr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        dU[:, : 2 * H] += h_prev.T @ dazr
        dh_prev += dazr @ U[:, : 2 * H].T
        da_all[:, t, : 2 * H] = dazr
        da_all[:, t, 2 * H :] = dan
        dh_next = dh_prev
    flat = da_all.reshape(B * T, 3 * H)
    store.accumulate(f"{name}.W", x.reshape(B * T, D).T @ flat)
    store.accumulate(f"{name}.U", dU)
    store.accumulate(f"{name}.b", flat.sum(axis=0))
    return (flat @ W.T).reshape(B, T, D)


def init_recurrent(store, rng, name, input_dim, hidden_dim, cell="lstm", bidirectional=False, peephole=True):
    dirs = ("fw", "bw") if bidirectional else ("fw",)
    for d in dirs:
        if cell == "lstm":
            init_lstm(store, rng, f"{name}.{d}", input_dim, hidden_dim, peephole)
        elif cell == "gru":
            init_gru(store, rng, f"{name}.{d}", input_dim, hidden_dim)
        else:
            raise ValidationError(f"unknown recurrent cell {cell!r}")


def recurrent_forward(store, name, x, cell="lstm", bidirectional=False, peephole=True):
    """Run one or two directions; bidirectional output concatenates along features."""

    def run(sub, seq):
        if cell == "lstm":
            return lstm_forward(store, sub, seq, peephole)
        return gru_forward(store, sub, seq)

    hs, cf = run(f"{name}.fw", x)
    if not bidirectional:
        return hs, (cf, None)
    hb, cb = run(f"{name}.bw", x[:, ::-1])
    return np.concatenate([hs, hb[:, ::-1]], axis=2), (cf, cb)


def recurrent_backward(store, cache, dhs):
    cf, cb = cache

    def back(c, d):
        return lstm_backward(store, c, d) if c[0] == "lstm" else gru_backward(store, c, d)

    if cb is None:
        return back(cf, dhs)
    H = dhs.shape[2] // 2
    dx = back(cf, np.ascontiguousarray(dhs[:, :, :H]))
    dx += back(cb, np.ascontiguousarray(dhs[:, ::-1, H:]))[:, ::-1]
    return dx


# ---------------------------------------------------------------------------
# soft attention over time steps


def init_attention(store, rng, name, hidden_dim):
    store.add(f"{name}.w", glorot(rng, (hidden_dim,), hidden_dim, 1))
    store.add(f"{name}.b", np.zeros(1))


def attention_forward(store, name, hs):
    """Scalar score tanh(w.h_t + b) per step, softmax over steps, weighted sum.

    Returns (context (B, H), weights (B, T), cache).
    """
    w, b = store[f"{name}.w"], store[f"{name}.b"]
    o = np.tanh(hs @ w + b[0])
    delta = softmax(o, axis=1)
    ctx = np.einsum("bt,bth->bh", delta, hs)
    return ctx, delta, (name, hs, o, delta)


def attention_backward(store, cache, dctx):
    name, hs, o, delta = cache
    w = store[f"{name}.w"]
    ddelta = np.einsum("bh,bth->bt", dctx, hs)
    ds = softmax_backward(delta, ddelta, axis=1) * (1.0 - o * o)
    store.accumulate(f"{name}.w", np.einsum("bt,bth->h", ds, hs))
    store.accumulate(f"{name}.b", np.array([ds.sum()]))
    return delta[:, :, None] * dctx[:, None, :] + ds[:, :, None] * w


# ---------------------------------------------------------------------------
# convolution / pooling


def init_conv(store, rng, name, c_in, c_out):
    store.add(f"{name}.K", glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
    store.add(f"{name}.b", np.zeros(c_out))


def conv_forward(store, name, x):
    out = np.tanh(kernels.conv3_fwd(x, store[f"{name}.K"], store[f"{name}.b"]))
    return out, (name, x, out)


def conv_backward(store, cache, dout):
    name, x, out = cache
    dz = np.ascontiguousarray(dout * (1.0 - out * out))
    dx, dk, db = kernels.conv3_bwd(x, store[f"{name}.K"], dz)
    store.accumulate(f"{name}.K", dk)
    store.accumulate(f"{name}.b", db)
    return dx


def avgpool2_forward(x):
    """2x2 mean pooling, stride 2; an odd trailing row/column is dropped."""
    H, W = x.shape[2], x.shape[3]
    h2, w2 = 2 * (H // 2), 2 * (W // 2)
    out = x[:, :, 0:h2:2, 0:w2:2] + x[:, :, 1:h2:2, 0:w2:2]
    out += x[:, :, 0:h2:2, 1:w2:2]
    out += x[:, :, 1:h2:2, 1:w2:2]
    out *= 0.25
    return out, x.shape


def avgpool2_backward(shape, dout):
    h2, w2 = 2 * dout.shape[2], 2 * dout.shape[3]
    dx = np.zeros(shape)
    q = 0.25 * dout
    dx[:, :, 0:h2:2, 0:w2:2] = q
    dx[:, :, 1:h2:2, 0:w2:2] = q
    dx[:, :, 0:h2:2, 1:w2:2] = q
    dx[:, :, 1:h2:2, 1:w2:2] = q
    return dx


# ---------------------------------------------------------------------------
# focal loss


def _check_distribution(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0.0) or np.any(probs > 1.0) or np.any(~np.isfinite(probs)):
        raise ValidationError("probabilities must lie in [0, 1]")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ValidationError("probabilities must sum to 1 (within 1e-6)")
    return probs


def focal_loss(probs, target, gamma=2.0, alpha=0.25):
    """-alpha * (1 - p_b)^gamma * log(p_b), p_b the target-class probability.

    Accepts a single distribution with an integer target, or a batch (B, k)
    with a target array; batched input returns per-sample losses.
    """
    probs = _check_distribution(probs)
    if probs.ndim == 1:
        pb = probs[int(target)]
    else:
        pb = probs[np.arange(len(probs)), np.asarray(target)]
    return -alpha * (1.0 - pb) ** gamma * np.log(np.maximum(pb, LOG_FLOOR))


def focal_loss_grad_logits(probs, target, gamma=2.0, alpha=0.25):
    """Gradient of the per-sample focal loss w.r.t. the logits feeding ``probs``."""
    B = len(probs)
    rows = np.arange(B)
    pb = probs[rows, target]
    q = 1.0 - pb
    safe = pb > LOG_FLOOR
    logp = np.log(np.maximum(pb, LOG_FLOOR))
    # (1 - p)^(gamma - 1) blows up at p = 1 when gamma < 1; its product with log p is 0 there
    with np.errstate(divide="ignore", invalid="ignore"):
        focus = np.where(q > 0.0, gamma * q ** (gamma - 1.0) * pb * logp, 0.0)
    # dL/dp * p, with the floor making log p constant below LOG_FLOOR
    dL_dp_p = alpha * (focus - np.where(safe, q**gamma, 0.0))
    onehot = np.zeros_like(probs)
    onehot[rows, target] = 1.0
    return dL_dp_p[:, None] * (onehot - probs)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(store: ParamStore, lr=0.001, beta1=0.9, beta2=0.99, eps=1e-8, t=None):
    """Bias-corrected Adam update of every block; increments ``store.t``."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise UpdateError(name)
    store.t = store.t + 1 if t is None else int(t)
    c1 = 1.0 - beta1**store.t
    c2 = 1.0 - beta2**store.t
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---------------------------------------------------------------------------
# finite-difference gradient check


def rel_error(a, b):
    """Block-level relative error ||a - b|| / (||a|| + ||b||), 0 when both vanish."""
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0.0 else float(num / den)


def numeric_grad(loss_fn, store, name, h=1e-4, indices=None):
    p = store[name]
    flat = p.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for k in idx:
        old = flat[k]
        flat[k] = old + h
        fp = loss_fn()
        flat[k] = old - h
        fm = loss_fn()
        flat[k] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out.reshape(p.shape)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(store: ParamStore, meta: dict | None = None) -> str:
    blocks = {
        k: {"shape": list(p.shape), "values": [float(x) for x in p.reshape(-1)]}
        for k, p in sorted(store.params.items())
    }
    doc = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "params": blocks}
    return json.dumps(doc, sort_keys=True)


def load_checkpoint(text: str):
    from .errors import ParseError

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid checkpoint at line {exc.lineno} column {exc.colno}: {exc.msg}", exc.pos
        ) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"checkpoint format tag must be {CHECKPOINT_FORMAT!r}")
    store = ParamStore()
    for name, blk in doc["params"].items():
        arr = np.array(blk["values"], dtype=np.float64)
        if arr.size != int(np.prod(blk["shape"], dtype=np.int64)):
            raise DimensionError(f"checkpoint block {name!r} has wrong value count")
        store.add(name, arr.reshape(blk["shape"]))
    return store, doc.get("meta", {})
