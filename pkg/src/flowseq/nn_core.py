"""Numpy implementation of the embedding -> 2x BiLSTM -> dense -> softmax model.

Everything is batched over a leading axis and carried out in float64. PAD
timesteps (index 0, always a left-contiguous prefix) are skipped by holding
the recurrent state, so each direction effectively processes only the real
tokens. Gate order inside the fused LSTM matrices is input, forget, cell,
output.
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .tokens import PAD

LOG_EPS = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 50
    hidden1: int = 64
    hidden2: int = 64
    dense_dim: int = 64
    window: int = 10


class ModelParams:
    """Named parameter arrays for the full model, in a fixed order."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            raise ValueError(f"parameter names {list(arrays)} != {list(expected)}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def save(self, path: str | os.PathLike) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
                 **self.arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelParams":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            config = ModelConfig(**meta["config"])
            arrays = {name: data[name].copy() for name in param_shapes(config)}
        return cls(config, arrays)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, h1, h2, d, v = cfg.embed_dim, cfg.hidden1, cfg.hidden2, cfg.dense_dim, cfg.vocab_size
    return {
        "embedding": (v, e),
        "lstm1_fwd.W": (e + h1, 4 * h1), "lstm1_fwd.b": (4 * h1,),
        "lstm1_bwd.W": (e + h1, 4 * h1), "lstm1_bwd.b": (4 * h1,),
        "lstm2_fwd.W": (2 * h1 + h2, 4 * h2), "lstm2_fwd.b": (4 * h2,),
        "lstm2_bwd.W": (2 * h1 + h2, 4 * h2), "lstm2_bwd.b": (4 * h2,),
        "dense_hidden.W": (2 * h2, d), "dense_hidden.b": (d,),
        "dense_out.W": (d, v), "dense_out.b": (v,),
    }


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("lstm"):
                h = shape[0] // 4
                b[h:2 * h] = 1.0
            arrays[name] = b
        else:
            # an embedding lookup is a one-hot product, so its fan-in is 1
            fan_in = 1 if name == "embedding" else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, arrays)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- LSTM ----

def lstm_forward(x, mask, W, b, reverse=False, activation="tanh"):
    """Run one LSTM direction over (B, T, D) inputs.

    Returns per-step outputs (B, T, H), zero where masked, the final hidden
    state (B, H) and a cache for :func:`lstm_backward`. ``activation`` is the
    function applied to the cell state to form the output, tanh or relu.
    """
    B, T, D = x.shape
    H = W.shape[1] // 4
    Wh = W[D:]
    # input projections for every timestep in one product
    xproj = (x.reshape(B * T, D) @ W[:D]).reshape(B, T, 4 * H) + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        m = mask[:, t][:, None]
        z = xproj[:, t] + h @ Wh
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        a = np.tanh(c_new) if activation == "tanh" else relu(c_new)
        h_new = o * a
        steps.append((t, m, h, i, f, g, o, c, c_new, a))
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
        out[:, t] = np.where(m, h_new, 0.0)
    return out, h, (steps, x, W, activation)


def lstm_backward(d_out, d_final, cache):
    """Gradients of one LSTM direction given upstream d_out (B,T,H) and d_final (B,H).

    Returns (dx, dW, db).
    """
    steps, x, W, activation = cache
    B, T, D = x.shape
    H = W.shape[1] // 4
    Wh = W[D:]
    dWh = np.zeros_like(Wh)
    dZ = np.zeros((B, T, 4 * H))
    dh = d_final.copy() if d_final is not None else np.zeros((B, H))
    dc = np.zeros((B, H))
    for t, m, h_prev, i, f, g, o, c_prev, c_new, a in reversed(steps):
        dh_new = np.where(m, dh + d_out[:, t], 0.0)
        if activation == "tanh":
            da_dc = 1.0 - a * a
        else:
            da_dc = (c_new > 0).astype(float)
        dc_new = np.where(m, dc, 0.0) + dh_new * o * da_dc
        dz = dZ[:, t]
        dz[:, :H] = dc_new * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc_new * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh_new * a * o * (1.0 - o)
        dWh += h_prev.T @ dz
        # masked rows pass their state gradient straight through
        dh = dz @ Wh.T + np.where(m, 0.0, dh)
        dc = dc_new * f + np.where(m, 0.0, dc)
    dZ2 = dZ.reshape(B * T, 4 * H)
    dWx = x.reshape(B * T, D).T @ dZ2
    dx = (dZ2 @ W[:D].T).reshape(B, T, D)
    return dx, np.concatenate([dWx, dWh]), dZ2.sum(axis=0)


def bilstm_forward(x, mask, fwd, bwd, activation="tanh"):
    """Both directions over the same inputs; (fwd_out, bwd_out, fwd_final, bwd_final, caches)."""
    out_f, fin_f, cache_f = lstm_forward(x, mask, *fwd, reverse=False, activation=activation)
    out_b, fin_b, cache_b = lstm_forward(x, mask, *bwd, reverse=True, activation=activation)
    return out_f, out_b, fin_f, fin_b, (cache_f, cache_b)


# --------------------------------------------------------------- model ----

@dataclass
class ForwardCache:
    params: ModelParams
    contexts: np.ndarray
    mask: np.ndarray
    l1: tuple
    l2: tuple
    z2: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


def pad_mask(contexts: np.ndarray) -> np.ndarray:
    return contexts != PAD


def forward(params: ModelParams, contexts, mask=None) -> tuple[np.ndarray, ForwardCache]:
    """Next-token distribution for each (10-token) context row.

    Layer 1 uses the usual tanh cell output; layer 2 rectifies its cell
    output (h = o * relu(c)). The dense stage reads the final hidden states
    of both layer-2 directions.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    V = params.config.vocab_size
    if contexts.size and (contexts.min() < 0 or contexts.max() >= V):
        raise IndexError(f"token index outside vocabulary of size {V}")
    if mask is None:
        mask = pad_mask(contexts)
    p = params.arrays
    x = p["embedding"][contexts]
    o1f, o1b, _, _, c1 = bilstm_forward(
        x, mask, (p["lstm1_fwd.W"], p["lstm1_fwd.b"]), (p["lstm1_bwd.W"], p["lstm1_bwd.b"]))
    y1 = np.concatenate([o1f, o1b], axis=2)
    _, _, f2, b2, c2 = bilstm_forward(
        y1, mask, (p["lstm2_fwd.W"], p["lstm2_fwd.b"]), (p["lstm2_bwd.W"], p["lstm2_bwd.b"]),
        activation="relu")
    z2 = np.concatenate([f2, b2], axis=1)
    pre = z2 @ p["dense_hidden.W"] + p["dense_hidden.b"]
    hidden = relu(pre)
    probs = softmax(hidden @ p["dense_out.W"] + p["dense_out.b"])
    return probs, ForwardCache(params, contexts, mask, c1, c2, z2, pre, hidden, probs)


def loss(probs, target: int, weight: float = 1.0) -> float:
    return float(-weight * np.log(probs[target] + LOG_EPS))


def batch_loss(probs: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Mean of per-example weighted cross-entropy."""
    pt = probs[np.arange(len(targets)), targets]
    w = np.ones(len(targets)) if weights is None else weights
    return float(np.mean(-w * np.log(pt + LOG_EPS)))


def backward(cache: ForwardCache, targets, weights=None) -> dict[str, np.ndarray]:
    """Gradients of :func:`batch_loss` with respect to every parameter."""
    p = cache.params.arrays
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    B = len(targets)
    w = np.ones(B) if weights is None else np.atleast_1d(np.asarray(weights, dtype=float))
    rows = np.arange(B)
    pt = cache.probs[rows, targets]
    # d/dlogits of -w*log(p_t + eps)
    scale = (w / B) * pt / (pt + LOG_EPS)
    dlogits = cache.probs * scale[:, None]
    dlogits[rows, targets] -= scale

    grads = {}
    grads["dense_out.W"] = cache.hidden.T @ dlogits
    grads["dense_out.b"] = dlogits.sum(axis=0)
    dpre = (dlogits @ p["dense_out.W"].T) * (cache.pre_hidden > 0)
    grads["dense_hidden.W"] = cache.z2.T @ dpre
    grads["dense_hidden.b"] = dpre.sum(axis=0)
    dz2 = dpre @ p["dense_hidden.W"].T

    H2 = cache.params.config.hidden2
    H1 = cache.params.config.hidden1
    Bt, T = cache.contexts.shape
    zeros2 = np.zeros((Bt, T, H2))
    c2f, c2b = cache.l2
    dy1_f, grads["lstm2_fwd.W"], grads["lstm2_fwd.b"] = lstm_backward(zeros2, dz2[:, :H2], c2f)
    dy1_b, grads["lstm2_bwd.W"], grads["lstm2_bwd.b"] = lstm_backward(zeros2, dz2[:, H2:], c2b)
    dy1 = dy1_f + dy1_b

    c1f, c1b = cache.l1
    dx_f, grads["lstm1_fwd.W"], grads["lstm1_fwd.b"] = lstm_backward(dy1[:, :, :H1], None, c1f)
    dx_b, grads["lstm1_bwd.W"], grads["lstm1_bwd.b"] = lstm_backward(dy1[:, :, H1:], None, c1b)
    dx = dx_f + dx_b

    demb = np.zeros_like(p["embedding"])
    m = cache.mask
    np.add.at(demb, cache.contexts[m], dx[m])
    grads["embedding"] = demb
    return {name: grads[name] for name in p}


# ---------------------------------------------------------------- Adam ----

@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moments plus step counters.

    Sparse (lazily updated) parameters keep one step counter per row so that
    bias correction only advances for rows that actually received gradient.
    """

    def __init__(self, params: ModelParams, sparse: tuple[str, ...] = ("embedding",)):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.sparse = sparse
        self.step = 0
        self.row_steps = {k: np.zeros(params[k].shape[0], dtype=np.int64) for k in sparse}


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper = AdamHyper()) -> tuple[ModelParams, AdamState]:
    """One in-place Adam update; lazy (row-sparse) for ``state.sparse`` parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2, lr, eps = hyper.beta1, hyper.beta2, hyper.lr, hyper.eps
    state.step += 1
    for name, g in grads.items():
        w, m, v = params.arrays[name], state.m[name], state.v[name]
        if name in state.sparse:
            rows = np.flatnonzero(np.any(g != 0, axis=tuple(range(1, g.ndim))))
            if rows.size == 0:
                continue
            gr = g[rows]
            m[rows] = b1 * m[rows] + (1 - b1) * gr
            v[rows] = b2 * v[rows] + (1 - b2) * gr * gr
            state.row_steps[name][rows] += 1
            t = state.row_steps[name][rows].astype(float).reshape((-1,) + (1,) * (g.ndim - 1))
            mhat = m[rows] / (1 - b1 ** t)
            vhat = v[rows] / (1 - b2 ** t)
            w[rows] -= lr * mhat / (np.sqrt(vhat) + eps)
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** state.step)
            vhat = v / (1 - b2 ** state.step)
            w -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state
