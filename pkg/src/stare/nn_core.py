"""Double-precision kernels with hand-written backward passes.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the cache and the upstream gradient.  Parameter gradients are added into a
``grads`` dict keyed like the parameter dict, so shared weights accumulate.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
NEG_BIG = -1e30


class NumericError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def check_finite(name: str, a) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")


# ------------------------------------------------------------------ elementwise

def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise NumericError("NaN input to softmax")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(cache, dout):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du)


def relu(x):
    return np.maximum(x, 0.0), x


def relu_backward(cache, dout):
    return dout * (cache > 0)


ACTIVATIONS = {"gelu": (gelu, gelu_backward), "relu": (relu, relu_backward)}


# --------------------------------------------------------------------- layers

def linear(x, W, b=None):
    y = x @ W
    if b is not None:
        y = y + b
    return y, x


def linear_backward(x, dout, W, grads: dict, wname: str, bname: str | None = None):
    d = W.shape[0]
    x2 = x.reshape(-1, d)
    g2 = dout.reshape(-1, W.shape[1])
    grads[wname] += x2.T @ g2
    if bname is not None:
        grads[bname] += g2.sum(axis=0)
    return dout @ W.T


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(cache, dout, grads: dict, gname: str, bname: str):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    grads[gname] += (dout * xhat).reshape(-1, d).sum(axis=0)
    grads[bname] += dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def embedding(table, ids):
    return table[ids], ids


def embedding_backward(ids, dout, grads: dict, name: str):
    g = grads[name]
    np.add.at(g, ids.reshape(-1), dout.reshape(-1, g.shape[1]))


# ------------------------------------------------------------------ attention

@dataclass
class AttentionDiagnostics:
    fully_masked_rows: int = 0


def attention(Q, K, V, mask=None, scale: float | None = None,
              diagnostics: AttentionDiagnostics | None = None):
    """Scaled dot-product attention over the last two axes.

    Q: (..., Lq, d), K and V: (..., Lk, d), mask: (..., Lk) booleans marking
    valid keys (broadcast over queries).  Masked keys get exactly zero weight;
    a query with no valid key yields a zero row.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[-1])
    S = (Q @ np.swapaxes(K, -1, -2)) * scale
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[..., None, :]
        S = np.where(m, S, NEG_BIG)
        A = softmax(S, axis=-1)
        A = np.where(m, A, 0.0)
        empty = ~m.any(axis=-1, keepdims=True)
        if np.any(empty):
            n = int(np.broadcast_to(empty, A.shape[:-1] + (1,)).sum())
            log.debug("attention: %d fully masked query rows", n)
            if diagnostics is not None:
                diagnostics.fully_masked_rows += n
            A = np.where(empty, 0.0, A)
    else:
        A = softmax(S, axis=-1)
    out = A @ V
    return out, (Q, K, V, A, scale)


def attention_backward(cache, dout):
    Q, K, V, A, scale = cache
    dV = np.swapaxes(A, -1, -2) @ dout
    dA = dout @ np.swapaxes(V, -1, -2)
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
    dS = dS * scale
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    return dQ, dK, dV


def attention_weights(Q, K, mask=None, scale=None) -> np.ndarray:
    """The (..., Lq, Lk) weight matrix used by :func:`attention`."""
    V = np.zeros(K.shape[:-1] + (1,))
    return attention(Q, K, V, mask, scale)[1][3]


def _split_heads(x, h):
    *lead, L, d = x.shape
    return np.swapaxes(x.reshape(*lead, L, h, d // h), -2, -3)


def _merge_heads(x):
    *lead, h, L, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, L, h * dh)


def mha(params, prefix: str, xq, xkv, mask, n_heads: int, out_proj: bool = True,
        scale: float | None = None):
    """Multi-head attention: project xq to queries and xkv to keys/values,
    attend per head, concatenate heads, optionally project with ``wo``."""
    d = xq.shape[-1]
    if d % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide d={d}")
    q = xq @ params[prefix + "wq"]
    k = xkv @ params[prefix + "wk"]
    v = xkv @ params[prefix + "wv"]
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    if scale is None:
        scale = 1.0 / math.sqrt(d // n_heads)
    m = None if mask is None else np.asarray(mask, bool)[..., None, :]
    oh, acache = attention(qh, kh, vh, m, scale)
    o = _merge_heads(oh)
    y = o @ params[prefix + "wo"] if out_proj else o
    return y, (xq, xkv, o, acache, n_heads, out_proj)


def mha_backward(params, prefix: str, cache, dy, grads: dict):
    xq, xkv, o, acache, h, out_proj = cache
    if out_proj:
        do = linear_backward(o, dy, params[prefix + "wo"], grads, prefix + "wo")
    else:
        do = dy
    dqh, dkh, dvh = attention_backward(acache, _split_heads(do, h))
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dxq = linear_backward(xq, dq, params[prefix + "wq"], grads, prefix + "wq")
    dxkv = linear_backward(xkv, dk, params[prefix + "wk"], grads, prefix + "wk")
    dxkv = dxkv + linear_backward(xkv, dv, params[prefix + "wv"], grads, prefix + "wv")
    return dxq, dxkv


# --------------------------------------------------------------------- losses

PROB_FLOOR = 1e-12


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-math.log(max(probs[label], PROB_FLOOR)))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels, with gradient."""
    labels = np.asarray(labels)
    n, J = logits.shape
    if np.any((labels < 0) | (labels >= J)):
        raise IndexError("label out of range")
    p = softmax(logits, axis=-1)
    pl = p[np.arange(n), labels]
    loss = float(np.mean(-np.log(np.maximum(pl, PROB_FLOOR))))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    g[pl < PROB_FLOOR] = 0.0
    return loss, g / n


def binary_cross_entropy_logits(logits, targets):
    """Mean cross-entropy of the two-class softmax [0, logit] (= sigmoid)."""
    p = sigmoid(logits)
    t = np.asarray(targets, dtype=np.float64)
    pl = np.where(t > 0.5, p, 1.0 - p)
    loss = float(np.mean(-np.log(np.maximum(pl, PROB_FLOOR))))
    g = np.where(pl < PROB_FLOOR, 0.0, p - t)
    return loss, g / len(t)


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_with_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ----------------------------------------------------------------- parameters

@dataclass
class Parameters:
    """Named tensors plus Adam moments and the shared step count."""

    tensors: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, t in self.tensors.items():
            self.m.setdefault(k, np.zeros_like(t))
            self.v.setdefault(k, np.zeros_like(t))

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def keys(self):
        return self.tensors.keys()

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(t) for k, t in self.tensors.items()}

    def count(self, prefix: str = "") -> int:
        return int(sum(t.size for k, t in self.tensors.items() if k.startswith(prefix)))

    def copy(self) -> "Parameters":
        return Parameters(
            {k: t.copy() for k, t in self.tensors.items()},
            {k: t.copy() for k, t in self.m.items()},
            {k: t.copy() for k, t in self.v.items()},
            self.step,
        )


def adam_step(p: Parameters, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              frozen: tuple[str, ...] = ()) -> Parameters:
    """One bias-corrected Adam update, in place; returns ``p``.

    Names starting with any prefix in ``frozen`` are left untouched.
    """
    for k, g in grads.items():
        if g.shape != p.tensors[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.tensors[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    p.step += 1
    bc1 = 1.0 - beta1**p.step
    bc2 = 1.0 - beta2**p.step
    for k in sorted(grads):
        if frozen and k.startswith(frozen):
            continue
        g = grads[k]
        m, v = p.m[k], p.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.tensors[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return p


# ---------------------------------------------------------------- grad check

def grad_check(f: Callable[[], tuple[float, dict]], params: dict[str, np.ndarray],
               eps: float = 1e-5, n_coords: int = 64, seed: int = 0,
               names: list[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f()`` evaluates the loss at the current contents of ``params`` and returns
    ``(loss, grads)``.  Coordinates are drawn uniformly from all tensors (or
    ``names``); every coordinate is used when there are fewer than ``n_coords``.
    """
    _, grads = f()
    grads = {k: np.array(g, copy=True) for k, g in grads.items()}
    keys = sorted(names if names is not None else params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_coords else rng.choice(total, n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for j in np.sort(flat):
        ti = int(np.searchsorted(offsets, j, side="right") - 1)
        k = keys[ti]
        idx = np.unravel_index(int(j - offsets[ti]), params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + eps
        fp = f()[0]
        params[k][idx] = old - eps
        fm = f()[0]
        params[k][idx] = old
        num = (fp - fm) / (2 * eps)
        ana = float(grads[k][idx]) if k in grads else 0.0
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    """JSON container of named shape + value arrays; floats use repr so the
    round trip is bit-exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            k: {"shape": list(t.shape), "values": [float(x) for x in t.ravel()]}
            for k, t in sorted(tensors.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {
        k: np.array(t["values"], dtype=np.float64).reshape(t["shape"])
        for k, t in doc["tensors"].items()
    }
    return tensors, doc.get("meta", {})
