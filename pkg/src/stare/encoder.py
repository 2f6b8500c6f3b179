"""Per-channel sequence encoder: token (or raw-value) embedding + learned
positions + pre-norm self-attention blocks.  The block stack is shared by all
channels; input tables are tied or per channel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    max_len: int = 128
    tie_channel_embeddings: bool = True
    activation: str = "gelu"
    n_channels: int = 2
    # "tokens": embedding lookup; "raw": linear projection of a scalar per position
    input_kind: str = "tokens"
    freeze: bool = False

    def validate(self) -> None:
        if self.d % self.n_heads:
            raise EncoderError(f"n_heads={self.n_heads} must divide d={self.d}")
        if self.activation not in nn.ACTIVATIONS:
            raise EncoderError(f"unknown activation {self.activation!r}")
        if self.input_kind not in ("tokens", "raw"):
            raise EncoderError(f"unknown input_kind {self.input_kind!r}")
        if min(self.d, self.ff_mult, self.max_len, self.n_channels) < 1 or self.n_layers < 0:
            raise EncoderError("encoder sizes must be positive")


# Full-scale setting for reference (token embedding width of the T5 Small backbone).
FULL_SCALE = EncoderConfig(d=768, n_layers=6, n_heads=8, ff_mult=4, max_len=512)


def _table_names(cfg: EncoderConfig) -> list[str]:
    stem = "enc.tok" if cfg.input_kind == "tokens" else "enc.raw"
    if cfg.tie_channel_embeddings:
        return [stem] * cfg.n_channels
    return [f"{stem}.{k}" for k in range(cfg.n_channels)]


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    d, f = cfg.d, cfg.d * cfg.ff_mult
    p: dict[str, np.ndarray] = {}
    for name in dict.fromkeys(_table_names(cfg)):
        if cfg.input_kind == "tokens":
            p[name] = rng.normal(0.0, 1.0, (cfg.vocab_size, d))
        else:
            p[name + ".w"] = rng.normal(0.0, 1.0, d)
            p[name + ".b"] = rng.normal(0.0, 1.0, d)
    p["enc.pos"] = rng.normal(0.0, 1.0, (cfg.max_len, d))
    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * max(cfg.n_layers, 1))
    for l in range(cfg.n_layers):
        pre = f"enc.l{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[pre + "attn." + w] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[pre + "attn.wo"] = rng.normal(0.0, out_std, (d, d))
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ff.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        p[pre + "ff.b1"] = np.zeros(f)
        p[pre + "ff.w2"] = rng.normal(0.0, out_std, (f, d))
        p[pre + "ff.b2"] = np.zeros(d)
    return p


def encoder_block(params, prefix: str, H, mask, n_heads: int, activation: str = "gelu"):
    """Pre-norm residual block: H + Attn(LN(H)), then + FF(LN(.))."""
    act, _ = nn.ACTIVATIONS[activation]
    a_in, ln1 = nn.layer_norm(H, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    a_out, attn = nn.mha(params, prefix + "attn.", a_in, a_in, mask, n_heads)
    H1 = H + a_out
    f_in, ln2 = nn.layer_norm(H1, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    u = f_in @ params[prefix + "ff.w1"] + params[prefix + "ff.b1"]
    g, act_cache = act(u)
    H2 = H1 + g @ params[prefix + "ff.w2"] + params[prefix + "ff.b2"]
    return H2, (ln1, attn, ln2, f_in, act_cache, g, activation)


def encoder_block_backward(params, prefix: str, cache, dH2, grads):
    ln1, attn, ln2, f_in, act_cache, g, activation = cache
    _, act_back = nn.ACTIVATIONS[activation]
    dg = nn.linear_backward(g, dH2, params[prefix + "ff.w2"], grads, prefix + "ff.w2", prefix + "ff.b2")
    du = act_back(act_cache, dg)
    df_in = nn.linear_backward(f_in, du, params[prefix + "ff.w1"], grads, prefix + "ff.w1", prefix + "ff.b1")
    dH1 = dH2 + nn.layer_norm_backward(ln2, df_in, grads, prefix + "ln2.g", prefix + "ln2.b")
    dq, dkv = nn.mha_backward(params, prefix + "attn.", attn, dH1, grads)
    return dH1 + nn.layer_norm_backward(ln1, dq + dkv, grads, prefix + "ln1.g", prefix + "ln1.b")


def embed_inputs(params, cfg: EncoderConfig, inputs):
    """(K, B, L) ids or raw values -> (K, B, L, d) input embeddings."""
    K, B, L = inputs.shape
    if K != cfg.n_channels:
        raise EncoderError(f"expected {cfg.n_channels} channels, got {K}")
    if L > cfg.max_len:
        raise EncoderError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    names = _table_names(cfg)
    if cfg.input_kind == "tokens":
        ids = np.asarray(inputs)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
            raise EncoderError(f"token id outside vocabulary of size {cfg.vocab_size}")
        E = np.stack([params[names[k]][ids[k]] for k in range(K)])
    else:
        x = np.asarray(inputs, dtype=np.float64)
        E = np.stack([x[k][..., None] * params[names[k] + ".w"] + params[names[k] + ".b"]
                      for k in range(K)])
    return E + params["enc.pos"][:L]


def encode(params, cfg: EncoderConfig, inputs, mask):
    """Encode all channels: inputs (K, B, L), mask (B, L) -> H (K, B, L, d)."""
    K, B, L = inputs.shape
    X = embed_inputs(params, cfg, inputs)
    H = X.reshape(K * B, L, cfg.d)
    m = np.tile(np.asarray(mask, bool), (K, 1))
    caches = []
    for l in range(cfg.n_layers):
        H, c = encoder_block(params, f"enc.l{l}.", H, m, cfg.n_heads, cfg.activation)
        caches.append(c)
    return H.reshape(K, B, L, cfg.d), (inputs, caches)


def encode_backward(params, cfg: EncoderConfig, cache, dH, grads):
    inputs, caches = cache
    K, B, L = inputs.shape
    g = dH.reshape(K * B, L, cfg.d)
    for l in reversed(range(cfg.n_layers)):
        g = encoder_block_backward(params, f"enc.l{l}.", caches[l], g, grads)
    dX = g.reshape(K, B, L, cfg.d)
    grads["enc.pos"][:L] += dX.sum(axis=(0, 1))
    names = _table_names(cfg)
    for k in range(K):
        if cfg.input_kind == "tokens":
            nn.embedding_backward(np.asarray(inputs[k]), dX[k], grads, names[k])
        else:
            x = np.asarray(inputs[k], dtype=np.float64)
            grads[names[k] + ".w"] += np.einsum("bl,bld->d", x, dX[k])
            grads[names[k] + ".b"] += dX[k].sum(axis=(0, 1))


def embed_tokens(params, cfg: EncoderConfig, inputs, mask) -> np.ndarray:
    """Forward-only convenience wrapper returning H (K, B, L, d)."""
    return encode(params, cfg, inputs, mask)[0]
