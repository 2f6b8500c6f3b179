"""Co-attention and cross-attention between channel embeddings, concatenation
and mask-aware temporal pooling into one vector per session."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn

MODES = ("none", "cross_only", "co_only", "cross_and_co")
DIRECTIONS = ("ch1_queries_ch2", "ch2_queries_ch1")
GROUPINGS = ("xy", "left_right_eyes")
POOLINGS = ("mean", "last")
CO_STYLES = ("mutual", "self")


class FusionError(ValueError):
    pass


class AlignmentError(FusionError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "cross_and_co"
    # None -> x queries y for xy grouping, right eye queries left for binocular
    direction: str | None = None
    channel_grouping: str = "xy"
    pooling: str = "mean"
    co_style: str = "mutual"
    n_heads: int = 1
    scaled: bool = True

    def validate(self, K: int | None = None) -> None:
        for value, allowed, what in ((self.mode, MODES, "mode"),
                                     (self.channel_grouping, GROUPINGS, "channel_grouping"),
                                     (self.pooling, POOLINGS, "pooling"),
                                     (self.co_style, CO_STYLES, "co_style")):
            if value not in allowed:
                raise FusionError(f"unknown {what} {value!r}; expected one of {allowed}")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise FusionError(f"unknown direction {self.direction!r}")
        if K is not None:
            need = 4 if self.channel_grouping == "left_right_eyes" else 2
            if K != need:
                raise FusionError(f"channel_grouping {self.channel_grouping!r} needs K={need}, got K={K}")

    @property
    def resolved_direction(self) -> str:
        if self.direction is not None:
            return self.direction
        return "ch2_queries_ch1" if self.channel_grouping == "left_right_eyes" else "ch1_queries_ch2"

    @property
    def uses_co(self) -> bool:
        return self.mode in ("co_only", "cross_and_co")

    @property
    def uses_cross(self) -> bool:
        return self.mode in ("cross_only", "cross_and_co")


def co_pairs(cfg: FusionConfig) -> list[tuple[int, int]]:
    """Channel pairs that co-attend mutually."""
    if cfg.channel_grouping == "xy":
        return [(0, 1)]
    return [(0, 2), (1, 3)]  # left-x <-> right-x, left-y <-> right-y


def cross_pairs(cfg: FusionConfig) -> list[tuple[int, int]]:
    """(query channel, key/value channel) for each cross-attention branch."""
    flip = cfg.resolved_direction == "ch2_queries_ch1"
    return [(b, a) if flip else (a, b) for a, b in co_pairs(cfg)]


def n_blocks(cfg: FusionConfig, K: int) -> int:
    """Number of d-wide blocks in the pooled representation."""
    if cfg.mode == "none":
        return K
    n = 0
    if cfg.uses_co:
        n += 2 * len(co_pairs(cfg))
    if cfg.uses_cross:
        n += len(cross_pairs(cfg))
    return n


def _attn_names(cfg: FusionConfig) -> list[str]:
    names = []
    if cfg.uses_co:
        for i in range(len(co_pairs(cfg))):
            names += [f"fus.co.{i}.a.", f"fus.co.{i}.b."]
    if cfg.uses_cross:
        names += [f"fus.cross.{i}." for i in range(len(cross_pairs(cfg)))]
    return names


def init_fusion(cfg: FusionConfig, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    if d % cfg.n_heads:
        raise FusionError(f"fusion n_heads={cfg.n_heads} must divide d={d}")
    p = {}
    for pre in _attn_names(cfg):
        for w in ("wq", "wk", "wv"):
            p[pre + w] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
    return p


def _scale(cfg: FusionConfig, d: int) -> float:
    return 1.0 / math.sqrt(d // cfg.n_heads) if cfg.scaled else 1.0


def attend(params, prefix: str, Hq, Hkv, mask, cfg: FusionConfig):
    return nn.mha(params, prefix, Hq, Hkv, mask, cfg.n_heads, out_proj=False,
                  scale=_scale(cfg, Hq.shape[-1]))


def co_attention(params, prefix: str, Ha, Hb, mask, cfg: FusionConfig):
    """Mutual attention: a queries b with ``prefix + 'a.'`` weights and b queries
    a with ``prefix + 'b.'`` weights.  With ``co_style='self'`` each channel
    attends to itself instead."""
    if cfg.co_style == "self":
        za, ca = attend(params, prefix + "a.", Ha, Ha, mask, cfg)
        zb, cb = attend(params, prefix + "b.", Hb, Hb, mask, cfg)
    else:
        za, ca = attend(params, prefix + "a.", Ha, Hb, mask, cfg)
        zb, cb = attend(params, prefix + "b.", Hb, Ha, mask, cfg)
    return (za, zb), (ca, cb)


def cross_attention(params, prefix: str, Hq, Hkv, mask, cfg: FusionConfig):
    return attend(params, prefix, Hq, Hkv, mask, cfg)


def pool(X, mask, how: str = "mean"):
    """(B, L, D) -> (B, D) over valid positions."""
    m = np.asarray(mask, dtype=np.float64)
    if how == "mean":
        n = m.sum(axis=1, keepdims=True)
        return (X * m[..., None]).sum(axis=1) / np.maximum(n, 1.0), (m, n, how)
    last = np.maximum(m.sum(axis=1).astype(np.int64) - 1, 0)
    return X[np.arange(X.shape[0]), last], (m, last, how)


def pool_backward(cache, dZ, L: int):
    m, n, how = cache
    B, D = dZ.shape
    if how == "mean":
        return m[..., None] * (dZ / np.maximum(n, 1.0))[:, None, :]
    dX = np.zeros((B, L, D))
    dX[np.arange(B), n] = dZ
    return dX


def combine_and_pool(blocks, mask, pooling: str = "mean"):
    """Concatenate (B, L, d) blocks along features and pool over time."""
    shapes = {b.shape[:2] for b in blocks}
    if len(shapes) != 1 or next(iter(shapes)) != np.shape(mask):
        raise AlignmentError(f"blocks {[b.shape for b in blocks]} do not align with mask {np.shape(mask)}")
    X = np.concatenate(blocks, axis=-1)
    Z, c = pool(X, mask, pooling)
    return Z, (c, [b.shape[-1] for b in blocks], X.shape[1])


def combine_and_pool_backward(cache, dZ):
    c, widths, L = cache
    dX = pool_backward(c, dZ, L)
    return np.split(dX, np.cumsum(widths)[:-1], axis=-1)


def fuse(params, H, mask, cfg: FusionConfig):
    """H (K, B, L, d) -> Z (B, n_blocks * d).

    Block order: co outputs (pair by pair, a then b), then cross outputs.  With
    mode 'none' the pooled channel embeddings are concatenated.
    """
    K = H.shape[0]
    cfg.validate(K)
    if cfg.mode == "none":
        Z, pc = combine_and_pool(list(H), mask, cfg.pooling)
        return Z, ("none", pc, [])
    blocks, caches = [], []
    if cfg.uses_co:
        for i, (a, b) in enumerate(co_pairs(cfg)):
            (za, zb), c = co_attention(params, f"fus.co.{i}.", H[a], H[b], mask, cfg)
            blocks += [za, zb]
            caches.append(("co", i, a, b, c))
    if cfg.uses_cross:
        for i, (q, kv) in enumerate(cross_pairs(cfg)):
            z, c = cross_attention(params, f"fus.cross.{i}.", H[q], H[kv], mask, cfg)
            blocks.append(z)
            caches.append(("cross", i, q, kv, c))
    Z, pc = combine_and_pool(blocks, mask, cfg.pooling)
    return Z, ("attn", pc, caches)


def fuse_backward(params, cache, dZ, grads, H_shape, cfg: FusionConfig):
    kind, pc, caches = cache
    dblocks = combine_and_pool_backward(pc, dZ)
    dH = np.zeros(H_shape)
    if kind == "none":
        for k, g in enumerate(dblocks):
            dH[k] += g
        return dH
    j = 0
    for entry in caches:
        if entry[0] == "co":
            _, i, a, b, (ca, cb) = entry
            pre = f"fus.co.{i}."
            dq, dkv = nn.mha_backward(params, pre + "a.", ca, dblocks[j], grads)
            if cfg.co_style == "self":
                dH[a] += dq + dkv
            else:
                dH[a] += dq
                dH[b] += dkv
            dq, dkv = nn.mha_backward(params, pre + "b.", cb, dblocks[j + 1], grads)
            if cfg.co_style == "self":
                dH[b] += dq + dkv
            else:
                dH[b] += dq
                dH[a] += dkv
            j += 2
        else:
            _, i, q, kv, c = entry
            dq, dkv = nn.mha_backward(params, f"fus.cross.{i}.", c, dblocks[j], grads)
            dH[q] += dq
            dH[kv] += dkv
            j += 1
    return dH


def fuse_binocular(params, H, mask, cfg: FusionConfig):
    """Four-channel fusion (left-x, left-y, right-x, right-y)."""
    if H.shape[0] != 4 or cfg.channel_grouping != "left_right_eyes":
        raise FusionError("binocular fusion needs K=4 and channel_grouping='left_right_eyes'")
    return fuse(params, H, mask, cfg)
