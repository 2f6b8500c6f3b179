"""The full network: channel encoder, fusion, and a task head on the pooled
session vector.  Parameters live in one flat ``name -> array`` dict."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .encoder import EncoderConfig, encode, encode_backward, init_encoder
from .fusion import FusionConfig, fuse, fuse_backward, init_fusion, n_blocks

TASKS = ("class", "count")
CLASS_MODES = ("binary_per_product", "multiclass_J")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    m: str = "class"
    class_mode: str = "binary_per_product"
    negative_ratio: int = 1
    resample_negatives: str = "per_run"  # or "per_epoch"

    def validate(self) -> None:
        if self.m not in TASKS:
            raise ModelError(f"unknown task {self.m!r}; expected one of {TASKS}")
        if self.class_mode not in CLASS_MODES:
            raise ModelError(f"unknown class_mode {self.class_mode!r}")
        if self.negative_ratio < 1:
            raise ModelError("negative_ratio must be >= 1")
        if self.resample_negatives not in ("per_run", "per_epoch"):
            raise ModelError(f"unknown resample_negatives {self.resample_negatives!r}")

    @property
    def binary(self) -> bool:
        return self.m == "class" and self.class_mode == "binary_per_product"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    n_items: int = 64  # J
    head_hidden: int = 128
    cand_dim: int = 32
    # use candidate_grid (filled from the ROI map) when the map is a grid
    factorize_candidates: bool = True
    # (row, col) of every candidate id; when set, a candidate's embedding is the
    # concatenation of a learned row vector and a learned column vector
    candidate_grid: tuple[tuple[int, ...], tuple[int, ...]] | None = None

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate(self.encoder.n_channels)
        self.task.validate()
        if self.n_items < 1 or self.head_hidden < 1 or self.cand_dim < 1:
            raise ModelError("head sizes must be positive")
        if self.candidate_grid is not None:
            rows, cols = self.candidate_grid
            if len(rows) != self.n_items or len(cols) != self.n_items:
                raise ModelError("candidate_grid must give a (row, col) for every item")

    @property
    def cand_width(self) -> int:
        return self.cand_dim * (2 if self.candidate_grid is not None else 1)

    @property
    def z_dim(self) -> int:
        return n_blocks(self.fusion, self.encoder.n_channels) * self.encoder.d


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    p = init_encoder(cfg.encoder, rng)
    p.update(init_fusion(cfg.fusion, cfg.encoder.d, rng))
    zd = cfg.z_dim
    if cfg.task.binary:
        n_in = zd + cfg.cand_width
        if cfg.candidate_grid is None:
            p["head.cand"] = rng.normal(0.0, 1.0, (cfg.n_items, cfg.cand_dim))
        else:
            rows, cols = cfg.candidate_grid
            p["head.cand.row"] = rng.normal(0.0, 1.0, (max(rows) + 1, cfg.cand_dim))
            p["head.cand.col"] = rng.normal(0.0, 1.0, (max(cols) + 1, cfg.cand_dim))
        p["head.w1"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, cfg.head_hidden))
        p["head.b1"] = np.zeros(cfg.head_hidden)
        p["head.w2"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.head_hidden), (cfg.head_hidden, 1))
        p["head.b2"] = np.zeros(1)
    else:
        n_out = cfg.n_items if cfg.task.m == "class" else 1
        p["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(zd), (zd, n_out))
        p["head.b"] = np.zeros(n_out)
    return p


# ---------------------------------------------------------------- representation

def represent(params, cfg: ModelConfig, inputs, mask):
    """Inputs (K, B, L) and mask (B, L) -> pooled session vectors Z (B, z_dim)."""
    H, ecache = encode(params, cfg.encoder, inputs, mask)
    Z, fcache = fuse(params, H, mask, cfg.fusion)
    return Z, (ecache, fcache, H.shape)


def represent_backward(params, cfg: ModelConfig, cache, dZ, grads) -> None:
    ecache, fcache, hshape = cache
    dH = fuse_backward(params, fcache, dZ, grads, hshape, cfg.fusion)
    encode_backward(params, cfg.encoder, ecache, dH, grads)


# ------------------------------------------------------------------------ heads

def _check_candidates(cfg: ModelConfig, candidates) -> np.ndarray:
    c = np.asarray(candidates, dtype=np.int64)
    if np.any((c < 0) | (c >= cfg.n_items)):
        raise ModelError(f"candidate id outside 0..{cfg.n_items - 1}")
    return c


def candidate_embedding(params, cfg: ModelConfig, c: np.ndarray) -> np.ndarray:
    if cfg.candidate_grid is None:
        return params["head.cand"][c]
    rows, cols = (np.asarray(a) for a in cfg.candidate_grid)
    return np.concatenate([params["head.cand.row"][rows[c]], params["head.cand.col"][cols[c]]], axis=-1)


def _candidate_embedding_backward(grads, cfg: ModelConfig, c: np.ndarray, de: np.ndarray) -> None:
    if cfg.candidate_grid is None:
        np.add.at(grads["head.cand"], c, de)
        return
    rows, cols = (np.asarray(a) for a in cfg.candidate_grid)
    np.add.at(grads["head.cand.row"], rows[c], de[:, : cfg.cand_dim])
    np.add.at(grads["head.cand.col"], cols[c], de[:, cfg.cand_dim:])


def choice_logits(params, cfg: ModelConfig, Z, rows, candidates):
    """Binary head: logit for pair i from [Z[rows[i]]; embedding(candidates[i])]."""
    act, _ = nn.ACTIVATIONS[cfg.encoder.activation]
    c = _check_candidates(cfg, candidates)
    x = np.concatenate([Z[rows], candidate_embedding(params, cfg, c)], axis=-1)
    u = x @ params["head.w1"] + params["head.b1"]
    h, hc = act(u)
    logits = (h @ params["head.w2"] + params["head.b2"])[:, 0]
    return logits, (x, hc, h, np.asarray(rows), c, Z.shape)


def choice_logits_backward(params, cfg: ModelConfig, cache, dlogits, grads):
    _, act_back = nn.ACTIVATIONS[cfg.encoder.activation]
    x, hc, h, rows, c, zshape = cache
    dh = nn.linear_backward(h, dlogits[:, None], params["head.w2"], grads, "head.w2", "head.b2")
    du = act_back(hc, dh)
    dx = nn.linear_backward(x, du, params["head.w1"], grads, "head.w1", "head.b1")
    dZ = np.zeros(zshape)
    np.add.at(dZ, rows, dx[:, : zshape[1]])
    _candidate_embedding_backward(grads, cfg, c, dx[:, zshape[1]:])
    return dZ


def linear_head(params, Z):
    return Z @ params["head.w"] + params["head.b"]


def predict_choice(params, cfg: ModelConfig, Z, candidate=None):
    """Probability of choice.

    Binary mode: p(buy) for ``candidate`` given each row of Z.  Multiclass mode:
    softmax over the J logits (``candidate`` selects one column when given).
    """
    Z = np.atleast_2d(Z)
    if cfg.task.binary:
        if candidate is None:
            raise ModelError("binary head needs a candidate id")
        cands = np.broadcast_to(np.asarray(candidate), (Z.shape[0],))
        logits, _ = choice_logits(params, cfg, Z, np.arange(Z.shape[0]), cands)
        return nn.sigmoid(logits)
    probs = nn.softmax(linear_head(params, Z), axis=-1)
    if candidate is None:
        return probs
    return probs[:, _check_candidates(cfg, [candidate])[0]]


def predict_count(params, Z):
    """Unbounded count estimate per row of Z."""
    return linear_head(params, np.atleast_2d(Z))[:, 0]


# ------------------------------------------------------------------------- loss

@dataclass(frozen=True)
class Targets:
    """Supervision for one batch of sessions.

    Binary mode uses ``rows`` (session index within the batch), ``candidates``
    and 0/1 ``labels``; multiclass uses 0-based ``labels`` per session; count
    uses ``values`` per session.
    """

    labels: np.ndarray
    rows: np.ndarray | None = None
    candidates: np.ndarray | None = None


def head_loss(params, cfg: ModelConfig, Z, targets: Targets, grads=None):
    """Task loss on pooled vectors; with ``grads`` also returns dL/dZ."""
    if cfg.task.binary:
        logits, hc = choice_logits(params, cfg, Z, targets.rows, targets.candidates)
        loss, dl = nn.binary_cross_entropy_logits(logits, targets.labels)
        dZ = None if grads is None else choice_logits_backward(params, cfg, hc, dl, grads)
        return loss, dZ
    out = linear_head(params, Z)
    if cfg.task.m == "class":
        loss, dout = nn.softmax_cross_entropy(out, targets.labels)
    else:
        loss, d1 = nn.mse_with_grad(out[:, 0], np.asarray(targets.labels, dtype=np.float64))
        dout = d1[:, None]
    if grads is None:
        return loss, None
    return loss, nn.linear_backward(Z, dout, params["head.w"], grads, "head.w", "head.b")


def loss_and_grads(params, cfg: ModelConfig, inputs, mask, targets: Targets):
    """Full forward pass and loss with gradients for every parameter."""
    Z, cache = represent(params, cfg, inputs, mask)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss, dZ = head_loss(params, cfg, Z, targets, grads)
    nn.check_finite("loss", loss)
    represent_backward(params, cfg, cache, dZ, grads)
    return loss, grads


def loss_only(params, cfg: ModelConfig, inputs, mask, targets: Targets) -> float:
    Z, _ = represent(params, cfg, inputs, mask)
    return head_loss(params, cfg, Z, targets)[0]


def parameter_count(params, prefix: str = "") -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))
