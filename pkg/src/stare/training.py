"""Featurization, negative sampling, the training loop with early stopping and
learning-rate halving, repeated random splits, and grid search."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import nn_core as nn
from .gaze_data import Dataset, GazeSequence, Outcome
from .model import (
    ModelConfig,
    Targets,
    TaskSpec,
    choice_logits,
    head_loss,
    init_model,
    loss_and_grads,
    parameter_count,
    predict_choice,
    predict_count,
    represent,
)
from .roi_map import ROIMap
from .tokenizer import (
    ChronosQuantizer,
    Vocabulary,
    pad_raw_batch,
    pad_to_batch,
    tokenize,
    tokenize_chronos,
)

__all__ = [
    "EarlyStopping", "Features", "History", "PlateauDecay", "SplitPlan", "TaskSpec",
    "TrainConfig", "TrainResult", "TrainingError", "featurize", "grid_search", "make_splits",
    "predict_choice", "predict_count", "sample_negatives", "score_sessions", "train",
]

log = logging.getLogger(__name__)

INPUT_KINDS = ("roi", "chronos", "raw")

# Named random sub-streams derived from one seed.
STREAMS = {"data": 0, "splits": 1, "init": 2, "sampling": 3, "shuffle": 4, "validation": 5, "eval": 6}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *extra])


class TrainingError(ValueError):
    pass


# ------------------------------------------------------------------ features

@dataclass(frozen=True)
class Features:
    """Model-ready inputs for a list of sessions, in dataset order."""

    inputs: np.ndarray  # (K, N, L) token ids or scaled coordinates
    mask: np.ndarray  # (N, L)
    session_ids: tuple[str, ...]
    outcomes: tuple[Outcome, ...]
    n_items: int
    vocab_size: int
    kind: str
    candidate_grid: tuple[tuple[int, ...], tuple[int, ...]] | None = None

    @property
    def N(self) -> int:
        return len(self.session_ids)

    def take(self, idx) -> "Features":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            inputs=self.inputs[:, idx],
            mask=self.mask[idx],
            session_ids=tuple(self.session_ids[i] for i in idx),
            outcomes=tuple(self.outcomes[i] for i in idx),
        )

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.session_ids)}
        return np.array([pos[s] for s in ids], dtype=np.int64)


def _scaled_coordinates(g: GazeSequence, roi_map: ROIMap) -> np.ndarray:
    ch = g.channels()
    out = np.empty_like(ch)
    out[0::2] = ch[0::2] / roi_map.image_width - 0.5
    out[1::2] = ch[1::2] / roi_map.image_height - 0.5
    return out


def featurize(ds: Dataset, roi_map: ROIMap, kind: str = "roi", max_len: int | None = None,
              quantizer: ChronosQuantizer | None = None) -> Features:
    """Tokenize (or scale) every session and pad to a common length.

    ``roi``: column/row tokens.  ``chronos``: mean-absolute scaled value bins.
    ``raw``: coordinates divided by the image size and centred, without EOS.
    Sequences longer than ``max_len`` keep their prefix.
    """
    if kind not in INPUT_KINDS:
        raise TrainingError(f"unknown input kind {kind!r}; expected one of {INPUT_KINDS}")
    if ds.N == 0:
        raise TrainingError("empty dataset")
    seqs = [g for g, _ in ds.sessions]
    longest = max(g.length for g in seqs) + (kind != "raw")
    L = longest if max_len is None else min(longest, max_len)
    if kind == "raw":
        batch = pad_raw_batch([_scaled_coordinates(g, roi_map) for g in seqs], L, truncate=True)
        vocab = 0
    elif kind == "roi":
        batch = pad_to_batch([tokenize(g, roi_map) for g in seqs], L, truncate=True)
        vocab = Vocabulary(roi_map.n_rows, roi_map.n_cols).size
    else:
        q = quantizer or ChronosQuantizer()
        batch = pad_to_batch([tokenize_chronos(g, q) for g in seqs], L, truncate=True)
        vocab = q.vocab_size
    grid = None
    if roi_map.grid:
        by_id = sorted(roi_map.rois, key=lambda r: r.roi_id)
        grid = (tuple(r.row for r in by_id), tuple(r.col for r in by_id))
    return Features(batch.sequences, batch.attention_mask, tuple(ds.session_ids),
                    tuple(u for _, u in ds.sessions), roi_map.n_rois, vocab, kind, grid)


# ------------------------------------------------------------------ negatives

class Negatives(list):
    """Sampled negative ids; ``shortfall`` counts requested ids that did not exist."""

    shortfall: int = 0


def sample_negatives(outcome: Outcome, J: int, ratio: int, rng: np.random.Generator) -> Negatives:
    """``ratio * max(1, |chosen|)`` non-chosen ids drawn without replacement."""
    if ratio < 1:
        raise TrainingError("ratio must be >= 1")
    pool = np.array([j for j in range(J) if j not in outcome.chosen_roi_ids], dtype=np.int64)
    want = ratio * max(1, len(outcome.chosen_roi_ids))
    take = min(want, len(pool))
    out = Negatives(int(j) for j in rng.choice(pool, size=take, replace=False)) if take else Negatives()
    out.shortfall = want - take
    if out.shortfall:
        log.warning("session %s: only %d of %d negatives available", outcome.session_id, take, want)
    return out


@dataclass(frozen=True)
class Pairs:
    """Binary supervision: (session row, candidate id, label)."""

    rows: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray
    shortfall: int = 0


def build_pairs(outcomes: Sequence[Outcome], J: int, ratio: int, rng: np.random.Generator) -> Pairs:
    rows, cands, labels = [], [], []
    short = 0
    for i, u in enumerate(outcomes):
        for j in sorted(u.chosen_roi_ids):
            rows.append(i)
            cands.append(j)
            labels.append(1.0)
        neg = sample_negatives(u, J, ratio, rng)
        short += neg.shortfall
        rows += [i] * len(neg)
        cands += neg
        labels += [0.0] * len(neg)
    return Pairs(np.array(rows, dtype=np.int64), np.array(cands, dtype=np.int64),
                 np.array(labels), short)


def session_targets(task: TaskSpec, outcomes: Sequence[Outcome]) -> np.ndarray:
    if task.m == "count":
        return np.array([u.item_count for u in outcomes], dtype=np.float64)
    labels = [u.class_label for u in outcomes]
    if any(c is None for c in labels):
        raise TrainingError("multiclass_J needs a class_label on every outcome")
    return np.array(labels, dtype=np.int64) - 1


def _batch_targets(task: TaskSpec, rows_sel: np.ndarray, pairs: Pairs | None,
                   per_session: np.ndarray | None) -> Targets:
    if task.binary:
        pos = np.full(int(rows_sel.max()) + 1 if len(rows_sel) else 0, -1)
        pos[rows_sel] = np.arange(len(rows_sel))
        keep = np.isin(pairs.rows, rows_sel)
        return Targets(pairs.labels[keep], pos[pairs.rows[keep]], pairs.candidates[keep])
    return Targets(per_session[rows_sel])


# ------------------------------------------------------------- stopping rules

class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise TrainingError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, value: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


class PlateauDecay:
    """Multiply the learning rate by ``factor`` after ``plateau`` consecutive
    non-improving epochs, never going below ``floor``."""

    def __init__(self, lr: float, factor: float = 0.5, plateau: int = 2, floor: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.plateau = plateau
        self.floor = floor
        self.best = math.inf
        self.bad = 0

    def update(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.plateau:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad = 0
        return self.lr


# ------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 5
    seed: int = 0
    grid: tuple[Mapping[str, Any], ...] = ()
    val_fraction: float = 0.1
    lr_decay: float = 0.5
    plateau_epochs: int = 2
    lr_floor: float = 1e-7

    def validate(self) -> None:
        if not self.lr > 0:
            raise TrainingError("lr must be > 0")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise TrainingError("batch_size must be positive and max_epochs non-negative")
        if not 0 < self.val_fraction < 1:
            raise TrainingError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)
    initial_train_loss: float = math.nan
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: History
    model: ModelConfig
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    negative_shortfall: int = 0


def model_for(features: Features, model: ModelConfig) -> ModelConfig:
    """Fill in data-dependent sizes (vocabulary, channels, max_len, J)."""
    enc = replace(
        model.encoder,
        vocab_size=max(features.vocab_size, 1),
        n_channels=features.inputs.shape[0],
        max_len=max(model.encoder.max_len, features.inputs.shape[2]),
        input_kind="raw" if features.kind == "raw" else "tokens",
    )
    grid = features.candidate_grid if model.factorize_candidates else None
    return replace(model, encoder=enc, n_items=features.n_items, candidate_grid=grid)


def _mean_loss(params, model, feats: Features, task: TaskSpec, pairs: Pairs | None,
               per_session, batch_size: int) -> float:
    total, weight = 0.0, 0
    for start in range(0, feats.N, batch_size):
        sel = np.arange(start, min(start + batch_size, feats.N))
        t = _batch_targets(task, sel, pairs, per_session)
        if len(t.labels) == 0:
            continue
        Z, _ = represent(params, model, feats.inputs[:, sel], feats.mask[sel])
        loss, _ = head_loss(params, model, Z, t)
        total += loss * len(t.labels)
        weight += len(t.labels)
    return total / weight if weight else math.nan


def train(features: Features, task: TaskSpec, cfg: TrainConfig, model: ModelConfig) -> TrainResult:
    """Fit the network on ``features`` with a seeded 10% validation hold-out.

    Mini-batches are drawn over sessions; in binary mode every pair whose
    session falls in the batch contributes.  The returned parameters are those
    of the best validation epoch.
    """
    cfg.validate()
    task.validate()
    if features.N < 2:
        raise TrainingError("need at least two sessions to carve a validation split")
    model = model_for(features, replace(model, task=task))
    order = stream(cfg.seed, "validation").permutation(features.N)
    n_val = min(max(1, round(cfg.val_fraction * features.N)), features.N - 1)
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    tr, va = features.take(tr_idx), features.take(val_idx)

    params = nn.Parameters(init_model(model, stream(cfg.seed, "init")))
    sampling = stream(cfg.seed, "sampling")
    shuffle = stream(cfg.seed, "shuffle")
    if task.binary:
        tr_pairs = build_pairs(tr.outcomes, model.n_items, task.negative_ratio, sampling)
        va_pairs = build_pairs(va.outcomes, model.n_items, task.negative_ratio, sampling)
        tr_y = va_y = None
        shortfall = tr_pairs.shortfall + va_pairs.shortfall
    else:
        tr_pairs = va_pairs = None
        tr_y, va_y = session_targets(task, tr.outcomes), session_targets(task, va.outcomes)
        shortfall = 0

    history = History()
    result = TrainResult(params.tensors, history, model, tr.session_ids, va.session_ids, shortfall)
    if cfg.max_epochs == 0:
        return result
    history.initial_train_loss = _mean_loss(params.tensors, model, tr, task, tr_pairs, tr_y, cfg.batch_size)
    stopper = EarlyStopping(cfg.patience)
    decay = PlateauDecay(cfg.lr, cfg.lr_decay, cfg.plateau_epochs, cfg.lr_floor)
    frozen = ("enc.",) if model.encoder.freeze else ()
    best = {k: v.copy() for k, v in params.tensors.items()}
    lr = cfg.lr
    for epoch in range(cfg.max_epochs):
        if task.binary and task.resample_negatives == "per_epoch" and epoch > 0:
            tr_pairs = build_pairs(tr.outcomes, model.n_items, task.negative_ratio, sampling)
        perm = shuffle.permutation(tr.N)
        total, weight = 0.0, 0
        for b, start in enumerate(range(0, tr.N, cfg.batch_size)):
            sel = perm[start:start + cfg.batch_size]
            t = _batch_targets(task, sel, tr_pairs, tr_y)
            if len(t.labels) == 0:
                continue
            loss, grads = loss_and_grads(params.tensors, model, tr.inputs[:, sel], tr.mask[sel], t)
            if not math.isfinite(loss):
                raise nn.NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            nn.adam_step(params, grads, lr, frozen=frozen)
            total += loss * len(t.labels)
            weight += len(t.labels)
        val_loss = _mean_loss(params.tensors, model, va, task, va_pairs, va_y, cfg.batch_size)
        history.rows.append(HistoryRow(epoch, total / max(weight, 1), val_loss, lr))
        stop = stopper.update(val_loss)
        if stopper.improved:
            best = {k: v.copy() for k, v in params.tensors.items()}
            history.best_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, total / max(weight, 1), val_loss, lr)
        lr = decay.update(val_loss)
        if stop:
            history.stopped_early = True
            break
    result.params = best
    return result


# ---------------------------------------------------------------- prediction

@dataclass(frozen=True)
class Predictions:
    """Held-out truth and scores; binary mode scores are p(buy) per pair."""

    truth: np.ndarray
    scores: np.ndarray
    session_ids: tuple[str, ...]


def score_sessions(params, model: ModelConfig, features: Features, task: TaskSpec,
                   rng: np.random.Generator, batch_size: int = 64) -> Predictions:
    if task.binary:
        pairs = build_pairs(features.outcomes, model.n_items, task.negative_ratio, rng)
        truth, scores = pairs.labels, np.empty(len(pairs.labels))
        sids = tuple(features.session_ids[r] for r in pairs.rows)
    else:
        truth = session_targets(task, features.outcomes)
        scores = np.empty(features.N)
        sids = features.session_ids
    for start in range(0, features.N, batch_size):
        sel = np.arange(start, min(start + batch_size, features.N))
        Z, _ = represent(params, model, features.inputs[:, sel], features.mask[sel])
        if task.binary:
            keep = np.flatnonzero(np.isin(pairs.rows, sel))
            if len(keep):
                logits, _ = choice_logits(params, model, Z, pairs.rows[keep] - start, pairs.candidates[keep])
                scores[keep] = nn.sigmoid(logits)
        elif task.m == "class":
            scores[sel] = np.argmax(predict_choice(params, model, Z), axis=1)
        else:
            scores[sel] = predict_count(params, Z)
    return Predictions(truth, scores, sids)


# -------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    repeats: int = 10
    test_fraction: float = 0.3
    assignments: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] = ()  # (train, test)

    def validate(self) -> None:
        if self.repeats < 1:
            raise TrainingError("repeats must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise TrainingError("test_fraction must lie in (0, 1)")


def make_splits(session_ids: Sequence[str] | Dataset, plan: SplitPlan, seed: int) -> SplitPlan:
    """Independent seeded random train/test partitions, one per repeat."""
    plan.validate()
    ids = list(session_ids.session_ids if isinstance(session_ids, Dataset) else session_ids)
    N = len(ids)
    if N < 4:
        raise TrainingError(f"need at least 4 sessions to split, got {N}")
    n_test = round(plan.test_fraction * N)
    if not 0 < n_test < N:
        raise TrainingError(f"test_fraction {plan.test_fraction} leaves an empty side for N={N}")
    out = []
    for r in range(plan.repeats):
        perm = stream(seed, "splits", r).permutation(N)
        test = sorted(ids[i] for i in perm[:n_test])
        test_set = set(test)
        out.append((tuple(s for s in ids if s not in test_set), tuple(test)))
    return replace(plan, assignments=tuple(out))


# --------------------------------------------------------------- grid search

def apply_overrides(model: ModelConfig, train_cfg: TrainConfig,
                    overrides: Mapping[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    """Apply dotted overrides such as ``{"fusion.mode": "none", "train.lr": 1e-3}``."""
    sections = {"encoder": model.encoder, "fusion": model.fusion, "model": model, "train": train_cfg}
    changes: dict[str, dict[str, Any]] = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        target = sections.get(section)
        if target is None or not hasattr(target, name):
            raise TrainingError(f"unknown grid key {key!r}")
        changes.setdefault(section, {})[name] = value
    enc = replace(model.encoder, **changes.get("encoder", {}))
    fus = replace(model.fusion, **changes.get("fusion", {}))
    new_model = replace(model, encoder=enc, fusion=fus, **changes.get("model", {}))
    return new_model, replace(train_cfg, **changes.get("train", {}))


@dataclass(frozen=True)
class GridScore:
    overrides: Mapping[str, Any]
    score: float
    per_repeat: tuple[float, ...]
    n_params: int

    @property
    def key(self) -> str:
        return json.dumps(dict(self.overrides), sort_keys=True)


def selection_score(task: TaskSpec, preds: Predictions) -> float:
    """Higher is better: accuracy for choice tasks, negative RMSE for counts."""
    if task.m == "count":
        return -float(np.sqrt(np.mean((preds.truth - np.maximum(preds.scores, 0.0)) ** 2)))
    if task.binary:
        return float(np.mean((preds.scores >= 0.5) == (preds.truth > 0.5)))
    return float(np.mean(preds.scores == preds.truth))


def grid_search(features: Features, task: TaskSpec, grids: Sequence[Mapping[str, Any]],
                plan: SplitPlan, seed: int, model: ModelConfig | None = None,
                train_cfg: TrainConfig | None = None) -> tuple[Mapping[str, Any], list[GridScore]]:
    """Score each grid cell by its mean held-out metric across the plan's repeats.

    Ties go to the smaller parameter count, then to the lexicographically
    smaller JSON rendering of the overrides.
    """
    if not grids:
        raise TrainingError("empty grid")
    model = model or ModelConfig()
    train_cfg = train_cfg or TrainConfig(seed=seed)
    if not plan.assignments:
        plan = make_splits(features.session_ids, plan, seed)
    scores = []
    for cell in grids:
        m_cfg, t_cfg = apply_overrides(model, train_cfg, cell)
        per = []
        n_params = 0
        for r, (tr_ids, te_ids) in enumerate(plan.assignments):
            res = train(features.take(features.index_of(tr_ids)), task,
                        replace(t_cfg, seed=seed + r), m_cfg)
            n_params = parameter_count(res.params)
            preds = score_sessions(res.params, res.model, features.take(features.index_of(te_ids)),
                                   task, stream(seed + r, "eval"))
            per.append(selection_score(task, preds))
        scores.append(GridScore(dict(cell), float(np.mean(per)), tuple(per), n_params))
    best = min(scores, key=lambda s: (-s.score, s.n_params, s.key))
    return best.overrides, scores
