"""Metrics, slicing of sessions by prefix fraction or time window, and the
ablation ladder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .gaze_data import Dataset, GazeSequence
from .model import ModelConfig, TaskSpec
from .roi_map import ROIMap
from .training import (
    Features,
    Predictions,
    SplitPlan,
    TrainConfig,
    featurize,
    make_splits,
    score_sessions,
    stream,
    train,
)


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"length mismatch {a.size} vs {b.size}")
    if a.size == 0:
        raise MetricError("empty input")
    return a, b


# ------------------------------------------------------------- classification

def accuracy(labels, scores, threshold: float = 0.5) -> float:
    y, s = _pair(labels, scores)
    return float(np.mean((s >= threshold) == (y > 0.5)))


def precision_recall(labels, scores, threshold: float = 0.5) -> tuple[float, float]:
    y, s = _pair(labels, scores)
    pred = s >= threshold
    pos = y > 0.5
    tp = float(np.sum(pred & pos))
    p = tp / pred.sum() if pred.any() else 0.0
    r = tp / pos.sum() if pos.any() else 0.0
    return p, r


def f1(labels, scores, threshold: float = 0.5) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p, r = precision_recall(labels, scores, threshold)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def auc_roc(labels, scores) -> float:
    """Fraction of positive/negative pairs ranked correctly, ties worth one half.

    Computed from midranks, which equals the pairwise count exactly.
    """
    y, s = _pair(labels, scores)
    pos = y > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    # rank sums are half-integers at worst, so this is exact in double precision
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ----------------------------------------------------------------- regression

def rmse(true, pred) -> float:
    t, p = _pair(true, pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def mae(true, pred) -> float:
    t, p = _pair(true, pred)
    return float(np.mean(np.abs(t - p)))


def mape(true, pred) -> float:
    """Mean absolute percentage error in percent; undefined for a zero truth."""
    t, p = _pair(true, pred)
    if np.any(t == 0):
        raise MetricError("MAPE is undefined when a true value is zero")
    return float(np.mean(np.abs(t - p) / np.abs(t)) * 100.0)


def relative_improvement(candidate: float, baseline: float, lower_is_better: bool = False) -> float:
    """Percent gain of ``candidate`` over ``baseline``."""
    if baseline == 0:
        raise MetricError("relative improvement against a zero baseline")
    gain = baseline - candidate if lower_is_better else candidate - baseline
    return gain / baseline * 100.0


CLASS_METRICS = ("accuracy", "f1", "auc")
COUNT_METRICS = ("rmse", "mae", "mape")


def compute_metrics(task: TaskSpec, preds: Predictions) -> dict[str, float]:
    """All metrics for one held-out evaluation.

    Counts are clamped at zero before scoring; MAPE covers the sessions with a
    non-zero true count (NaN when there are none).
    """
    if task.m == "count":
        pred = np.maximum(preds.scores, 0.0)
        nz = preds.truth != 0
        return {
            "rmse": rmse(preds.truth, pred),
            "mae": mae(preds.truth, pred),
            "mape": mape(preds.truth[nz], pred[nz]) if nz.any() else math.nan,
        }
    if task.binary:
        y, s = preds.truth, preds.scores
        out = {"accuracy": accuracy(y, s), "f1": f1(y, s)}
        try:
            out["auc"] = auc_roc(y, s)
        except MetricError:
            out["auc"] = math.nan
        return out
    hit = (preds.scores == preds.truth).astype(float)
    return {"accuracy": float(hit.mean())}


# -------------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricSummary:
    metric: str
    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def min(self) -> float:
        return float(np.min(self.values))

    @property
    def max(self) -> float:
        return float(np.max(self.values))


@dataclass
class MetricReport:
    task: TaskSpec
    per_repeat: list[dict[str, float]] = field(default_factory=list)
    n_eval: int = 0

    def summary(self) -> dict[str, MetricSummary]:
        names = sorted({k for row in self.per_repeat for k in row})
        return {k: MetricSummary(k, tuple(row[k] for row in self.per_repeat if k in row)) for k in names}

    def mean(self, metric: str) -> float:
        return self.summary()[metric].mean


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def report_csv(reports: Mapping[str, MetricReport]) -> str:
    lines = ["variant,metric,mean,min,max,n_repeats"]
    for name, rep in reports.items():
        for metric, s in rep.summary().items():
            lines.append(f"{name},{metric},{_fmt(s.mean)},{_fmt(s.min)},{_fmt(s.max)},{len(s.values)}")
    return "\n".join(lines) + "\n"


def slice_csv(curve: Mapping[str, MetricReport]) -> str:
    lines = ["slice,metric,mean,min,max"]
    for name, rep in curve.items():
        for metric, s in rep.summary().items():
            lines.append(f"{name},{metric},{_fmt(s.mean)},{_fmt(s.min)},{_fmt(s.max)}")
    return "\n".join(lines) + "\n"


def curve_svg(curve: Mapping[str, MetricReport], metric: str, title: str = "",
              width: int = 480, height: int = 300) -> str:
    """Line chart of the mean with a shaded min/max band."""
    xs = list(curve)
    stats = [curve[x].summary().get(metric) for x in xs]
    pts = [(i, s) for i, s in enumerate(stats) if s is not None]
    pad = 40
    lo = min((s.min for _, s in pts), default=0.0)
    hi = max((s.max for _, s in pts), default=1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(len(xs) - 1, 1)

    def px(i):
        return pad + (width - 2 * pad) * i / n

    def py(v):
        return height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)

    band = [f"{px(i):.1f},{py(s.max):.1f}" for i, s in pts]
    band += [f"{px(i):.1f},{py(s.min):.1f}" for i, s in reversed(pts)]
    line = " ".join(f"{px(i):.1f},{py(s.mean):.1f}" for i, s in pts)
    labels = "".join(
        f'<text x="{px(i):.1f}" y="{height - pad + 14}" font-size="9" text-anchor="middle">{x}</text>'
        for i, x in enumerate(xs)
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{title or metric}</text>'
        f'<text x="4" y="{py(hi):.1f}" font-size="9">{hi:.3f}</text>'
        f'<text x="4" y="{py(lo):.1f}" font-size="9">{lo:.3f}</text>'
        f'<polygon points="{" ".join(band)}" fill="#9ecae1" opacity="0.5"/>'
        f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="2"/>'
        f"{labels}</svg>\n"
    )


# -------------------------------------------------------------------- slicing

DATA_FRACTIONS = tuple(round(0.10 + 0.05 * i, 2) for i in range(19))
TIME_WINDOWS_S = (1, 2, 5, 8, 10)


def partial_data_slice(g: GazeSequence, fraction: float) -> GazeSequence:
    """The first ``ceil(fraction * T)`` records, at least one."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    # round away float noise such as 0.15 * 20 = 3.0000000000000004
    n = math.ceil(round(fraction * g.length, 9))
    return g.prefix(max(1, n))


@dataclass(frozen=True)
class TimeSlice:
    sequence: GazeSequence | None  # None when no record starts inside the window
    empty: bool


def partial_time_slice(g: GazeSequence, window_s: float) -> TimeSlice:
    """Records whose onset falls before ``window_s`` seconds, measured from the
    session's first onset."""
    if not window_s > 0:
        raise ValueError("window must be positive")
    onsets = g.onsets_ms() - g.onsets_ms()[0]
    n = int(np.sum(onsets < window_s * 1000.0))
    if n == 0:
        return TimeSlice(None, True)
    return TimeSlice(g.prefix(n), False)


def slice_dataset(ds: Dataset, how: str, value: float) -> tuple[Dataset, int]:
    """Apply one slice to every session; returns the sliced dataset and the
    number of sessions dropped for being empty."""
    kept, dropped = [], 0
    for g, u in ds.sessions:
        if how == "fraction":
            kept.append((partial_data_slice(g, value), u))
            continue
        ts = partial_time_slice(g, value)
        if ts.empty:
            dropped += 1
        else:
            kept.append((ts.sequence, u))
    return Dataset(kept), dropped


# ------------------------------------------------------------------- ablation

@dataclass(frozen=True)
class AblationVariant:
    name: str
    tokenizer: str  # featurize kind
    fusion_mode: str


ABLATION_VARIANTS = {
    "RawSeq": AblationVariant("RawSeq", "raw", "none"),
    "TokenOnly": AblationVariant("TokenOnly", "chronos", "none"),
    "TokenROI": AblationVariant("TokenROI", "roi", "none"),
    "TokenROI_Cross": AblationVariant("TokenROI_Cross", "roi", "cross_only"),
    "TokenROI_Co": AblationVariant("TokenROI_Co", "roi", "co_only"),
    "STARE": AblationVariant("STARE", "roi", "cross_and_co"),
}


def variant_model(v: AblationVariant, base: ModelConfig) -> ModelConfig:
    return replace(base, fusion=replace(base.fusion, mode=v.fusion_mode))


@dataclass(frozen=True)
class Experiment:
    """Everything fixed across the variants or slices of one comparison."""

    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    max_len: int | None = None


def evaluate_repeats(features: Features, plan: SplitPlan, exp: Experiment, model: ModelConfig,
                     seed: int, on_result: Callable | None = None) -> MetricReport:
    """Train on each repeat's training side and score its test side."""
    rep = MetricReport(exp.task)
    for r, (tr_ids, te_ids) in enumerate(plan.assignments):
        res = train(features.take(features.index_of(tr_ids)), exp.task,
                    replace(exp.train, seed=seed + r), model)
        test = features.take(features.index_of(te_ids))
        preds = score_sessions(res.params, res.model, test, exp.task, stream(seed + r, "eval"))
        rep.per_repeat.append(compute_metrics(exp.task, preds))
        rep.n_eval += len(preds.truth)
        if on_result is not None:
            on_result(r, res, preds)
    return rep


def run_ablation(ds: Dataset, roi_map: ROIMap, variants: Iterable[str], plan: SplitPlan,
                 seed: int, exp: Experiment | None = None) -> dict[str, MetricReport]:
    """Train and score each named variant under identical splits and seeds."""
    exp = exp or Experiment()
    names = list(variants)
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; known: {sorted(ABLATION_VARIANTS)}")
    if not plan.assignments:
        plan = make_splits(ds, plan, seed)
    cache: dict[str, Features] = {}
    out = {}
    for name in names:
        v = ABLATION_VARIANTS[name]
        if v.tokenizer not in cache:
            cache[v.tokenizer] = featurize(ds, roi_map, v.tokenizer, exp.max_len)
        out[name] = evaluate_repeats(cache[v.tokenizer], plan, exp, variant_model(v, exp.model), seed)
    return out


def run_slices(ds: Dataset, roi_map: ROIMap, how: str, values: Sequence[float], plan: SplitPlan,
               seed: int, exp: Experiment | None = None, kind: str = "roi",
               retrain: bool = True) -> dict[str, MetricReport]:
    """Accuracy (or count error) as a function of how much of each session is seen.

    With ``retrain`` a fresh model is fitted per slice.  Otherwise one model is
    trained on full sessions per repeat and scored on each truncated test set.
    Sessions left empty by a time window are dropped from that slice.
    """
    exp = exp or Experiment()
    if how not in ("fraction", "time"):
        raise ValueError("how must be 'fraction' or 'time'")
    if not plan.assignments:
        plan = make_splits(ds, plan, seed)
    L = exp.max_len or (max(g.length for g, _ in ds.sessions) + 1)
    label = (lambda v: f"{v:.2f}") if how == "fraction" else (lambda v: f"{v:g}s")
    out: dict[str, MetricReport] = {}
    if retrain:
        for v in values:
            sliced, _ = slice_dataset(ds, how, v)
            feats = featurize(sliced, roi_map, kind, L)
            sub = _restrict_plan(plan, set(sliced.session_ids))
            out[label(v)] = evaluate_repeats(feats, sub, exp, exp.model, seed)
        return out
    full = featurize(ds, roi_map, kind, L)
    reports = {label(v): MetricReport(exp.task) for v in values}
    for r, (tr_ids, te_ids) in enumerate(plan.assignments):
        res = train(full.take(full.index_of(tr_ids)), exp.task, replace(exp.train, seed=seed + r), exp.model)
        for v in values:
            sliced, _ = slice_dataset(ds.subset(te_ids), how, v)
            feats = featurize(sliced, roi_map, kind, L)
            preds = score_sessions(res.params, res.model, feats, exp.task, stream(seed + r, "eval"))
            reports[label(v)].per_repeat.append(compute_metrics(exp.task, preds))
            reports[label(v)].n_eval += len(preds.truth)
    return reports


def _restrict_plan(plan: SplitPlan, keep: set[str]) -> SplitPlan:
    return replace(plan, assignments=tuple(
        (tuple(s for s in tr if s in keep), tuple(s for s in te if s in keep))
        for tr, te in plan.assignments
    ))
