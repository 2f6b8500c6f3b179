import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stare.encoder import EncoderConfig
from stare.evaluation import (
    ABLATION_VARIANTS,
    DATA_FRACTIONS,
    TIME_WINDOWS_S,
    Experiment,
    MetricError,
    MetricReport,
    accuracy,
    auc_roc,
    compute_metrics,
    curve_svg,
    f1,
    mae,
    mape,
    partial_data_slice,
    partial_time_slice,
    precision_recall,
    relative_improvement,
    report_csv,
    rmse,
    run_ablation,
    slice_csv,
    slice_dataset,
)
from stare.gaze_data import (
    FixationRecord,
    GazeSequence,
    Modality,
    SyntheticConfig,
    generate_synthetic,
)
from stare.model import ModelConfig, TaskSpec
from stare.training import Predictions, SplitPlan, TrainConfig


def pairwise_auc(labels, scores):
    """Exhaustive enumeration of positive/negative pairs, kept in exact fractions."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    twice = sum(2 if p > n else 1 if p == n else 0 for p, n in itertools.product(pos, neg))
    return twice / (2 * len(pos) * len(neg))


def seq(starts, sid="s"):
    recs = tuple(FixationRecord(sid, i + 1, s, s + 100, 10.0 * i, 5.0) for i, s in enumerate(starts))
    return GazeSequence(sid, Modality.FIXATION, recs)


# -------------------------------------------------------------------- classification

def test_auc_worked_example():
    assert auc_roc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.6]) == 0.75


def test_f1_worked_example():
    assert precision_recall([1, 0, 0], [1, 1, 0]) == (0.5, 1.0)
    assert f1([1, 0, 0], [1, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)


def test_perfect_separation():
    y, s = [1, 1, 0, 0], [0.9, 0.6, 0.4, 0.1]
    assert accuracy(y, s) == f1(y, s) == auc_roc(y, s) == 1.0


def test_f1_zero_over_zero():
    assert f1([0, 0], [0.1, 0.2]) == 0.0


def test_auc_single_class_raises():
    with pytest.raises(MetricError):
        auc_roc([1, 1], [0.2, 0.3])


def test_auc_ties_count_half():
    assert auc_roc([1, 0], [0.5, 0.5]) == 0.5


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 6)), min_size=2, max_size=200))
def test_auc_matches_pairwise_enumeration(rows):
    labels = [y for y, _ in rows]
    if len(set(labels)) < 2:
        labels[0] = 1 - labels[1]
    scores = [s / 6 for _, s in rows]
    assert auc_roc(labels, scores) == pairwise_auc(labels, scores)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 2**31 - 1))
def test_accuracy_invariant_under_monotone_map_fixing_half(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    s = np.array(scores)
    warped = 0.5 + np.sign(s - 0.5) * np.abs(s - 0.5) ** 3 * 4
    assert accuracy(labels, s) == accuracy(labels, warped)


# ------------------------------------------------------------------------ regression

def test_regression_examples():
    assert rmse([1, 3], [2, 2]) == 1.0 and mae([1, 3], [2, 2]) == 1.0
    assert mape([2, 4], [1, 5]) == 37.5
    assert rmse([1, 2], [1, 2]) == mae([1, 2], [1, 2]) == mape([1, 2], [1, 2]) == 0


def test_mape_zero_truth_raises():
    with pytest.raises(MetricError):
        mape([0, 1], [1, 1])


def test_mape_is_directional():
    assert mape([2], [4]) == 100.0 and mape([4], [2]) == 50.0


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
def test_rmse_mae_symmetric(pairs):
    a, b = zip(*pairs)
    assert rmse(a, b) == rmse(b, a) and mae(a, b) == mae(b, a)


def test_relative_improvement_reproduces_published_deltas():
    assert abs(relative_improvement(0.628, 0.597) - 5.19) < 0.01
    assert abs(relative_improvement(0.761, 0.817, lower_is_better=True) - 6.86) < 0.02
    assert relative_improvement(0.5, 0.5) == 0.0
    with pytest.raises(MetricError):
        relative_improvement(1.0, 0.0)


def test_compute_metrics_count_clamps_and_skips_zero_truth():
    preds = Predictions(np.array([0.0, 2.0, 4.0]), np.array([-1.0, 1.0, 5.0]), ("a", "b", "c"))
    m = compute_metrics(TaskSpec(m="count"), preds)
    assert m["mae"] == pytest.approx(2 / 3)
    assert m["mape"] == 37.5


def test_compute_metrics_binary():
    preds = Predictions(np.array([1.0, 0, 1, 0]), np.array([0.9, 0.8, 0.7, 0.6]), ("a",) * 4)
    m = compute_metrics(TaskSpec(), preds)
    assert m == {"accuracy": 0.5, "f1": pytest.approx(2 / 3), "auc": 0.75}


# --------------------------------------------------------------------------- reports

def test_report_and_slice_csv():
    rep = MetricReport(TaskSpec(), [{"accuracy": 0.5}, {"accuracy": 0.7}], 10)
    assert report_csv({"STARE": rep}).splitlines() == [
        "variant,metric,mean,min,max,n_repeats", "STARE,accuracy,0.600000,0.500000,0.700000,2"]
    assert slice_csv({"0.10": rep}).splitlines()[1] == "0.10,accuracy,0.600000,0.500000,0.700000"
    svg = curve_svg({"0.10": rep, "0.15": rep}, "accuracy")
    assert svg.startswith("<svg") and "polyline" in svg


# --------------------------------------------------------------------------- slicing

def test_data_fraction_sweep_has_nineteen_steps():
    assert len(DATA_FRACTIONS) == 19 and DATA_FRACTIONS[0] == 0.10 and DATA_FRACTIONS[-1] == 1.0
    assert TIME_WINDOWS_S == (1, 2, 5, 8, 10)


def test_partial_data_examples():
    g = seq(range(0, 20_000, 1000))
    assert partial_data_slice(g, 0.10).length == 2
    assert partial_data_slice(g, 0.15).length == 3
    assert partial_data_slice(g, 1.0) == g
    assert partial_data_slice(seq([0, 5]), 0.1).length == 1


def test_partial_time_examples():
    g = seq([0, 900, 1500, 6000])
    assert partial_time_slice(g, 1).sequence.length == 2
    assert partial_time_slice(seq(range(0, 7000, 500)), 10).sequence.length == 14


def test_time_windows_measured_from_first_onset():
    g = seq([5000, 5900, 6500])
    assert partial_time_slice(g, 1).sequence.length == 2


@given(st.lists(st.integers(0, 400), min_size=1, max_size=40).map(lambda d: list(np.cumsum(d))),
       st.floats(0.01, 1), st.floats(0.01, 1))
def test_slices_are_prefixes(starts, f1_, f2_):
    g = seq(starts)
    lo, hi = sorted((f1_, f2_))
    a, b = partial_data_slice(g, lo), partial_data_slice(g, hi)
    assert b.records[: a.length] == a.records
    ta, tb = partial_time_slice(g, lo * 10), partial_time_slice(g, hi * 10)
    assert tb.sequence.records[: ta.sequence.length] == ta.sequence.records


def test_time_sweep_nested(rng):
    ds, _ = generate_synthetic(SyntheticConfig(sessions=6, min_fix=5, max_fix=30), 1)
    sizes = []
    for w in TIME_WINDOWS_S:
        sliced, dropped = slice_dataset(ds, "time", w)
        assert dropped == 0
        sizes.append(sum(g.length for g, _ in sliced.sessions))
    assert sizes == sorted(sizes)


# -------------------------------------------------------------------------- ablation

def test_variant_ladder():
    assert list(ABLATION_VARIANTS) == ["RawSeq", "TokenOnly", "TokenROI", "TokenROI_Cross", "TokenROI_Co", "STARE"]
    assert {(v.tokenizer, v.fusion_mode) for v in ABLATION_VARIANTS.values()} == {
        ("raw", "none"), ("chronos", "none"), ("roi", "none"),
        ("roi", "cross_only"), ("roi", "co_only"), ("roi", "cross_and_co")}


def _tiny_experiment():
    return Experiment(
        train=TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, patience=1),
        model=ModelConfig(EncoderConfig(d=8, n_layers=1, n_heads=1), head_hidden=8, cand_dim=4),
    )


def test_ablation_single_variant_and_determinism():
    ds, m = generate_synthetic(SyntheticConfig(rows=2, cols=3, sessions=12, min_fix=4, max_fix=8, p_choose=0.3), 0)
    plan = SplitPlan(repeats=2)
    a = run_ablation(ds, m, ["TokenROI"], plan, 5, _tiny_experiment())
    b = run_ablation(ds, m, ["TokenROI"], plan, 5, _tiny_experiment())
    assert list(a) == ["TokenROI"] and len(a["TokenROI"].per_repeat) == 2
    assert report_csv(a) == report_csv(b)
    with pytest.raises(ValueError, match="unknown"):
        run_ablation(ds, m, ["Bogus"], plan, 5)
