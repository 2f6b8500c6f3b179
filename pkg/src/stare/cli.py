"""``stare`` command line: generate data, tokenize, train, evaluate, run the
ablation ladder and slice sweeps, and render reports."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from . import nn_core as nn
from .encoder import EncoderConfig
from .evaluation import (
    ABLATION_VARIANTS,
    DATA_FRACTIONS,
    TIME_WINDOWS_S,
    Experiment,
    MetricReport,
    compute_metrics,
    curve_svg,
    report_csv,
    run_ablation,
    run_slices,
    slice_csv,
)
from .fusion import FusionConfig
from .gaze_data import (
    Dataset,
    GazeDataError,
    SyntheticConfig,
    generate_synthetic,
    load_fixations,
    load_outcomes,
    load_raw_gaze,
    write_fixations,
    write_outcomes,
)
from .model import ModelConfig, TaskSpec
from .roi_map import ROIMap, ROIMapError, load_roi_map, save_roi_map
from .training import (
    INPUT_KINDS,
    SplitPlan,
    TrainConfig,
    TrainingError,
    featurize,
    make_splits,
    score_sessions,
    stream,
    train,
)

log = logging.getLogger("stare")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------- config model

@dataclass(frozen=True)
class DataSection:
    rows: int = 8
    cols: int = 8
    sessions: int = 512
    min_fix: int = 80
    max_fix: int = 120
    p_choose: float = 0.05
    dwell_bias: float = 6.0
    locality: float = 100.0
    fixations: str | None = None
    raw_gaze: str | None = None
    outcomes: str | None = None
    single_choice: bool = False
    input_kind: str = "roi"
    max_len: int | None = None


@dataclass(frozen=True)
class RoiMapSection:
    path: str | None = None


@dataclass(frozen=True)
class EncoderSection:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    tie_channel_embeddings: bool = True
    activation: str = "gelu"
    freeze: bool = False


@dataclass(frozen=True)
class FusionSection:
    fusion_mode: str = "cross_and_co"
    cross_direction: str | None = None
    channel_grouping: str = "xy"
    pooling: str = "mean"
    co_style: str = "mutual"
    n_heads: int = 1
    scaled: bool = True


@dataclass(frozen=True)
class TaskSection:
    m: str = "class"
    class_mode: str = "binary_per_product"
    negative_ratio: int = 1
    resample_negatives: str = "per_run"
    head_hidden: int = 128
    cand_dim: int = 32


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 1000
    patience: int = 5
    val_fraction: float = 0.1
    lr_decay: float = 0.5
    plateau_epochs: int = 2
    lr_floor: float = 1e-7
    grid: list = field(default_factory=list)


@dataclass(frozen=True)
class EvalSection:
    repeats: int = 10
    test_fraction: float = 0.3
    variants: list = field(default_factory=lambda: list(ABLATION_VARIANTS))
    fractions: list = field(default_factory=lambda: list(DATA_FRACTIONS))
    windows_s: list = field(default_factory=lambda: list(TIME_WINDOWS_S))
    retrain: bool = True


SECTIONS = {
    "data": DataSection,
    "roi_map": RoiMapSection,
    "encoder": EncoderSection,
    "fusion": FusionSection,
    "task": TaskSection,
    "train": TrainSection,
    "eval": EvalSection,
}


def _type_ok(value: Any, annotation: str) -> bool:
    if value is None:
        return "None" in annotation
    if isinstance(value, bool):
        return annotation.startswith("bool")
    if annotation.startswith("int"):
        return isinstance(value, int)
    if annotation.startswith("float"):
        return isinstance(value, (int, float))
    if annotation.startswith("str"):
        return isinstance(value, str)
    if annotation.startswith("list"):
        return isinstance(value, list)
    return True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    roi_map: RoiMapSection = field(default_factory=RoiMapSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    task: TaskSection = field(default_factory=TaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        """Build and validate; every unknown or mistyped key is reported at once."""
        problems = []
        if not isinstance(doc, dict):
            raise ConfigError(["config must be a JSON object"])
        parts = {}
        for name, value in doc.items():
            if name not in SECTIONS:
                problems.append(f"unknown section {name!r}")
                continue
            if not isinstance(value, dict):
                problems.append(f"section {name!r} must be an object")
                continue
            known = {f.name: f for f in fields(SECTIONS[name])}
            for key, v in value.items():
                if key not in known:
                    problems.append(f"unknown key {name}.{key}")
                elif not _type_ok(v, str(known[key].type)):
                    problems.append(f"{name}.{key}: expected {known[key].type}, got {type(v).__name__}")
            parts[name] = {k: v for k, v in value.items() if k in known}
        if problems:
            raise ConfigError(problems)
        cfg = cls(**{name: SECTIONS[name](**parts.get(name, {})) for name in SECTIONS})
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check(self) -> None:
        """Semantic validation of the assembled configuration."""
        problems = []
        for label, fn in (
            ("data", lambda: self.synthetic().validate() if self.uses_synthetic else None),
            ("encoder/fusion/task", lambda: self.model_config().validate()),
            ("train", lambda: self.train_config(0).validate()),
            ("eval", lambda: self.split_plan().validate()),
        ):
            try:
                fn()
            except (ValueError, TypeError) as exc:
                problems.append(f"{label}: {exc}")
        if self.data.input_kind not in INPUT_KINDS:
            problems.append(f"data.input_kind must be one of {INPUT_KINDS}")
        if self.data.fixations and self.data.raw_gaze:
            problems.append("give data.fixations or data.raw_gaze, not both")
        if not self.uses_synthetic and not self.data.outcomes:
            problems.append("data.outcomes is required with gaze files")
        if not self.uses_synthetic and not self.roi_map.path:
            problems.append("roi_map.path is required with gaze files")
        unknown = [v for v in self.eval.variants if v not in ABLATION_VARIANTS]
        if unknown:
            problems.append(f"eval.variants: unknown {unknown}")
        if problems:
            raise ConfigError(problems)

    @property
    def uses_synthetic(self) -> bool:
        return not (self.data.fixations or self.data.raw_gaze)

    def synthetic(self) -> SyntheticConfig:
        d = self.data
        return SyntheticConfig(d.rows, d.cols, d.sessions, d.min_fix, d.max_fix,
                               d.p_choose, d.dwell_bias, d.locality)

    def model_config(self) -> ModelConfig:
        e, f, t = self.encoder, self.fusion, self.task
        enc = EncoderConfig(d=e.d, n_layers=e.n_layers, n_heads=e.n_heads, ff_mult=e.ff_mult,
                            tie_channel_embeddings=e.tie_channel_embeddings,
                            activation=e.activation, freeze=e.freeze,
                            n_channels=4 if f.channel_grouping == "left_right_eyes" else 2)
        fus = FusionConfig(mode=f.fusion_mode, direction=f.cross_direction,
                           channel_grouping=f.channel_grouping, pooling=f.pooling,
                           co_style=f.co_style, n_heads=f.n_heads, scaled=f.scaled)
        return ModelConfig(enc, fus, self.task_spec(), head_hidden=t.head_hidden, cand_dim=t.cand_dim)

    def task_spec(self) -> TaskSpec:
        t = self.task
        return TaskSpec(t.m, t.class_mode, t.negative_ratio, t.resample_negatives)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, batch_size=t.batch_size, max_epochs=t.max_epochs,
                           patience=t.patience, seed=seed, grid=tuple(t.grid),
                           val_fraction=t.val_fraction, lr_decay=t.lr_decay,
                           plateau_epochs=t.plateau_epochs, lr_floor=t.lr_floor)

    def split_plan(self) -> SplitPlan:
        return SplitPlan(self.eval.repeats, self.eval.test_fraction)

    def experiment(self, seed: int) -> Experiment:
        return Experiment(self.task_spec(), self.train_config(seed), self.model_config(), self.data.max_len)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str] = ()) -> ExperimentConfig:
    """Read the JSON document (or start from defaults) and apply
    ``section.key=value`` overrides, which win over the file."""
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file not found: {p}"])
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{p}: invalid JSON ({exc})"]) from None
    problems = []
    for item in overrides:
        key, eq, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not eq or not dot:
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        doc.setdefault(section, {})[name] = _coerce(value)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig.from_dict(doc)


# --------------------------------------------------------------------- data

def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, ROIMap]:
    """Synthetic data from the seed, or gaze/outcome files plus an ROI map."""
    if cfg.uses_synthetic:
        ds, grid = generate_synthetic(cfg.synthetic(), seed)
        roi = load_roi_map(_existing(cfg.roi_map.path)) if cfg.roi_map.path else grid
        return ds, roi
    roi = load_roi_map(_existing(cfg.roi_map.path))
    if cfg.data.fixations:
        seqs = load_fixations(_existing(cfg.data.fixations))
    else:
        seqs = load_raw_gaze(_existing(cfg.data.raw_gaze))
    outcomes = load_outcomes(_existing(cfg.data.outcomes), single_choice=cfg.data.single_choice)
    return Dataset.join(seqs, outcomes), roi


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _summary(ds: Dataset, roi: ROIMap) -> str:
    return f"N={ds.N} mean_T={ds.mean_length():.2f} J={roi.n_rois}"


# ----------------------------------------------------------------- commands

def cmd_gen(cfg: ExperimentConfig, args) -> int:
    if not cfg.uses_synthetic:
        raise ConfigError(["gen needs a synthetic data section (no gaze file paths)"])
    ds, roi = generate_synthetic(cfg.synthetic(), args.seed)
    out = _out_dir(args)
    write_fixations([g for g, _ in ds.sessions], out / "fixations.csv")
    write_outcomes([u for _, u in ds.sessions], out / "outcomes.csv")
    save_roi_map(roi, out / "roi_map.json")
    print(_summary(ds, roi))
    return 0


def cmd_tokenize(cfg: ExperimentConfig, args) -> int:
    ds, roi = load_data(cfg, args.seed)
    feats = featurize(ds, roi, cfg.data.input_kind, cfg.data.max_len)
    lines = []
    for i, sid in enumerate(feats.session_ids):
        n = int(feats.mask[i].sum())
        chans = [feats.inputs[k, i, :n].tolist() for k in range(feats.inputs.shape[0])]
        lines.append(json.dumps({"session_id": sid, "channels": chans, "mask_len": n}))
    (_out_dir(args) / "tokens.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"tokenized {feats.N} sessions, L={feats.inputs.shape[2]}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    """Train on the training side of the first split; report on its test side."""
    ds, roi = load_data(cfg, args.seed)
    feats = featurize(ds, roi, cfg.data.input_kind, cfg.data.max_len)
    plan = make_splits(ds, replace(cfg.split_plan(), repeats=1), args.seed)
    tr_ids, te_ids = plan.assignments[0]
    task = cfg.task_spec()
    res = train(feats.take(feats.index_of(tr_ids)), task, cfg.train_config(args.seed), cfg.model_config())
    preds = score_sessions(res.params, res.model, feats.take(feats.index_of(te_ids)), task,
                           stream(args.seed, "eval"))
    out = _out_dir(args)
    meta = {"config": cfg.to_dict(), "seed": args.seed, "model": _model_meta(res.model),
            "test_ids": list(te_ids)}
    nn.save_checkpoint(res.params, out / "checkpoint.json", meta)
    (out / "history.csv").write_text(res.history.to_csv(), encoding="utf-8")
    rep = MetricReport(task, [compute_metrics(task, preds)], len(preds.truth))
    (out / "metrics.csv").write_text(report_csv({"train": rep}), encoding="utf-8")
    print(_metric_line(rep))
    return 0


def _model_meta(model: ModelConfig) -> dict:
    return dataclasses.asdict(model)


def _model_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(EncoderConfig(**meta["encoder"]), FusionConfig(**meta["fusion"]),
                       TaskSpec(**meta["task"]),
                       **{k: v for k, v in meta.items() if k not in ("encoder", "fusion", "task")})


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    """Score a saved checkpoint on its recorded test sessions (or all sessions)."""
    if not args.checkpoint:
        raise ConfigError(["eval needs --checkpoint"])
    params, meta = nn.load_checkpoint(_existing(args.checkpoint))
    model = _model_from_meta(meta["model"])
    ds, roi = load_data(cfg, args.seed)
    feats = featurize(ds, roi, cfg.data.input_kind, model.encoder.max_len)
    ids = [s for s in meta.get("test_ids", []) if s in ds] or ds.session_ids
    preds = score_sessions(params, model, feats.take(feats.index_of(ids)), model.task,
                           stream(args.seed, "eval"))
    rep = MetricReport(model.task, [compute_metrics(model.task, preds)], len(preds.truth))
    (_out_dir(args) / "eval.csv").write_text(report_csv({"eval": rep}), encoding="utf-8")
    print(_metric_line(rep))
    return 0


def _ablate_one(job):
    cfg, seed, name, plan = job
    ds, roi = load_data(cfg, seed)
    return run_ablation(ds, roi, [name], plan, seed, cfg.experiment(seed))[name]


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    ds, _ = load_data(cfg, args.seed)
    plan = make_splits(ds, cfg.split_plan(), args.seed)
    jobs = [(cfg, args.seed, name, plan) for name in cfg.eval.variants]
    reports = dict(zip(cfg.eval.variants, _map(_ablate_one, jobs, args.jobs)))
    (_out_dir(args) / "ablation.csv").write_text(report_csv(reports), encoding="utf-8")
    for name, rep in reports.items():
        print(f"{name}: {_metric_line(rep)}")
    return 0


def _slice_one(job):
    cfg, seed, how, values, plan, retrain = job
    ds, roi = load_data(cfg, seed)
    return run_slices(ds, roi, how, values, plan, seed, cfg.experiment(seed),
                      kind=cfg.data.input_kind, retrain=retrain)


def cmd_slice(cfg: ExperimentConfig, args) -> int:
    ds, _ = load_data(cfg, args.seed)
    plan = make_splits(ds, cfg.split_plan(), args.seed)
    retrain = cfg.eval.retrain and not args.no_retrain
    sweeps = {"fraction": cfg.eval.fractions, "time": cfg.eval.windows_s}
    if args.sweep != "both":
        sweeps = {args.sweep: sweeps[args.sweep]}
    jobs = [(cfg, args.seed, how, vals, plan, retrain) for how, vals in sweeps.items()]
    out = _out_dir(args)
    metric = "rmse" if cfg.task.m == "count" else "accuracy"
    for how, curve in zip(sweeps, _map(_slice_one, jobs, args.jobs)):
        (out / f"slice_{how}.csv").write_text(slice_csv(curve), encoding="utf-8")
        (out / f"slice_{how}.svg").write_text(curve_svg(curve, metric, f"{metric} by {how}"),
                                              encoding="utf-8")
        print(f"{how}: {len(curve)} slices")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    """Summarize every report CSV found in the output directory."""
    out = _out_dir(args)
    reports = {}
    for p in sorted(out.glob("*.csv")):
        with open(p, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames and "metric" in reader.fieldnames:
                reports[p.stem] = list(reader)
    if not reports:
        raise FileNotFoundError(f"no report CSVs in {out}")
    lines = []
    for stem, rows in reports.items():
        lines.append(f"## {stem}")
        for r in rows:
            name = r.get("variant") or r.get("slice")
            lines.append(f"{name:>16} {r['metric']:>8} mean={r['mean']} range=[{r['min']}, {r['max']}]")
        lines.append("")
    text = "\n".join(lines)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _metric_line(rep: MetricReport) -> str:
    return " ".join(f"{k}={v.mean:.4f}" for k, v in rep.summary().items())


def _map(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))  # map preserves job order


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


COMMANDS = {
    "gen": cmd_gen,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "slice": cmd_slice,
    "report": cmd_report,
}


def _plan(cfg: ExperimentConfig, args) -> str:
    lines = [f"command: {args.command}", f"seed: {args.seed}", f"out: {args.out}",
             "data: " + ("synthetic" if cfg.uses_synthetic else "files")]
    if args.command == "ablate":
        lines.append(f"variants: {', '.join(cfg.eval.variants)} x {cfg.eval.repeats} repeats")
    if args.command == "slice":
        lines.append(f"fractions: {len(cfg.eval.fractions)}  windows: {cfg.eval.windows_s}")
    lines.append(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    return "\n".join(lines)


def _common_options(defaults: bool) -> argparse.ArgumentParser:
    # the subcommand copy suppresses defaults so it cannot clobber values given
    # before the subcommand name
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="experiment config JSON")
    common.add_argument("--seed", type=int, default=d(0))
    common.add_argument("--out", default=d("out"))
    common.add_argument("--jobs", type=int, default=d(1))
    common.add_argument("--dry-run", action="store_true", default=d(False),
                        help="validate and print the plan only")
    common.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stare", parents=[_common_options(True)])
    sub = p.add_subparsers(dest="command", required=True)
    for_sub = _common_options(False)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[for_sub], help=COMMANDS[name].__doc__)
        if name == "eval":
            sp.add_argument("--checkpoint")
        if name == "slice":
            sp.add_argument("--sweep", choices=("fraction", "time", "both"), default="both")
            sp.add_argument("--no-retrain", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("STARE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.dry_run:
            print(_plan(cfg, args))
            return 0
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, GazeDataError, ROIMapError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
