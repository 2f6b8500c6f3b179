import csv
import json

import pytest

from stare.cli import ConfigError, load_config, main

TINY = [
    "--set", "data.sessions=12", "--set", "data.rows=2", "--set", "data.cols=3",
    "--set", "data.min_fix=4", "--set", "data.max_fix=8", "--set", "data.p_choose=0.3",
    "--set", "encoder.d=8", "--set", "encoder.n_layers=1", "--set", "encoder.n_heads=1",
    "--set", "task.head_hidden=8", "--set", "task.cand_dim=4",
    "--set", "train.max_epochs=2", "--set", "train.batch_size=8",
    "--set", "eval.repeats=1",
]


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_writes_three_files_and_summary(tmp_path, capsys):
    assert run("gen", "--out", tmp_path, "--seed", 3, *TINY) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["fixations.csv", "outcomes.csv", "roi_map.json"]
    line = capsys.readouterr().out.strip()
    with open(tmp_path / "fixations.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_sessions = len({r["session_id"] for r in rows})
    assert line == f"N={n_sessions} mean_T={len(rows) / n_sessions:.2f} J=6"


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("gen", "--out", a, *TINY)
    run("gen", "--out", b, *TINY)
    for name in ("fixations.csv", "outcomes.csv", "roi_map.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert run("train", "--dry-run", "--out", out, *TINY) == 0
    assert not out.exists()
    assert "command: train" in capsys.readouterr().out


def test_missing_roi_map_is_named(tmp_path, capsys):
    run("gen", "--out", tmp_path, *TINY)
    cfg = {"data": {"fixations": str(tmp_path / "fixations.csv"), "outcomes": str(tmp_path / "outcomes.csv")},
           "roi_map": {"path": str(tmp_path / "nope.json")}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run("tokenize", "--config", path, "--out", tmp_path / "t") != 0
    assert "nope.json" in capsys.readouterr().err


def test_every_bad_key_reported(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"data": {"rowz": 3, "rows": "eight"}, "fusion": {"mode": "x"}, "extra": {}}))
    assert run("train", "--config", path) == 2
    err = capsys.readouterr().err
    for needle in ("data.rowz", "data.rows", "fusion.mode", "'extra'"):
        assert needle in err


def test_semantic_errors_collected():
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["data.dwell_bias=1", "train.lr=0", "fusion.fusion_mode=gated"])
    assert len(exc.value.problems) == 3


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"lr": 0.1}}))
    assert load_config(str(path), ["train.lr=0.002"]).train.lr == 0.002
    with pytest.raises(ConfigError):
        load_config(None, ["lr=1"])


def test_seed_before_or_after_subcommand(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("--seed", 7, "gen", "--out", a, *TINY)
    run("gen", "--seed", 7, "--out", b, *TINY)
    assert (a / "fixations.csv").read_bytes() == (b / "fixations.csv").read_bytes()


def test_tokenize_jsonl(tmp_path):
    assert run("tokenize", "--out", tmp_path, *TINY) == 0
    lines = (tmp_path / "tokens.jsonl").read_text().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[0])
    assert set(rec) == {"session_id", "channels", "mask_len"}
    assert len(rec["channels"]) == 2 and len(rec["channels"][0]) == rec["mask_len"]
    assert rec["channels"][0][-1] == 1  # EOS


def test_train_eval_report(tmp_path, capsys):
    assert run("train", "--out", tmp_path, *TINY) == 0
    for name in ("checkpoint.json", "history.csv", "metrics.csv"):
        assert (tmp_path / name).exists()
    assert run("eval", "--checkpoint", tmp_path / "checkpoint.json", "--out", tmp_path, *TINY) == 0
    train_rows = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
    eval_rows = (tmp_path / "eval.csv").read_text().splitlines()[1:]
    assert [r.split(",", 1)[1] for r in train_rows] == [r.split(",", 1)[1] for r in eval_rows]
    assert run("report", "--out", tmp_path) == 0
    assert "## metrics" in (tmp_path / "summary.txt").read_text()


def test_report_skips_data_files(tmp_path):
    run("gen", "--out", tmp_path, *TINY)
    assert run("train", "--out", tmp_path, *TINY) == 0
    assert run("report", "--out", tmp_path) == 0
    summary = (tmp_path / "summary.txt").read_text()
    assert "## metrics" in summary and "fixations" not in summary


def test_report_without_reports_fails(tmp_path):
    run("gen", "--out", tmp_path, *TINY)
    assert run("report", "--out", tmp_path) == 1


def test_eval_needs_checkpoint(tmp_path):
    assert run("eval", "--out", tmp_path, *TINY) == 2


def test_ablate_six_variants(tmp_path):
    assert run("ablate", "--out", tmp_path, *TINY) == 0
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    variants = ["RawSeq", "TokenOnly", "TokenROI", "TokenROI_Cross", "TokenROI_Co", "STARE"]
    assert list(dict.fromkeys(r["variant"] for r in rows)) == variants
    acc = [r for r in rows if r["metric"] == "accuracy"]
    assert len(acc) == 6 and all(r["n_repeats"] == "1" for r in acc)


def test_slice_both_sweeps(tmp_path):
    fr = "--set", "eval.fractions=[0.5,1.0]"
    assert run("slice", "--out", tmp_path, "--no-retrain", *TINY, *fr) == 0
    frac = (tmp_path / "slice_fraction.csv").read_text().splitlines()
    assert frac[0] == "slice,metric,mean,min,max" and any(l.startswith("0.50,accuracy") for l in frac)
    time_rows = (tmp_path / "slice_time.csv").read_text().splitlines()
    assert {l.split(",")[0] for l in time_rows[1:]} == {"1s", "2s", "5s", "8s", "10s"}
    assert (tmp_path / "slice_time.svg").read_text().startswith("<svg")
