import json
import subprocess
import sys

import pytest
import yaml

from vtsent.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, init_demo, main
from vtsent.dataset import load_manifest, load_split
from vtsent.synthetic import make_dataset, write_manifest


def _config(tmp_path, n=90, **training):
    cfg_path = init_demo(tmp_path / "exp", n=n)
    raw = yaml.safe_load(cfg_path.read_text())
    raw["training"].update({"max_epochs": 8, "pretrain": False, **training})
    raw["fusion"]["mlp_hidden"] = [32, 16]
    cfg_path.write_text(yaml.safe_dump(raw))
    return cfg_path


def _run(cfg, out, command, *extra):
    return main([command, str(cfg), "--out", str(out), *extra])


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def cfg(tmp_path):
    return _config(tmp_path)


def test_preprocess_outputs_and_manifest(cfg, tmp_path):
    out = tmp_path / "out"
    assert _run(cfg, out, "preprocess") == EXIT_OK
    report = json.loads((out / "drop_report.json").read_text())
    assert report["retained"] == 90 and report["dropped_total"] == 0
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["config_hash"] == report["config_hash"]
    assert {"seeds", "backend_versions", "normalization", "outputs", "started", "finished"} <= set(run)
    assert "preprocessed.jsonl" in run["outputs"]


def test_preprocess_counts_polarity_conflict(tmp_path):
    cfg = _config(tmp_path)
    manifest = cfg.parent / "manifest.jsonl"
    with manifest.open("a") as fh:
        fh.write(json.dumps({"id": "conflict", "text": "hm", "image": "c.jpg",
                             "text_label": "positive", "image_label": "negative"}) + "\n")
    assert _run(cfg, tmp_path / "out", "preprocess") == EXIT_OK
    report = json.loads((tmp_path / "out" / "drop_report.json").read_text())
    assert report["dropped"] == {"polarity conflict": 1}


def test_preprocess_idempotent(tmp_path):
    cfg = _config(tmp_path)
    manifest = cfg.parent / "manifest.jsonl"
    manifest.write_text(manifest.read_text().replace("post 1 ", "post @someone http://x.y 🙂 1 "))
    assert _run(cfg, tmp_path / "a", "preprocess") == EXIT_OK
    first = (tmp_path / "a" / "preprocessed.jsonl").read_text()
    assert "@USER HTTPURL :slightly_smiling_face:" in first
    raw = yaml.safe_load(cfg.read_text())
    raw["dataset"]["manifest"] = str(tmp_path / "a" / "preprocessed.jsonl")
    cfg.write_text(yaml.safe_dump(raw))
    assert _run(cfg, tmp_path / "b", "preprocess") == EXIT_OK
    second = (tmp_path / "b" / "preprocessed.jsonl").read_text()
    strip = lambda t: t.split("\n", 1)[1]  # header carries the config hash
    assert strip(first) == strip(second)


def test_preprocess_empty_manifest(tmp_path):
    cfg = _config(tmp_path)
    (cfg.parent / "manifest.jsonl").write_text("")
    assert _run(cfg, tmp_path / "out", "preprocess") == EXIT_OK
    report = json.loads((tmp_path / "out" / "drop_report.json").read_text())
    assert report["retained"] == 0 and report["dropped_total"] == 0
    assert len(load_manifest(tmp_path / "out" / "preprocessed.jsonl")) == 0


def test_preprocess_parse_error_exit(tmp_path, capsys):
    cfg = _config(tmp_path)
    with (cfg.parent / "manifest.jsonl").open("a") as fh:
        fh.write("{broken\n")
    assert _run(cfg, tmp_path / "out", "preprocess") == EXIT_DATA
    err = _error(capsys)
    assert err["error"] == "data" and "line 92" in err["message"]


def test_stats_requires_extract(cfg, tmp_path, capsys):
    assert _run(cfg, tmp_path / "out", "stats") == EXIT_DATA
    assert "extract" in _error(capsys)["message"]


def test_extract_then_stats(cfg, tmp_path):
    out = tmp_path / "out"
    assert _run(cfg, out, "extract") == EXIT_OK
    first = json.loads((out / "extract_report.json").read_text())
    assert first["encode_calls"] == 8 * 90
    assert _run(cfg, out, "extract") == EXIT_OK
    assert json.loads((out / "extract_report.json").read_text())["encode_calls"] == 0
    assert _run(cfg, out, "stats") == EXIT_OK
    stats = json.loads((out / "stats.json").read_text())
    assert sum(stats["counts"].values()) == 90
    assert stats["overall"]["face"] == 100.0  # planted branch is always present
    assert "All" in (out / "stats.txt").read_text()
    assert str(out / "cache") in str(sorted(out.glob("cache/*.shard"))[0])


def test_stats_no_cache(cfg, tmp_path):
    assert _run(cfg, tmp_path / "out", "stats", "--no-cache") == EXIT_OK
    assert not (tmp_path / "out" / "cache").exists()


def test_train_then_eval_matches_best_val_f1(cfg, tmp_path):
    raw = yaml.safe_load(cfg.read_text())
    raw["evaluation"]["part"] = "val"
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "out"
    assert _run(cfg, out, "train") == EXIT_OK
    result = json.loads((out / "train_result.json").read_text())
    assert _run(cfg, out, "eval") == EXIT_OK
    report = json.loads((out / "eval_report.json").read_text())
    assert abs(report["f1"] - result["best_val_f1"]) <= 1e-9
    assert report["config_hash"] == result["config_hash"]
    split = load_split(out / "split.txt")
    assert sum(sum(r) for r in report["confusion"]) == len(split.val_ids)
    log = (out / "train" / "multimodal.metrics.jsonl").read_text().splitlines()
    assert json.loads(log[0])["config_hash"] == result["config_hash"]


def test_train_with_pretraining_and_probe_stage(tmp_path):
    cfg = _config(tmp_path, pretrain=True)
    raw = yaml.safe_load(cfg.read_text())
    out = tmp_path / "out"
    assert _run(cfg, out, "train") == EXIT_OK
    assert (out / "train" / "single_modal_text.ckpt").exists()
    raw["training"] = {"stage": "single_modal_text", "max_epochs": 2}
    cfg.write_text(yaml.safe_dump(raw))
    assert _run(cfg, tmp_path / "probe", "train") == EXIT_OK
    assert json.loads((tmp_path / "probe" / "train_result.json").read_text())["stage"] == "single_modal_text"


def test_eval_without_checkpoint(cfg, tmp_path, capsys):
    assert _run(cfg, tmp_path / "out", "eval") == EXIT_DATA
    assert "checkpoint" in _error(capsys)["message"]


def test_unknown_key_exit_code(cfg, tmp_path, capsys):
    raw = yaml.safe_load(cfg.read_text())
    raw["training"]["warmup"] = 10
    cfg.write_text(yaml.safe_dump(raw))
    assert _run(cfg, tmp_path / "out", "train") == EXIT_CONFIG
    err = _error(capsys)
    assert err["key"] == "training.warmup" and "training.warmup" in err["message"]


def test_cv_emits_fold_reports(tmp_path):
    cfg = _config(tmp_path, n=60, max_epochs=2)
    out = tmp_path / "out"
    assert _run(cfg, out, "cv") == EXIT_OK
    folds = sorted((out / "cv").glob("fold*.json"))
    assert len(folds) == 10 and (out / "cv" / "aggregate.json").exists()
    agg = json.loads((out / "cv" / "aggregate.json").read_text())
    accs = [json.loads(p.read_text())["accuracy"] for p in folds]
    assert abs(agg["mean_accuracy"] - sum(accs) / 10) <= 1e-12


def test_ablate_split(tmp_path):
    cfg = _config(tmp_path, n=60, max_epochs=2)
    raw = yaml.safe_load(cfg.read_text())
    raw["evaluation"]["ablate_branches"] = ["face", "ocr"]
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "out"
    assert _run(cfg, out, "ablate") == EXIT_OK
    rows = [json.loads(x) for x in (out / "ablation.jsonl").read_text().splitlines()]
    assert [r["removed"] for r in rows] == ["full", "face", "ocr"]
    assert rows[0]["delta_accuracy"] == 0.0
    assert "w/o ocr" in (out / "ablation.txt").read_text()


def test_outputs_stay_under_out_root(cfg, tmp_path):
    before = set(p for p in cfg.parent.rglob("*"))
    assert _run(cfg, tmp_path / "out", "extract") == EXIT_OK
    assert set(cfg.parent.rglob("*")) == before


def test_subprocess_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {manifest: m.jsonl, colour: red}\n")
    proc = subprocess.run([sys.executable, "-m", "vtsent.cli", "train", str(bad), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert json.loads(proc.stderr.strip())["error"] == "config"


def test_init_demo(tmp_path):
    cfg = init_demo(tmp_path / "d", n=30)
    assert cfg.exists() and len(load_manifest(cfg.parent / "manifest.jsonl")) == 30
    write_manifest(tmp_path / "m.jsonl", make_dataset(5))


def test_rerun_from_run_manifest(cfg, tmp_path):
    out = tmp_path / "out"
    assert _run(cfg, out, "train") == EXIT_OK
    run = json.loads((out / "run_manifest.json").read_text())
    replay = cfg.parent / "replay.yaml"
    replay.write_text(yaml.safe_dump(run["config"]))
    assert _run(replay, tmp_path / "again", "train") == EXIT_OK
    a = json.loads((out / "train_result.json").read_text())
    b = json.loads((tmp_path / "again" / "train_result.json").read_text())
    assert a["history"] == b["history"] and a["config_hash"] == b["config_hash"]
