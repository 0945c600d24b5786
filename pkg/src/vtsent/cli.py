"""Command-line entry point: preprocess, stats, extract, train, eval, ablate, cv.

Every command reads one configuration file and writes under ``--out``; a
``run_manifest.json`` there records the config hash, seeds, backend versions
and normalization policy that produced the artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .config import RunConfig, example_config, load_config
from .dataset import (Dataset, compute_stats, load_manifest, load_split, make_folds, make_split,
                      save_foldplan, save_manifest, save_split, with_normalized_text)
from .encoders import BRANCH_INDEX, BRANCHES
from .errors import ConfigError, DataError, VtsentError
from .evaluation import (Experiment, cross_validate, format_ablation_table, format_cv_table, run_ablation,
                         write_jsonl)
from .featurestore import FeatureStore, load_bundles, materialize_bundles
from .fusion import ProbeSpec, build_model, load_checkpoint, model_from_checkpoint
from .metrics import compute_metrics
from .textnorm import normalize
from .training import STAGE_BRANCH, FeatureTable, TrainResult, evaluate_model, train_pipeline, train_stage

logger = logging.getLogger("vtsent")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class Run:
    """Shared state for one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, no_cache: bool):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.no_cache = no_cache
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> dict:
        return {"run_manifest": "run_manifest.json", "config_hash": self.cfg.hash}

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p.relative_to(self.out)))
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({**payload, **self.stamp}, indent=2, sort_keys=True), encoding="utf-8")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(f"# config {self.cfg.hash}\n{text}\n", encoding="utf-8")
        return p

    def dataset(self) -> Dataset:
        ds = load_manifest(self.cfg.manifest_path, self.cfg.dataset.get("corpus"))
        policy = self.cfg.normalization
        return with_normalized_text(ds, lambda t: normalize(t, policy))

    def store(self) -> FeatureStore | None:
        if self.no_cache:
            return None
        return FeatureStore(self.cfg.cache_dir or self.out / "cache")

    def bundles(self, ds: Dataset) -> dict:
        result = materialize_bundles(self.store(), ds, self.cfg.registry())
        logger.info("features: %d encoded, %d from cache", result.encode_calls, result.cache_hits)
        return result.bundles

    def table(self, ds: Dataset) -> FeatureTable:
        bundles = self.bundles(ds)
        return FeatureTable.from_bundles([bundles[s] for s in ds.ids], ds.labels)

    def split(self, ds: Dataset):
        d = self.cfg.dataset
        return make_split(ds, float(d.get("val_fraction", 0.1)), float(d.get("test_fraction", 0.1)),
                          int(d.get("split_seed", 0)))

    def experiment(self, ds: Dataset, table: FeatureTable) -> Experiment:
        cfg = self.cfg
        return Experiment(ds, table, cfg.model_spec(table.dims, ds.num_classes), cfg.train_config(),
                          cfg.pretrain_configs(), float(cfg.dataset.get("val_fraction", 0.1)))

    def finish(self) -> None:
        cfg = self.cfg
        manifest = {
            "command": self.command,
            "config_hash": cfg.hash,
            "config": cfg.raw,
            "seeds": {"training": cfg.seed, "split": int(cfg.dataset.get("split_seed", 0)),
                      "folds": int(cfg.dataset.get("fold_seed", cfg.dataset.get("split_seed", 0)))},
            "backend_versions": cfg.backend_versions(),
            "normalization": cfg.normalization.to_dict(),
            "no_cache": self.no_cache,
            "outputs": self.outputs,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str),
                                                     encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_preprocess(run: Run) -> None:
    ds = run.dataset()
    save_manifest(ds, run.path("preprocessed.jsonl"), run.stamp)
    report = {"retained": len(ds), "dropped": dict(ds.dropped), "dropped_total": sum(ds.dropped.values()),
              "class_counts": {ds.class_names[c]: n for c, n in sorted(Counter(ds.labels.tolist()).items())}}
    run.write_json("drop_report.json", report)
    print(json.dumps(report))


def cmd_extract(run: Run) -> None:
    ds = run.dataset()
    result = materialize_bundles(run.store(), ds, run.cfg.registry(), keep_going=True)
    report = {"samples": len(ds), "bundles": len(result.bundles), "encode_calls": result.encode_calls,
              "cache_hits": result.cache_hits, "errors": {k: str(v) for k, v in result.errors.items()}}
    run.write_json("extract_report.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "errors"} | {"errors": len(result.errors)}))
    if result.errors:
        raise DataError(f"{len(result.errors)} samples failed feature extraction; see extract_report.json")


def cmd_stats(run: Run) -> None:
    ds = run.dataset()
    store = run.store()
    if store is None:
        bundles = run.bundles(ds)
    else:
        bundles = load_bundles(store, ds, run.cfg.backend_versions())
    stats = compute_stats(ds, bundles)
    run.write_json("stats.json", stats.to_dict())
    table = stats.format_table()
    run.write_text("stats.txt", table)
    print(table)


def _train_probe(run: Run, ds: Dataset, table: FeatureTable, split) -> TrainResult:
    cfg = run.cfg.train_config()
    branch = STAGE_BRANCH[cfg.stage]
    model = build_model(ProbeSpec(branch, table.dims[BRANCH_INDEX[branch]], ds.num_classes, cfg.dropout),
                        cfg.seed)
    res = train_stage(model, table.select(split.train_ids), table.select(split.val_ids), cfg, ds.num_classes,
                      log_path=run.path("train", f"{cfg.stage}.metrics.jsonl"),
                      checkpoint_path=run.path("train", "model.ckpt"), meta={"config_hash": run.cfg.hash})
    return res


def cmd_train(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    save_split(split, run.path("split.txt"), run.stamp)
    table = run.table(ds)
    cfg = run.cfg.train_config()
    if cfg.stage == "multimodal":
        exp = run.experiment(ds, table)
        res = train_pipeline(table.select(split.train_ids), table.select(split.val_ids), exp.spec, cfg,
                             exp.single_modal, run.out / "train", meta={"config_hash": run.cfg.hash})
        for stage in [*exp.single_modal, "multimodal"]:
            run.outputs += [f"train/{stage}.metrics.jsonl", f"train/{stage}.ckpt"]
        mm = res.multimodal
        final = run.path("train", "model.ckpt")
        final.write_bytes(Path(mm.checkpoint).read_bytes())
    else:
        mm = _train_probe(run, ds, table, split)
    payload = {
        "stage": cfg.stage,
        "history": [h.to_dict() for h in mm.history],
        "best_epoch": mm.best_epoch,
        "best_val_f1": mm.best.val_f1,
        "best_val_accuracy": mm.best.val_accuracy,
        "stopped_early": mm.stopped_early,
        "checkpoint": "train/model.ckpt",
    }
    run.write_json("train_result.json", payload)
    print(json.dumps({k: payload[k] for k in ("best_epoch", "best_val_f1", "best_val_accuracy", "stopped_early")}))


def cmd_eval(run: Run) -> None:
    ckpt_path = run.out / "train" / "model.ckpt"
    split_path = run.out / "split.txt"
    if not ckpt_path.exists() or not split_path.exists():
        raise DataError(f"missing checkpoint or split under {run.out}; run 'train' first")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.meta.get("config_hash") not in (None, run.cfg.hash):
        logger.warning("checkpoint was produced by config %s, evaluating with %s",
                       ckpt.meta.get("config_hash"), run.cfg.hash)
    model = model_from_checkpoint(ckpt)
    ds = run.dataset()
    split = load_split(split_path)
    part = run.cfg.evaluation.get("part", "test")
    table = run.table(ds).select(split.part(part))
    loss, preds = evaluate_model(model, table)
    report = compute_metrics(preds, table.labels, ds.num_classes)
    f1_kind = run.cfg.evaluation.get("f1", "weighted")
    run.write_json("eval_report.json", {"part": part, "loss": loss, "f1_average": f1_kind,
                                        "f1": report.f1(f1_kind), **report.to_dict()})
    print(json.dumps({"part": part, "accuracy": report.accuracy, "f1": report.f1(f1_kind)}))


def _plan(run: Run, ds: Dataset):
    d = run.cfg.dataset
    return make_folds(ds, int(d.get("folds", 10)), int(d.get("fold_seed", d.get("split_seed", 0))))


def cmd_ablate(run: Run) -> None:
    ds = run.dataset()
    exp = run.experiment(ds, run.table(ds))
    branches = run.cfg.evaluation.get("ablate_branches") or [b for b in BRANCHES if b not in exp.spec.ablated]
    if run.cfg.evaluation.get("protocol", "split") == "cv":
        protocol = _plan(run, ds)
        save_foldplan(protocol, run.path("folds.txt"), run.stamp)
    else:
        protocol = run.split(ds)
        save_split(protocol, run.path("split.txt"), run.stamp)
    rows = run_ablation(exp, branches, protocol)
    write_jsonl(run.path("ablation.jsonl"), [{**r.to_dict(), **run.stamp} for r in rows])
    table = format_ablation_table(rows)
    run.write_text("ablation.txt", table)
    print(table)


def cmd_cv(run: Run) -> None:
    ds = run.dataset()
    plan = _plan(run, ds)
    save_foldplan(plan, run.path("folds.txt"), run.stamp)
    exp = run.experiment(ds, run.table(ds))
    report = cross_validate(plan, exp)
    for i, fold in enumerate(report.folds):
        run.write_json(f"cv/fold{i}.json", {"fold": i, **fold.to_dict()})
    run.write_json("cv/aggregate.json", report.summary())
    table = format_cv_table(report)
    run.write_text("cv.txt", table)
    print(table)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "stats": cmd_stats,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cv": cmd_cv,
}


def init_demo(target: Path, n: int = 200, seed: int = 0) -> Path:
    """Write a synthetic manifest and a stub-backed config into ``target``."""
    from .synthetic import make_dataset, write_manifest

    target.mkdir(parents=True, exist_ok=True)
    write_manifest(target / "manifest.jsonl", make_dataset(n, seed=seed))
    cfg_path = target / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(example_config("manifest.jsonl"), sort_keys=False), encoding="utf-8")
    return cfg_path


def _error(code: int, kind: str, message: str, key: str | None = None) -> int:
    payload = {"error": kind, "exit_code": code, "message": message}
    if key:
        payload["key"] = key
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="vtsent", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=[*COMMANDS, "init-demo"])
    parser.add_argument("config", type=Path, help="run configuration (YAML); for init-demo, a target directory")
    parser.add_argument("--out", type=Path, default=None, help="output root (default: runs/<config name>)")
    parser.add_argument("--no-cache", action="store_true", help="bypass the feature store")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-demo":
        print(init_demo(args.config))
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        out = args.out or Path("runs") / args.config.stem
        run = Run(args.command, cfg, out, args.no_cache)
        COMMANDS[args.command](run)
        run.finish()
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc), exc.key)
    except DataError as exc:
        return _error(EXIT_DATA, "data", str(exc))
    except VtsentError as exc:
        return _error(EXIT_RUNTIME, "runtime", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        logger.debug("unhandled error", exc_info=True)
        return _error(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
