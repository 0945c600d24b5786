import json

import numpy as np
import pytest
import torch

from helpers_data import planted
from vtsent.dataset import make_split
from vtsent.errors import ConfigError, DataError
from vtsent.fusion import ModelSpec, ProbeSpec, build_model, load_checkpoint, save_checkpoint
from vtsent.training import (
    EpochRecord, FeatureTable, TrainConfig, TrainingDivergedError, default_config, init_from_pretrained,
    select_checkpoint, should_stop, train_pipeline, train_stage,
)


@pytest.fixture(scope="module")
def data():
    ds, table, _ = planted(120, seed=1)
    split = make_split(ds, 0.15, 0.15, seed=0)
    return ds, table.select(split.train_ids), table.select(split.val_ids)


def _spec(table, head="mlp", **kw):
    extra = dict(mlp_hidden=(32, 16)) if head == "mlp" else dict(pad_width=16, layers=1, heads=2)
    return ModelSpec(table.dims, 3, head, **{**extra, **kw})


# -- configuration ----------------------------------------------------------

def test_default_configs_exact():
    img = default_config("single_modal_image", "mvsa")
    assert (img.learning_rate, img.batch_size, img.max_epochs) == (1e-4, 32, 20)
    txt = default_config("single_modal_text", "tumemo")
    assert (txt.learning_rate, txt.batch_size, txt.max_epochs) == (5e-5, 64, 20)
    mm = default_config("multimodal", "mvsa")
    assert (mm.learning_rate, mm.batch_size, mm.max_epochs, mm.patience, mm.dropout) == (5e-6, 16, 30, 3, 0.5)
    assert default_config("multimodal", "tumemo").learning_rate == 1e-5
    assert default_config("multimodal", "mvsa-single").learning_rate == 5e-6
    assert mm.weight_decay == 0.01


def test_default_config_unknown_corpus():
    with pytest.raises(ConfigError):
        default_config("multimodal", "imdb")


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(patience=0), dict(max_epochs=0),
                                dict(stage="pretrain")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- early stopping and checkpoint selection --------------------------------

def _first_stop(losses, patience=3):
    for e in range(1, len(losses) + 1):
        if should_stop(losses[:e], patience):
            return e
    return None


def test_should_stop_examples():
    assert _first_stop([1.0, 0.9, 0.91, 0.92, 0.93]) == 5
    assert not should_stop([1.0, 0.9, 0.91, 0.92])
    assert not should_stop([1.0, 0.9, 0.8])
    assert _first_stop([1.0, 1.0, 1.0, 1.0]) == 4


def test_should_stop_counter_resets():
    assert _first_stop([1.0, 1.1, 1.2, 0.5, 0.6, 0.7, 0.8]) == 7


def test_should_stop_tolerance():
    assert should_stop([1.0, 0.9999, 0.9998, 0.9997], tolerance=1e-3)
    assert not should_stop([1.0, 0.9999, 0.9998, 0.9997])


def test_should_stop_matches_counter_simulation(rng):
    for _ in range(300):
        losses = list(rng.integers(0, 5, int(rng.integers(1, 12))).astype(float))
        best, stale, expected = losses[0], 0, False
        for loss in losses[1:]:
            if loss < best:
                best, stale = loss, 0
            else:
                stale += 1
        expected = stale >= 3
        assert should_stop(losses) == expected


def test_select_checkpoint():
    assert select_checkpoint([0.5, 0.7, 0.6]) == 2
    assert select_checkpoint([0.6, 0.6]) == 1
    assert select_checkpoint([0.3]) == 1
    hist = [EpochRecord(i + 1, 1.0, 1.0, 0.5, f) for i, f in enumerate([0.2, 0.9, 0.9])]
    assert select_checkpoint(hist) == 2


# -- train_stage ------------------------------------------------------------

def _cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=16, max_epochs=30, patience=3, dropout=0.5, seed=0)
    return TrainConfig(**{**base, **kw})


def test_planted_training_reaches_95(data):
    _, train, val = data
    model = build_model(_spec(train), seed=0)
    res = train_stage(model, train, val, _cfg(), 3)
    assert res.best.val_accuracy >= 0.95
    assert len(res.history) <= 30


def test_train_loss_decreases(data):
    _, train, val = data
    model = build_model(_spec(train), seed=0)
    res = train_stage(model, train, val, _cfg(max_epochs=10, early_stopping=False), 3)
    assert len(res.history) == 10
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_deterministic_history(data):
    _, train, val = data
    runs = []
    for _ in range(2):
        model = build_model(_spec(train, "transformer"), seed=3)
        res = train_stage(model, train, val, _cfg(max_epochs=4, seed=3), 3)
        runs.append((res.history, [p.detach().clone() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_scripted_plateau_stops_at_predicted_epoch(data):
    _, train, val = data
    script = [1.0, 0.9, 0.91, 0.92, 0.93, 0.5, 0.4]
    calls = []

    def evaluator(model, table):
        calls.append(1)
        return script[len(calls) - 1], table.labels.copy()

    model = build_model(_spec(train), seed=0)
    res = train_stage(model, train, val, _cfg(), 3, evaluator=evaluator)
    assert res.stopped_early and len(res.history) == 5 and len(calls) == 5


def test_best_f1_checkpoint_restored(data, tmp_path):
    _, train, val = data
    labels = val.labels
    wrong = (labels + 1) % 3
    n = len(labels)
    # epoch 2 has the most correct predictions
    scripted = [np.where(np.arange(n) < k, labels, wrong) for k in (n // 2, n - 1, n // 3, n // 4)]
    snapshots = []

    def evaluator(model, table):
        snapshots.append({k: v.clone() for k, v in model.state_dict().items()})
        return 1.0, scripted[len(snapshots) - 1]

    model = build_model(_spec(train), seed=0)
    res = train_stage(model, train, val, _cfg(max_epochs=4, early_stopping=False), 3, evaluator=evaluator,
                      checkpoint_path=tmp_path / "best.ckpt", log_path=tmp_path / "log.jsonl",
                      meta={"run": "t"})
    assert res.best_epoch == 2
    assert all(torch.equal(model.state_dict()[k], v) for k, v in snapshots[1].items())
    ckpt = load_checkpoint(tmp_path / "best.ckpt")
    assert ckpt.meta["best_epoch"] == 2
    for k, v in snapshots[1].items():
        assert np.array_equal(ckpt.tensors[k], v.numpy())
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2, 3, 4] and lines[0]["run"] == "t"
    assert all(res.best.val_f1 >= h.val_f1 for h in res.history)


def test_empty_train_set(data):
    _, train, val = data
    model = build_model(_spec(train), seed=0)
    with pytest.raises(DataError):
        train_stage(model, train.subset([]), val, _cfg(), 3)


def test_nonfinite_loss_aborts(data):
    _, train, val = data
    model = build_model(_spec(train), seed=0)
    with torch.no_grad():
        model.head.fc3.bias.fill_(float("inf"))
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train_stage(model, train, val, _cfg(), 3)


# -- pretrained initialization ----------------------------------------------

def _probe_ckpt(tmp_path, branch, dim, seed=5):
    probe = build_model(ProbeSpec(branch, dim, 3), seed=seed)
    with torch.no_grad():
        for p in probe.parameters():
            p.add_(0.123)
    return save_checkpoint(tmp_path / f"{branch}.ckpt", probe, seed), probe


def test_init_from_pretrained_copies(tmp_path, data):
    _, train, _ = data
    dims = train.dims
    path, probe = _probe_ckpt(tmp_path, "text_main", dims[0])
    model = build_model(_spec(train), seed=0)
    head_before = {k: v.clone() for k, v in model.head.state_dict().items()}
    init_from_pretrained(model, {"text_main": path})
    assert torch.equal(model.adapters["text_main"].proj.weight, probe.adapter.proj.weight)
    assert torch.equal(model.adapters["text_main"].proj.bias, probe.adapter.proj.bias)
    assert all(torch.equal(model.head.state_dict()[k], v) for k, v in head_before.items())


def test_init_from_pretrained_mismatch_named(tmp_path, data):
    _, train, _ = data
    path, _ = _probe_ckpt(tmp_path, "image_main", train.dims[1] + 1)
    model = build_model(_spec(train), seed=0)
    with pytest.raises(DataError, match="adapter.proj.weight"):
        init_from_pretrained(model, {"image_main": path})


def test_init_from_pretrained_missing_warns(tmp_path, data, caplog):
    _, train, _ = data
    model = build_model(_spec(train), seed=0)
    fresh = {k: v.clone() for k, v in model.state_dict().items()}
    with caplog.at_level("WARNING"):
        init_from_pretrained(model, {"text_main": tmp_path / "missing.ckpt"})
    assert "text_main" in caplog.text and "image_main" in caplog.text
    assert all(torch.equal(model.state_dict()[k], v) for k, v in fresh.items())


def test_two_stage_pipeline(tmp_path, data):
    _, train, val = data
    singles = {s: TrainConfig(s, 1e-3, 32, 3, early_stopping=False) for s in
               ("single_modal_image", "single_modal_text")}
    res = train_pipeline(train, val, _spec(train), _cfg(max_epochs=5), singles, tmp_path)
    assert set(res.single_modal) == set(singles)
    for stage in ("single_modal_image", "single_modal_text", "multimodal"):
        assert (tmp_path / f"{stage}.ckpt").exists()
        assert (tmp_path / f"{stage}.metrics.jsonl").exists()
    assert res.multimodal.best.val_accuracy > 0.5


def test_pipeline_initializes_adapters_from_probe(data):
    _, train, val = data
    singles = {"single_modal_text": TrainConfig("single_modal_text", 1e-3, 32, 2, early_stopping=False)}
    spec = _spec(train)
    res = train_pipeline(train, val, spec, _cfg(max_epochs=1, learning_rate=1e-12), singles)
    probe_state = res.single_modal["single_modal_text"].best_state
    w = res.model.adapters["text_main"].proj.weight.detach()
    # a near-zero learning rate leaves the copied weights (almost) untouched
    assert torch.allclose(w, probe_state["adapter.proj.weight"], atol=1e-9)


def test_feature_table_requires_samples():
    with pytest.raises(DataError):
        FeatureTable.from_bundles([], [])
