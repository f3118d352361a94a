import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from trendcast.dataset import prepare
from trendcast.errors import ConfigError, DataIntegrityError, InvalidArgumentError, NumericalError
from trendcast.model import ModelConfig, load_checkpoint
from trendcast.training import (AdamState, TrainConfig, ablation_cells, adam_step, evaluate,
                                mape_terms, metric_mae, metric_mape, select_model, train)

sys.path.insert(0, str(Path(__file__).parent))
from toy import toy_dataset  # noqa: E402

CFG = ModelConfig(T=6, T_prime=3, D=3, H=4, window=3, stride=1, steps_per_year=8)


def _prep(holdout=2):
    return prepare(toy_dataset(steps=24), 6, 3, holdout=holdout)


# ------------------------------------------------------------------- metrics

def test_metric_examples():
    assert metric_mae([1, 2], [1, 2]) == 0.0 and metric_mape([1, 2], [1, 2]) == 0.0
    assert metric_mae([2], [4]) == 2.0 and metric_mape([2], [4]) == 50.0
    with pytest.raises(InvalidArgumentError):
        metric_mae([], [])
    with pytest.raises(InvalidArgumentError):
        metric_mae([1], [1, 2])


def test_mape_excludes_zero_targets():
    assert mape_terms([1, 3], [0, 2]) == (50.0, 1)
    assert np.isnan(mape_terms([1], [0])[0])


# ----------------------------------------------------------------- optimizer

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(out["w"], p["w"])


def test_adam_constant_gradient_step_is_lr():
    p, st = {"w": np.array([0.0, 0.0])}, AdamState()
    g = {"w": np.array([0.5, -3.0])}
    for _ in range(2000):
        prev = p["w"]
        p = adam_step(p, g, st, 0.01)
    assert np.allclose(prev - p["w"], 0.01 * np.sign(g["w"]), rtol=1e-6)


def test_adam_descends_quadratic():
    x = {"x": np.array(1.0)}
    out = adam_step(x, {"x": 2 * x["x"]}, AdamState(), 0.1)
    assert out["x"] < 1.0


def test_adam_rejects_nan_naming_param():
    with pytest.raises(NumericalError, match="'bad'"):
        adam_step({"bad": np.ones(2)}, {"bad": np.array([1.0, np.nan])}, AdamState(), 0.1)


def test_adam_clips_global_norm():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    g = {"a": np.array([30.0]), "b": np.array([40.0])}
    s1, s2 = AdamState(), AdamState()
    adam_step(p, g, s1, 0.1, grad_clip=5.0)
    adam_step(p, {"a": np.array([3.0]), "b": np.array([4.0])}, s2, 0.1)
    assert np.allclose(s1.m["a"], s2.m["a"]) and np.allclose(s1.m["b"], s2.m["b"])


# ----------------------------------------------------------------- selection

def test_select_monotone_picks_last():
    sel = select_model([5, 4, 3, 2, 1], k=2)
    assert sel.epoch == 5 and sel.val_mae == 1.5


def test_select_window_around_minimum():
    sel = select_model([5, 4, 3, 4, 5, 6], test_mae=[1, 2, 3, 4, 5, 6], k=3)
    # window of epochs 2..4 is centred on the minimum at epoch 3
    assert sel.epoch == 4 and np.isclose(sel.val_mae, 11 / 3) and sel.test_mae == 3.0


def test_select_ignores_later_worse_epochs():
    base = [3, 2.5, 2, 1.8, 1.9, 2.2]
    a = select_model(base, base, base, k=3)
    b = select_model(base + [5, 6, 7], base + [0, 0, 0], base + [0, 0, 0], k=3)
    assert a == b


def test_select_ties_take_earliest():
    assert select_model([1, 1, 1, 1], k=2).epoch == 2


def test_select_short_history_warns(caplog):
    sel = select_model([3, 2], k=5)
    assert sel.epoch == 2 and not sel.smoothed and "fewer than" in caplog.text


# ------------------------------------------------------------------ training

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig.from_dict({"epochs": 3, "unknown": 1}).epochs == 3


def test_zero_learning_rate_keeps_params():
    prep = _prep()
    res = train(prep, CFG, TrainConfig(batch_size=4, epochs=3, learning_rate=0.0))
    from trendcast.model import init_params
    init = init_params(CFG, res.model.vocab, 0)
    assert all(np.array_equal(res.model.params[k], init[k]) for k in init)


def test_training_is_deterministic(tmp_path):
    prep = _prep()
    tc = TrainConfig(batch_size=4, epochs=3, learning_rate=0.01, eval_smoothing_k=2)
    a = train(prep, CFG, tc, out_dir=tmp_path / "a")
    b = train(prep, CFG, tc, out_dir=tmp_path / "b")
    assert [e["train_loss"] for e in a.log] == [e["train_loss"] for e in b.log]
    for f in ("checkpoint_last.json", "checkpoint_selected.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    c = train(prep, CFG, replace(tc, seed=1))
    assert [e["train_loss"] for e in c.log] != [e["train_loss"] for e in a.log]


def test_training_outputs(tmp_path):
    prep = _prep()
    tc = TrainConfig(batch_size=4, epochs=4, learning_rate=0.01, eval_smoothing_k=2)
    res = train(prep, CFG, tc, out_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    first = json.loads(lines[0])
    assert set(first) == {"epoch", "train_loss", "val_mae", "val_mape", "test_mae",
                          "test_mape", "wall_ms"}
    model, raw = load_checkpoint(tmp_path / "checkpoint_selected.json")
    assert raw["epoch"] == res.selection.epoch
    assert all(np.array_equal(model.params[k], res.selected_params[k]) for k in model.params)
    assert raw["stats"] == prep.stats.to_dict()


def test_loss_decreases_on_toy():
    prep = _prep()
    res = train(prep, CFG, TrainConfig(batch_size=6, epochs=15, learning_rate=0.02))
    assert res.log[-1]["train_loss"] < 0.7 * res.log[0]["train_loss"]


def test_empty_training_set():
    prep = _prep()
    prep.split.train = []
    with pytest.raises(DataIntegrityError):
        train(prep, CFG, TrainConfig())


def test_evaluate_denormalizes():
    prep = _prep()
    res = train(prep, CFG, TrainConfig(batch_size=4, epochs=1))
    norm = evaluate(res.model, prep.split.test)
    raw = evaluate(res.model, prep.split.test, prep.stats, denorm=True)
    assert np.isclose(raw.mae, norm.mae * prep.stats.scale, rtol=1e-12)


def test_ablation_cells_enumerate():
    base = ModelConfig(T=48, window=24, stride=2)
    assert [c[0] for c in ablation_cells("relations", base)] == ["V", "V+G", "V+E", "V+G+E"]
    att = ablation_cells("attention", base)
    assert [c[0] for c in att] == ["No Att", "2", "4", "8", "12", "24"]
    assert not att[0][1].attention and att[3][1].stride == 8
    assert len(ablation_cells("embeddings", base)) == 4
    with pytest.raises(ConfigError):
        ablation_cells("colour", base)
