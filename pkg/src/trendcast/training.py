"""Optimizer, training loop, metrics, model selection and ablation drivers."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import check_no_leakage, denormalize, prepare
from .errors import ConfigError, DataIntegrityError, InvalidArgumentError, NumericalError
from .model import RearModel, save_checkpoint
from .relations import Vocab, build_alpha

log = logging.getLogger(__name__)

MAPE_EPS = 1e-8


# -------------------------------------------------------------------- metrics

def _pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise InvalidArgumentError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise InvalidArgumentError("cannot score an empty evaluation set")
    return p, t


def metric_mae(preds, targets):
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def mape_terms(preds, targets, eps=MAPE_EPS):
    """MAPE in percent and the number of terms dropped for ``|target| < eps``."""
    p, t = _pair(preds, targets)
    keep = np.abs(t) >= eps
    excluded = int(p.size - keep.sum())
    if not keep.any():
        return float("nan"), excluded
    return float(100.0 * np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep]))), excluded


def metric_mape(preds, targets, eps=MAPE_EPS):
    return mape_terms(preds, targets, eps)[0]


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, grad_clip=None, b1=0.9, b2=0.999, eps=1e-8):
    """One Adam update; returns a new parameter dict and mutates ``state``.

    Gradients are first rescaled so their global norm is at most ``grad_clip``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = 1.0
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / norm
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name] * scale
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# ------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 400
    epochs: int = 30
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    seed: int = 0
    eval_smoothing_k: int = 10
    iterations_per_epoch: int = 0   # 0: enough to draw every training window once on average
    denormalize_metrics: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_smoothing_k < 1:
            raise ConfigError("eval_smoothing_k must be >= 1")

    @classmethod
    def from_dict(cls, d):
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EvalReport:
    mae: float
    mape_percent: float
    mape_excluded: int
    per_series: dict
    config: dict = field(default_factory=dict)
    checkpoint: str = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")


def evaluate(model, samples, stats=None, denorm=False):
    """Score decoder forecasts on ``samples`` (normalized unless ``denorm``)."""
    if not samples:
        raise InvalidArgumentError("no samples to evaluate")
    preds = model.predict(model.batch(samples))
    targets = np.stack([s.future for s in samples])
    if denorm:
        preds, targets = denormalize(preds, stats), denormalize(targets, stats)
    mape, excluded = mape_terms(preds, targets)
    per = {}
    for s, p, t in zip(samples, preds, targets):
        per.setdefault("/".join(s.key), []).append(np.abs(p - t).mean())
    per = {k: float(np.mean(v)) for k, v in sorted(per.items())}
    return EvalReport(metric_mae(preds, targets), mape, excluded, per)


@dataclass
class Selection:
    epoch: int            # last epoch (1-based) of the selected smoothing window
    val_mae: float
    test_mae: float
    test_mape: float
    smoothed: bool


def select_model(val_history, test_mae=None, test_mape=None, k=10, warn=True):
    """Pick the epoch whose trailing ``k``-epoch mean validation MAE is lowest.

    Reported test metrics are the matching trailing means. Ties go to the
    earliest window. With fewer than ``k`` evaluations the last epoch is
    chosen (and a warning logged).
    """
    val = np.asarray(val_history, dtype=np.float64)
    if val.size == 0:
        raise InvalidArgumentError("no validation history")
    test_mae = val * np.nan if test_mae is None else np.asarray(test_mae, dtype=np.float64)
    test_mape = val * np.nan if test_mape is None else np.asarray(test_mape, dtype=np.float64)
    if val.size < k:
        if warn:
            log.warning("only %d evaluations, fewer than k=%d; selecting the last",
                        val.size, k)
        return Selection(int(val.size), float(val[-1]), float(test_mae[-1]),
                         float(test_mape[-1]), False)
    kernel = np.ones(k) / k
    roll = np.convolve(val, kernel, mode="valid")
    j = int(np.argmin(roll))
    sl = slice(j, j + k)
    return Selection(j + k, float(roll[j]), float(test_mae[sl].mean()),
                     float(test_mape[sl].mean()), True)


@dataclass
class TrainResult:
    model: RearModel
    log: list
    selection: Selection
    report: EvalReport
    selected_params: dict


def _series_windows(samples):
    by = {}
    for s in samples:
        by.setdefault(s.key, []).append(s)
    keys = sorted(by)
    return keys, [by[k] for k in keys]


def train(prepared, model_cfg, train_cfg, out_dir=None, alpha_override=None, progress=None):
    """Train one shared model over every series of ``prepared``.

    Each iteration draws ``batch_size`` distinct series (capped at the number
    of series) and one training window from each. Validation and test sets
    are scored after every epoch. With ``out_dir`` the JSONL log, the latest
    and the selected checkpoint are written there.
    """
    split = prepared.split
    if not split.train:
        raise DataIntegrityError("empty training set")
    check_no_leakage(split)
    ds = prepared.dataset
    vocab = Vocab.from_dataset(ds)
    train_vals = {}
    for key, v in prepared.values.items():
        train_vals.setdefault(key[1], []).append(v[:prepared.train_end[key]])
    alpha = build_alpha(ds.elements, train_vals, alpha_override)
    model = RearModel(model_cfg, vocab, alpha, seed=train_cfg.seed)

    keys, windows = _series_windows(split.train)
    limit = {k: prepared.train_end[k] for k in keys}
    n_series = len(keys)
    bsz = min(train_cfg.batch_size, n_series)
    if bsz < train_cfg.batch_size:
        log.info("batch size %d capped at %d series", train_cfg.batch_size, n_series)
    iters = train_cfg.iterations_per_epoch or max(1, -(-len(split.train) // bsz))
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState()
    denorm = train_cfg.denormalize_metrics

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("", encoding="utf-8")
    entries, best, selected_params = [], None, dict(model.params)
    extra = {"stats": prepared.stats.to_dict(), "train": asdict(train_cfg),
             "holdout": prepared.holdout}
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(iters):
            chosen = rng.choice(n_series, size=bsz, replace=False)
            picks = [windows[i][rng.integers(len(windows[i]))] for i in chosen]
            for s in picks:
                if s.target_range[1] > limit[s.key]:
                    raise DataIntegrityError(f"training window {s.key}@{s.start} leaks")
            loss, grads = model.loss_and_grads(model.batch(picks))
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            model.params = adam_step(model.params, grads, state, train_cfg.learning_rate,
                                     train_cfg.grad_clip)
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        for name, samples in (("val", split.validation), ("test", split.test)):
            if samples:
                rep = evaluate(model, samples, prepared.stats, denorm)
                entry[f"{name}_mae"], entry[f"{name}_mape"] = rep.mae, rep.mape_percent
            else:
                entry[f"{name}_mae"] = entry[f"{name}_mape"] = None
        entry["wall_ms"] = round(1000 * (time.perf_counter() - t0), 1)
        entries.append(entry)
        if progress is not None:
            progress(entry)

        # selection is unaffected by later, worse epochs, so track it online
        sel = _select(entries, train_cfg.eval_smoothing_k)
        if best is None or sel.epoch != best.epoch:
            best = sel
            if sel.epoch == epoch:
                selected_params = dict(model.params)
                if out is not None:
                    save_checkpoint(model, out / "checkpoint_selected.json",
                                    {**extra, "epoch": epoch})
        if out is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            save_checkpoint(model, out / "checkpoint_last.json", {**extra, "epoch": epoch})

    selection = _select(entries, train_cfg.eval_smoothing_k, warn=True)
    test_rep = None
    if split.test:
        test_rep = evaluate(model, split.test, prepared.stats, denorm)
        test_rep.config = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
        test_rep.extra = {"selection": asdict(selection), "final_epoch": train_cfg.epochs,
                          "evaluated_every_epoch_from": 1}
    return TrainResult(model, entries, selection, test_rep, selected_params)


def _select(entries, k, warn=False):
    # without a validation set (holdout 1) selection falls back to test MAE
    val = [e["val_mae"] if e["val_mae"] is not None else e["test_mae"] for e in entries]
    return select_model(val, [e["test_mae"] for e in entries],
                        [e["test_mape"] for e in entries], k=k, warn=warn)


# ------------------------------------------------------------------- ablation

EMBEDDING_CELLS = {"all": {}, "w/o ele": {"use_element": False},
                   "w/o grp": {"use_group": False}, "w/o time": {"use_time": False}}
RELATION_CELLS = {"V": "none", "V+G": "group", "V+E": "element", "V+G+E": "both"}
STRIDE_CELLS = ("No Att", 2, 4, 8, 12, 24)


def ablation_cells(axis, base):
    """``(label, ModelConfig)`` pairs for one ablation axis."""
    if axis == "embeddings":
        return [(k, replace(base, **v)) for k, v in EMBEDDING_CELLS.items()]
    if axis == "relations":
        # relation comparisons run without attention so the relation effect
        # is not mixed with the attention stack
        return [(k, replace(base, relations=v, attention=False))
                for k, v in RELATION_CELLS.items()]
    if axis == "attention":
        return [(s, replace(base, attention=False)) if s == "No Att"
                else (str(s), replace(base, attention=True, stride=s)) for s in STRIDE_CELLS]
    raise ConfigError(f"unknown ablation axis {axis!r}")


def run_ablation(dataset, axes, base_cfg, train_cfg, seeds=(0, 1, 2, 3, 4), holdout=6,
                 progress=None):
    """Train every cell of every axis for each seed; returns table rows.

    Each row carries the per-seed selected test MAE/MAPE and their means.
    """
    prep = prepare(dataset, base_cfg.T, base_cfg.T_prime, holdout=holdout)
    rows = []
    for axis in axes:
        for label, cfg in ablation_cells(axis, base_cfg):
            maes, mapes = [], []
            for seed in seeds:
                res = train(prep, cfg, replace(train_cfg, seed=seed))
                maes.append(res.selection.test_mae)
                mapes.append(res.selection.test_mape)
                if progress is not None:
                    progress(axis, label, seed, res.selection)
            rows.append({"axis": axis, "label": label, "mae": float(np.mean(maes)),
                         "mape": float(np.mean(mapes)), "mae_per_seed": maes,
                         "mape_per_seed": mapes})
    return rows
