"""``trendcast`` command line: synth, train, baseline, eval, forecast, ablate.

Exit codes: 0 success, 2 usage/config error, 3 data-integrity error,
4 numerical failure. ``TRENDCAST_THREADS`` caps BLAS/OpenMP threads.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, baselines
from .dataset import (NormStats, Sample, denormalize, interpolate_missing, load_dataset,
                      normalize, prepare, save_dataset)
from .errors import ConfigError, TrendcastError, VocabularyError
from .model import ModelConfig, load_checkpoint
from .relations import load_alpha_override
from .synth import SynthConfig, default_config, synth_generate
from .training import (EvalReport, TrainConfig, evaluate, mape_terms, metric_mae,
                       run_ablation, train)

log = logging.getLogger("trendcast")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)   # path -> sha256
    seed: int = None
    version: str = __version__

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def hash_inputs(*paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[str(q)] = sha256_file(q)
    return out


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_forecast_csv(path, samples, preds, stats=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "element_id", "start", "step", "target", "forecast"])
        for s, p in zip(samples, preds):
            tgt = s.future if stats is None else denormalize(s.future, stats)
            for j, (t, f) in enumerate(zip(tgt, p)):
                w.writerow([s.key[0], s.key[1], s.start, j + 1, repr(float(t)), repr(float(f))])


def _split(prep, name):
    samples = getattr(prep.split, name)
    if not samples:
        raise ConfigError(f"the {name} split is empty for this holdout setting")
    return samples


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    cfg = SynthConfig.load(args.config) if args.config else default_config()
    ds = synth_generate(cfg, args.seed)
    out = save_dataset(ds, args.out)
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n",
                                           encoding="utf-8")
    RunManifest("synth", {"config": cfg.to_dict(), "out": str(args.out)},
                hash_inputs(args.config), args.seed).save(out / "run_manifest.json")
    print(f"wrote {len(ds.series)} series to {out}")


def _model_config(args, ds):
    return ModelConfig(T=args.input_len, T_prime=args.horizon, window=args.window,
                       stride=args.stride, D=args.emb_dim, H=args.hidden,
                       relations=args.relations, attention=args.attention == "on",
                       steps_per_year=ds.steps_per_year)


def cmd_train(args):
    ds = load_dataset(args.data)
    mcfg = _model_config(args, ds)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                       learning_rate=args.lr, grad_clip=args.clip, seed=args.seed,
                       eval_smoothing_k=args.smoothing_k,
                       denormalize_metrics=args.denormalize)
    override = load_alpha_override(args.alpha) if args.alpha else None
    prep = prepare(ds, mcfg.T, mcfg.T_prime, holdout=args.holdout)
    out = _out_dir(args.out)

    def progress(e):
        log.info("epoch %d loss %.5f val %s test %s", e["epoch"], e["train_loss"],
                 e["val_mae"], e["test_mae"])

    res = train(prep, mcfg, tcfg, out, override, progress)
    report = res.report
    report.checkpoint = "checkpoint_selected.json"
    report.extra["holdout"] = args.holdout
    report.save(out / "report.json")
    RunManifest("train", {"model": asdict(mcfg), "train": asdict(tcfg), "holdout": args.holdout,
                          "data": str(args.data), "alpha": args.alpha},
                hash_inputs(args.data, args.alpha), args.seed).save(out / "run_manifest.json")
    sel = res.selection
    print(f"selected epoch {sel.epoch}: test MAE {sel.test_mae:.6f}, MAPE {sel.test_mape:.3f}%")


def cmd_baseline(args):
    ds = load_dataset(args.data)
    prep = prepare(ds, args.input_len, args.horizon, holdout=args.holdout)
    samples = _split(prep, args.split)
    sib = baselines.sibling_sets(prep.values.keys(), ds.elements) if args.method == "var" else None
    preds = baselines.forecast_samples(args.method, samples, prep.values, ds.steps_per_year,
                                       args.order, sib)
    targets = np.stack([s.future for s in samples])
    if args.denormalize:
        preds, targets = denormalize(preds, prep.stats), denormalize(targets, prep.stats)
    mape, excluded = mape_terms(preds, targets)
    per = {}
    for s, p, t in zip(samples, preds, targets):
        per.setdefault("/".join(s.key), []).append(float(np.abs(p - t).mean()))
    config = {"method": args.method, "order": args.order, "T": args.input_len,
              "T_prime": args.horizon, "holdout": args.holdout, "split": args.split,
              "denormalize": args.denormalize}
    report = EvalReport(metric_mae(preds, targets), mape, excluded,
                        {k: float(np.mean(v)) for k, v in sorted(per.items())}, config)
    _emit(args, report, samples, preds, prep.stats if args.denormalize else None)
    if args.out:
        RunManifest("baseline", {**config, "data": str(args.data)},
                    hash_inputs(args.data)).save(Path(args.out).with_suffix(".manifest.json"))


def _emit(args, report, samples, preds, stats):
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.save(args.out)
    if args.csv:
        _write_forecast_csv(args.csv, samples, preds, stats)
    print(f"MAE {report.mae:.6f}  MAPE {report.mape_percent:.3f}%"
          + (f"  ({report.mape_excluded} zero targets excluded)" if report.mape_excluded else ""))


def _checkpoint_prepare(d, ds, holdout=None):
    model_stats = d.get("stats")
    stats = NormStats(model_stats["min"], model_stats["max"]) if model_stats else None
    cfg = ModelConfig.from_dict(d["config"])
    hold = holdout if holdout is not None else d.get("holdout", 6)
    if cfg.steps_per_year != ds.steps_per_year:
        raise ConfigError(f"checkpoint expects {cfg.steps_per_year} steps per year, "
                          f"data has {ds.steps_per_year}")
    return cfg, stats, prepare(ds, cfg.T, cfg.T_prime, holdout=hold, stats=stats)


def cmd_eval(args):
    model, d = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    cfg, stats, prep = _checkpoint_prepare(d, ds, args.holdout)
    samples = _split(prep, args.split)
    report = evaluate(model, samples, prep.stats, args.denormalize)
    report.checkpoint = str(args.checkpoint)
    report.config = {"model": asdict(cfg), "split": args.split,
                     "denormalize": args.denormalize}
    preds = model.predict(model.batch(samples))
    if args.denormalize:
        preds = denormalize(preds, prep.stats)
    _emit(args, report, samples, preds, prep.stats if args.denormalize else None)


def cmd_forecast(args):
    model, d = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    cfg = model.cfg
    try:
        gid, eid = args.series.split("/", 1)
    except ValueError:
        raise ConfigError(f"series key must be GROUP/ELEMENT, got {args.series!r}") from None
    series = ds.series_by_key().get((gid, eid))
    if series is None:
        raise VocabularyError(f"unknown series {args.series!r}")
    if len(series) < cfg.T:
        raise ConfigError(f"series has {len(series)} steps, model needs {cfg.T}")
    st = d.get("stats")
    stats = NormStats(st["min"], st["max"]) if st else NormStats(0.0, 1.0)
    if not series.valid.all():
        series = interpolate_missing(series)
    n = len(series)
    hist = normalize(series.values[n - cfg.T:], stats)
    pos = np.arange(n + cfg.T_prime) % cfg.steps_per_year
    sample = Sample(series.key, n - cfg.T, hist, np.zeros(cfg.T_prime), pos[n - cfg.T:n],
                    pos[n:])
    pred = model.predict(model.batch([sample]))[0]
    raw = denormalize(pred, stats)
    rows = [{"step": n + j, "position": int(pos[n + j]), "forecast": float(raw[j]),
             "forecast_normalized": float(pred[j])} for j in range(cfg.T_prime)]
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    finally:
        if args.out:
            out.close()


def cmd_ablate(args):
    ds = load_dataset(args.data)
    base = _model_config(args, ds)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                       grad_clip=args.clip, eval_smoothing_k=args.smoothing_k,
                       denormalize_metrics=args.denormalize)
    seeds = list(range(args.seeds))

    def progress(axis, label, seed, sel):
        log.info("%s %s seed %d: test MAE %.6f", axis, label, seed, sel.test_mae)

    rows = run_ablation(ds, args.axes, base, tcfg, seeds, args.holdout, progress)
    out = _out_dir(args.out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "label", "mae", "mape"])
        for r in rows:
            w.writerow([r["axis"], r["label"], repr(r["mae"]), repr(r["mape"])])
    RunManifest("ablate", {"model": asdict(base), "train": asdict(tcfg), "axes": args.axes,
                           "seeds": seeds, "holdout": args.holdout, "data": str(args.data)},
                hash_inputs(args.data)).save(out / "run_manifest.json")
    for r in rows:
        print(f"{r['axis']:<11} {r['label']:<8} MAE {r['mae']:.6f}  MAPE {r['mape']:.3f}%")


# -------------------------------------------------------------------- parser

def _model_args(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--input-len", type=int, default=48, help="history length T")
    p.add_argument("--horizon", type=int, default=18, help="forecast length T'")
    p.add_argument("--window", type=int, default=24, help="attention window T_a")
    p.add_argument("--stride", type=int, default=2, help="attention window stride l")
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--emb-dim", type=int, default=10)
    p.add_argument("--relations", choices=("none", "group", "element", "both"), default="both")
    p.add_argument("--attention", choices=("on", "off"), default="on")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--smoothing-k", type=int, default=10)
    p.add_argument("--holdout", type=int, default=6)
    p.add_argument("--denormalize", action="store_true",
                   help="report metrics on the raw scale")


def build_parser():
    ap = argparse.ArgumentParser(prog="trendcast", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="synth config JSON (default: desk config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a forecaster")
    _model_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", help="JSON override of child weights {parent: {child: w}}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="score a classical baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=baselines.METHODS, required=True)
    p.add_argument("--order", type=int, default=baselines.DEFAULT_ORDER)
    p.add_argument("--input-len", type=int, default=48)
    p.add_argument("--horizon", type=int, default=18)
    p.add_argument("--holdout", type=int, default=6)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--denormalize", action="store_true")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="per-step forecast CSV path")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--denormalize", action="store_true")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast the steps after a series' end")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--series", required=True, help="GROUP/ELEMENT")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("ablate", help="run ablation axes over several seeds")
    _model_args(p)
    p.add_argument("--axes", nargs="+", choices=("embeddings", "relations", "attention"),
                   default=["relations"])
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("TRENDCAST_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            try:
                n = int(threads)
            except ValueError:
                raise ConfigError(f"TRENDCAST_THREADS must be an integer, got {threads!r}") \
                    from None
            with threadpool_limits(limits=n):
                args.func(args)
        else:
            args.func(args)
    except TrendcastError as err:
        print(f"trendcast: error: {err}", file=sys.stderr)
        return err.exit_code
    except FloatingPointError as err:
        print(f"trendcast: numerical error: {err}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
