"""Compare the compiled and pure-Python kernel backends.

Times the LSTM pointwise forward/backward kernels, the exponential smoothing
grid search, and one full training step of the desk model under each
backend. Outputs are checked for agreement before timing.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from trendcast import kernels
from trendcast.dataset import prepare
from trendcast.model import ModelConfig, RearModel
from trendcast.relations import Vocab, build_alpha
from trendcast.synth import default_config, synth_generate


def _kernel_cases(rng):
    B, H = 90, 50
    z = rng.normal(size=(B, 4 * H))
    c = rng.normal(size=(B, H))
    dh, dc = rng.normal(size=(B, H)), rng.normal(size=(B, H))
    y = rng.uniform(size=48)
    grid = np.arange(1, 21) * 0.05

    def fwd(mod):
        return mod.lstm_pointwise_forward(z, c)

    def bwd(mod):
        _, _, gates, tc = mod.lstm_pointwise_forward(z, c)
        return lambda: mod.lstm_pointwise_backward(dh, dc, gates, c, tc)

    return {
        "lstm_forward (90x50)": lambda mod: (lambda: fwd(mod)),
        "lstm_backward (90x50)": bwd,
        "ses_sse (48 steps, 20 alphas)": lambda mod: (lambda: mod.ses_sse(y, grid)),
    }


def _train_step():
    ds = synth_generate(default_config(), 0)
    prep = prepare(ds, 48, 18)
    vals = {}
    for key, v in prep.values.items():
        vals.setdefault(key[1], []).append(v[:prep.train_end[key]])
    model = RearModel(ModelConfig(), Vocab.from_dataset(ds), build_alpha(ds.elements, vals))
    by_series = {}
    for s in prep.split.train:
        by_series.setdefault(s.key, s)
    batch = model.batch(list(by_series.values()))
    return lambda: model.loss_and_grads(batch)


def _time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.2:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here")
    ap.add_argument("--skip-train", action="store_true", help="kernels only")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    cases = _kernel_cases(rng)
    results = {}
    for name, make in cases.items():
        outs = {b: make(kernels.get_backend(b))() for b in backends}
        ref = outs["python"]
        for b, out in outs.items():
            for x, r in zip(out if isinstance(out, tuple) else (out,),
                            ref if isinstance(ref, tuple) else (ref,)):
                assert np.allclose(x, r, rtol=1e-12, atol=1e-13), f"{b} disagrees on {name}"
        results[name] = {b: _time(make(kernels.get_backend(b)), args.repeat) for b in backends}

    if not args.skip_train:
        step = _train_step()
        results["train step (B=90, desk model)"] = {}
        for b in backends:
            kernels.set_backend(b)
            results["train step (B=90, desk model)"][b] = _time(step, max(2, args.repeat // 2))

    print(f"{'case':<34}" + "".join(f"{b:>14}" for b in backends) + "    speedup")
    for name, row in results.items():
        cells = "".join(f"{row[b] * 1e6:>12.1f}us" for b in backends)
        speed = f"{row['python'] / row['cython']:>9.2f}x" if "cython" in row else ""
        print(f"{name:<34}{cells}  {speed}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
