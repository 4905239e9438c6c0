"""Compare the compiled and NumPy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Times conv forward, both backward kernels, the per-sample squared weight
gradient used by the Fisher estimate, and one full SYNERgy step on the
small CNN, under each available backend.
"""
import argparse
import importlib
import os
import sys
import time

import numpy as np


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_timings(backend, repeat):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((64, 8, 16, 16))
    w = rng.standard_normal((16, 8, 3, 3))
    b = rng.standard_normal(16)
    out = backend.conv2d_forward(xp, w, b, 2)
    gout = rng.standard_normal(out.shape)
    return {
        "conv forward": _best(lambda: backend.conv2d_forward(xp, w, b, 2), repeat),
        "grad input": _best(lambda: backend.conv2d_grad_input(gout, w, 16, 16, 2), repeat),
        "grad weight": _best(lambda: backend.conv2d_grad_weight(xp, gout, 3, 3, 2), repeat),
        "per-sample sq grad": _best(lambda: backend.conv2d_sq_grad_weight(xp, gout, 3, 3, 2), repeat),
    }


def step_timing(repeat):
    from synergy_cl import SynergyConfig, build_small_cnn, make_learner
    from synergy_cl.seeding import RunStreams

    rng = np.random.default_rng(1)
    streams = RunStreams.from_seed(0)
    cfg = SynergyConfig(batch_size=32, buffer_size=200, r_f=1.0, r_s=1.0, fisher_batch_size=200)
    learner = make_learner("synergy", build_small_cnn(1, 10, rng=streams.init), cfg, streams)
    x = rng.random((32, 1, 28, 28))
    y = rng.integers(0, 10, 32)
    for _ in range(8):  # fill part of the buffer so replay and Fisher run
        learner.step(x, y)
    return _best(lambda: learner.step(x, y), max(3, repeat // 4))


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    from synergy_cl import kernels

    results = {}
    for name in ("numpy", "cython"):
        try:
            backend = kernels.get_backend(name)
        except ImportError:
            print(f"{name}: not built, skipped")
            continue
        results[name] = kernel_timings(backend, args.repeat)

    names = list(next(iter(results.values())))
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in results) + (f"{'speedup':>10}" if len(results) == 2 else ""))
    for k in names:
        row = f"{k:<20}" + "".join(f"{results[b][k] * 1e3:>10.2f}ms" for b in results)
        if len(results) == 2:
            row += f"{results['numpy'][k] / results['cython'][k]:>9.1f}x"
        print(row)

    # full training step: the backend is chosen at import, so run each in a fresh interpreter state
    for name in results:
        os.environ["SYNERGY_CL_PURE_PYTHON"] = "1" if name == "numpy" else ""
        for mod in [m for m in sys.modules if m.startswith("synergy_cl")]:
            del sys.modules[mod]
        importlib.import_module("synergy_cl")
        print(f"small-CNN SYNERgy step ({name}): {step_timing(args.repeat) * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
