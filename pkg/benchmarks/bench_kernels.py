"""Time the numpy and numba flavours of each kernel in ``hetseg.kernels``.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba column is blank when numba is not installed. Compilation is
excluded by one warm-up call.
"""
import argparse
import time

import numpy as np

from hetseg import kernels
from hetseg._accel import HAVE_NUMBA


def _cases(rng):
    # neighbour-vote fill on a 64^3 labelled shell volume with small holes
    g = np.indices((64, 64, 64)).astype(float) - 31.5
    r = np.sqrt((g ** 2).sum(0)) / 32
    mask = np.digitize(r, [0.6, 0.8, 1.0]).astype(np.uint8)
    mask = np.where(r < 1.0, 3 - mask, 0).astype(np.uint8)
    holes = (rng.random(mask.shape) < 0.01) & (mask == 3)
    mask[holes] = 4
    fill = np.zeros(5, bool)
    fill[4] = True
    donor = np.array([False, True, True, True, False])
    yield "fill_by_neighbour_vote", (mask, fill, donor)

    ranks = rng.integers(1, 41, 20).astype(np.int64)
    yield "signed_rank_counts", (ranks,)

    pred = rng.integers(0, 5, 64 ** 3).astype(np.int64)
    truth = rng.integers(0, 5, 64 ** 3).astype(np.int64)
    yield "confusion_counts", (pred, truth, 5)

    logits = rng.normal(size=(5, 32 ** 3))
    probs = np.exp(logits) / np.exp(logits).sum(0)
    target = np.where(rng.random(32 ** 3) < 0.9, 0, 4).astype(np.int64)
    comp = np.array([True, True, True, True, False])
    yield "ace_terms", (probs, target, comp, True, 1e-7)
    yield "ace_logit_grad", (probs, target, comp, True, 1e-7)


def _time(fn, args, repeat):
    fn(*args)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for name, case in _cases(rng):
        np_fn, loop_fn = kernels.IMPLEMENTATIONS[name]
        t_np = _time(np_fn, case, args.repeat) * 1e3
        if HAVE_NUMBA:
            t_nb = _time(loop_fn, case, args.repeat) * 1e3
            print(f"{name:<26}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<26}{t_np:>12.2f}{'':>12}{'':>10}")


if __name__ == "__main__":
    main()
