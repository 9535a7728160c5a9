"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call for each kernel and backend, plus the
speedup. Thread count follows SPHERETRAIN_THREADS.
"""

import argparse
import statistics
import time

import numpy as np

from spheretrain import _kernels_py
from spheretrain.kernels import thread_cap

try:
    from spheretrain import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(gen):
    rows, dim = 4096, 512
    w = gen.standard_normal((rows, dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    g = gen.standard_normal((rows, dim))

    def adam(mod):
        m, v, ww = np.zeros_like(w), np.zeros_like(w), w.copy()
        return lambda: mod.adam_rows(ww, g, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.05, True)

    x = gen.standard_normal((100_000, 64))
    c = gen.standard_normal((50, 64))
    csq = np.einsum("ij,ij->i", c, c)

    def assign(mod):
        if mod is _kernels_py:
            return lambda: mod.assign_nearest(x, c, csq)
        return lambda: mod.assign_nearest(x, c, csq, thread_cap())

    batch = x[:4096].copy()
    labels = gen.integers(0, 50, 4096).astype(np.int64)

    def minibatch(mod):
        cc, counts = c.copy(), np.zeros(50)
        return lambda: mod.minibatch_update(cc, counts, batch, labels)

    return {"adam_rows 4096x512": adam, "assign 100000x64, K=50": assign, "minibatch_update 4096x64": minibatch}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"threads: {thread_cap()}")
    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<28}{'numpy':>12}{'cython':>12}{'speedup':>10}")
    for name, make in cases(np.random.default_rng(0)).items():
        t_py = _time(make(_kernels_py), args.repeat)
        if _kernels is None:
            print(f"{name:<28}{t_py * 1e3:>10.2f}ms")
            continue
        t_cy = _time(make(_kernels), args.repeat)
        print(f"{name:<28}{t_py * 1e3:>10.2f}ms{t_cy * 1e3:>10.2f}ms{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
