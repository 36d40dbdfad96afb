"""Time the fused TTT scan with numba kernels against the numpy fallback.

    python3 benchmarks/bench_scan.py [--batch 64] [--length 50] [--dim 64] [--hidden 256] [--repeats 5]
"""
import argparse
import time

import numpy as np

from ttt4rec import _accel
from ttt4rec import tensor as T
from ttt4rec.ttt import InnerModel, ttt_scan


def time_scan(kind, backend, args):
    _accel.set_backend(backend)
    rng = np.random.default_rng(0)
    shape = (args.batch, args.length, args.dim)
    K, V, Q = (T.Tensor(rng.normal(size=shape) / np.sqrt(args.dim), requires_grad=True) for _ in range(3))
    inner = InnerModel(kind, args.dim, args.hidden, rng)
    mask = np.ones(shape[:2], dtype=bool)

    def once():
        res = ttt_scan(K, V, Q, inner.initial_state(), 0.1, mask, "fused")
        T.backward(T.sum_(res.outputs))

    once()  # warm-up; includes numba compilation on a cold cache
    best = np.inf
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        once()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    print("inner,backend,seconds_forward_backward,speedup_vs_numpy")
    for kind in ("linear", "mlp"):
        base = None
        for b in backends:
            t = time_scan(kind, b, args)
            base = base or t
            print(f"{kind},{b},{t:.4f},{base / t:.2f}")


if __name__ == "__main__":
    main()
