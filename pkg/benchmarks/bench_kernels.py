"""Compiled kernels vs numpy fallback on conv shapes seen during search and training.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from hasa.autodiff import functional as F
from hasa.autodiff import kernels
from hasa.autodiff.tensor import Parameter, Tensor, backward

CASES = [
    # name, x shape, weight shape, stride, padding, dilation, groups
    ("dense 3x3", (16, 8, 16, 16), (8, 8, 3, 3), 1, 1, 1, 1),
    ("depthwise 5x5", (16, 8, 16, 16), (8, 1, 5, 5), 1, 2, 1, 8),
    ("dilated depthwise 3x3", (16, 8, 16, 16), (8, 1, 3, 3), 1, 2, 2, 8),
    ("stem 3x3 s2", (16, 8, 64, 64), (16, 8, 3, 3), 2, 1, 1, 1),
]


def run_case(x_shape, w_shape, stride, padding, dilation, groups, repeat):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(x_shape).astype(np.float32))
    w = Parameter(rng.standard_normal(w_shape).astype(np.float32), name="w")
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        y = F.conv2d(x, w, stride=stride, padding=padding, dilation=dilation, groups=groups)
        backward(F.total(y), [w])
        best = min(best, time.perf_counter() - t0)
    return best, y.data, w.grad


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'case':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    prev = kernels.backend()
    try:
        for name, *case in CASES:
            times, outs = [], []
            for b in backends:
                kernels.use_backend(b)
                t, y, g = run_case(*case, args.repeat)
                times.append(t)
                outs.append((y, g))
            if len(outs) > 1:
                np.testing.assert_allclose(outs[0][0], outs[1][0], rtol=1e-4, atol=1e-4)
                np.testing.assert_allclose(outs[0][1], outs[1][1], rtol=1e-4, atol=1e-3)
            line = f"{name:<24}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
            if len(times) > 1:
                line += f"{times[0] / times[1]:>11.2f}x"
            print(line)
    finally:
        kernels.use_backend(prev)


if __name__ == "__main__":
    main()
