"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 1]
"""
import argparse
import os
import timeit

import numpy as np

from saekit import kernels
from saekit.layers import Conv2dParams, conv2d
from saekit.models import ModelSpec, build_model, forward
from saekit.tensor import Tensor, backward, tsum


def extents(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def cases(rng):
    x = rng.normal(size=(16, 64, 32, 32)).astype(np.float32)
    ho = extents(32, 3, 1, 1)
    cols = rng.normal(size=(16, 64 * 9, ho * ho)).astype(np.float32)
    hp = extents(32, 3, 2, 1)
    _, arg = kernels._pure.maxpool_forward(x, 3, 2, 1, hp, hp)
    d = rng.normal(size=(16, 64, hp, hp)).astype(np.float32)
    conv = Conv2dParams(Tensor(rng.normal(size=(64, 64, 3, 3)).astype(np.float32), requires_grad=True), padding=1)
    m = build_model(ModelSpec("tiny_senetv2", 10))
    xin = rng.normal(size=(16, 3, 16, 16)).astype(np.float32)
    return {
        "im2col 3x3 (16,64,32,32)": lambda: kernels.im2col(x, 3, 3, 1, 1, ho, ho),
        "col2im 3x3 (16,64,32,32)": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1, ho, ho),
        "maxpool fwd 3x3/2": lambda: kernels.maxpool_forward(x, 3, 2, 1, hp, hp),
        "maxpool bwd 3x3/2": lambda: kernels.maxpool_backward(d, arg, x.shape),
        "conv2d fwd+bwd": lambda: backward(tsum(conv2d(Tensor(x, requires_grad=True), conv))),
        "tiny_senetv2 fwd+bwd": lambda: backward(tsum(forward(m, Tensor(xin)))),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", default=None, help="sets SAEKIT_THREADS for the compiled kernels")
    args = ap.parse_args()
    if args.threads is not None:
        os.environ["SAEKIT_THREADS"] = args.threads
    if "cython" not in kernels.BACKENDS:
        print("compiled kernels not built; only the numpy backend is available")
    bench = cases(np.random.default_rng(0))
    print(f"{'case':28s} " + " ".join(f"{b:>10s}" for b in kernels.BACKENDS) + "   speedup")
    prev = kernels.get_backend()
    for name, fn in bench.items():
        times = []
        for backend in kernels.BACKENDS:
            kernels.set_backend(backend)
            fn()
            times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
        speed = f"{times[0] / times[1]:8.2f}x" if len(times) > 1 else ""
        print(f"{name:28s} " + " ".join(f"{t:8.2f}ms" for t in times) + f" {speed}")
    kernels.set_backend(prev)


if __name__ == "__main__":
    main()
