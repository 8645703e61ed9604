"""Compiled vs numpy convolution kernels, per layer shape and per training step.

    python benchmarks/bench_kernels.py [--repeat 5] [--steps 5]

Prints a table of median wall times and the speed-up of the compiled core.
"""

import argparse
import time

import numpy as np

from stsr.numerics import kernels

# (batch, cin, cout, size, k, stride): the hot shapes of the desk model
SHAPES = [
    (4, 20, 16, 32, 3, 1),
    (4, 16, 16, 32, 3, 1),
    (4, 16, 32, 32, 3, 2),
    (4, 32, 32, 16, 3, 1),
    (4, 48, 16, 32, 3, 1),
    (64, 3, 16, 16, 3, 2),
]


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_layer(shape, repeat):
    B, cin, cout, S, k, stride = shape
    rng = np.random.default_rng(0)
    x = rng.normal(size=(B, cin, S, S))
    w = rng.normal(size=(cout, cin, k, k))
    pad = k // 2
    y = kernels.conv2d_forward(x, w, stride, pad)
    g = rng.normal(size=y.shape)

    def step():
        kernels.conv2d_forward(x, w, stride, pad)
        kernels.conv2d_backward_input(g, w, x.shape, stride, pad)
        kernels.conv2d_backward_weight(g, x, w.shape, stride, pad)

    return timeit(step, repeat)


def bench_train_step(steps):
    from stsr import config as C
    from stsr.denoiser import training_loss
    from stsr.train import Trainer

    tr = Trainer(C.desk())
    d = tr.data
    idx = np.arange(4) % len(d)

    def step():
        out = training_loss(tr.model, d.x0[idx], d.y[idx], d.h[idx], tr.schedule, 0.1, tr.rng)
        tr.opt.zero_grad()
        out["loss"].backward()
        tr.opt.step()

    return timeit(step, steps)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()

    try:
        kernels.use("cython")
    except ImportError:
        print("compiled core not built; run `python setup.py build_ext --inplace`")
        return
    rows = []
    for shape in SHAPES:
        res = {}
        for backend in ("python", "cython"):
            kernels.use(backend)
            res[backend] = bench_layer(shape, args.repeat)
        rows.append(("conv fwd+bwd " + "x".join(map(str, shape)), res))
    res = {}
    for backend in ("python", "cython"):
        kernels.use(backend)
        res[backend] = bench_train_step(args.steps)
    rows.append(("desk training step (B=4)", res))

    print(f"{'case':44s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    for name, r in rows:
        print(f"{name:44s} {1e3 * r['python']:10.2f} {1e3 * r['cython']:10.2f} "
              f"{r['python'] / r['cython']:8.2f}x")


if __name__ == "__main__":
    main()
