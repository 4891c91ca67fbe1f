#!/usr/bin/env python3
"""Benchmark the numba and numpy convolution backends.

Times the three hot kernels over the toy-scale layer shapes and a full
training iteration under the currently selected backend.  Run with
ALPHAGAN3D_NUMBA=0 to force the numpy fallback end to end:

    python3 benchmarks/bench_kernels.py
    ALPHAGAN3D_NUMBA=0 python3 benchmarks/bench_kernels.py --iteration
"""
import argparse
import time

import numpy as np

from alphagan3d.autodiff import kernels as K

LADDER = [  # (input shape, weight shape, stride, padding), batch 4, width 1/8
    ((4, 1, 16, 16, 16), (8, 1, 4, 4, 4), 2, 1),
    ((4, 8, 8, 8, 8), (16, 8, 4, 4, 4), 2, 1),
    ((4, 16, 4, 4, 4), (32, 16, 4, 4, 4), 2, 1),
    ((4, 32, 2, 2, 2), (64, 32, 4, 4, 4), 2, 1),
]


def timeit(fn, *args, repeats=30):
    fn(*args)  # warmup / JIT compile
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats * 1e3


def bench_kernels():
    rng = np.random.default_rng(0)
    backends = [("numpy", K.conv3d_forward_np, K.conv3d_input_grad_np,
                 K.conv3d_weight_grad_np)]
    if K.HAVE_NUMBA:
        backends.append(("numba", K.conv3d_forward_nb, K.conv3d_input_grad_nb,
                         K.conv3d_weight_grad_nb))
    print(f"selected backend: {K.backend_name()}")
    print(f"{'shape':<22}{'kernel':<8}"
          + "".join(f"{name:>12}" for name, *_ in backends))
    totals = {name: 0.0 for name, *_ in backends}
    for xs, ws, s, p in LADDER:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        y = K.conv3d_forward_np(x, w, s, p)
        gy = rng.normal(size=y.shape).astype(np.float32)
        rows = {
            "fwd": [(fwd, (x, w, s, p)) for _, fwd, _, _ in backends],
            "dx": [(dx, (gy, w, s, p, xs[2:])) for _, _, dx, _ in backends],
            "dw": [(dw, (x, gy, ws[2], s, p)) for _, _, _, dw in backends],
        }
        for kname, cases in rows.items():
            cells = []
            for (bname, *_), (fn, args) in zip(backends, cases):
                ms = timeit(fn, *args)
                totals[bname] += ms
                cells.append(f"{ms:>10.3f}ms")
            print(f"{str(xs):<22}{kname:<8}" + "".join(cells))
    print("-" * (30 + 12 * len(backends)))
    print(f"{'ladder total':<30}"
          + "".join(f"{totals[name]:>10.3f}ms" for name, *_ in backends))


def bench_iteration():
    from alphagan3d.data import generate_phantom_set, preprocess
    from alphagan3d.training import (TrainingConfig, make_trainer_state,
                                     train_iteration)
    from alphagan3d.networks import load_preset

    cfg = TrainingConfig(preset="sigmarat2", loss="l_g3", iterations=10,
                         batch_size=4, width_mult=0.125,
                         volume_shape=(16, 16, 16), latent_dim=500,
                         seed=0).resolved()
    dataset = [preprocess(v.voxels) for v in generate_phantom_set(0, 8)]
    bundle = load_preset(cfg.preset, cfg.volume_shape, cfg.latent_dim,
                         cfg.width_mult, seed=0)
    state = make_trainer_state(bundle, cfg)
    batch = np.stack(dataset[:4])[:, None]
    train_iteration(bundle, batch, cfg, state)  # warmup
    start = time.perf_counter()
    n = 5
    for _ in range(n):
        train_iteration(bundle, batch, cfg, state)
    ms = (time.perf_counter() - start) / n * 1e3
    print(f"\ntraining iteration ({K.backend_name()} backend, toy scale): "
          f"{ms:.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iteration", action="store_true",
                        help="also time a full training iteration")
    args = parser.parse_args()
    bench_kernels()
    if args.iteration:
        bench_iteration()


if __name__ == "__main__":
    main()
