"""Compare the compiled and numpy kernel backends.

Times im2col/col2im at the shapes a desk-scale MNIST tower sees, then one
alternating training step of the full two-tower model. Run with

    python benchmarks/bench_kernels.py [--repeat N] [--csv PATH]
"""
import argparse
import sys
import time

import numpy as np

from bridgenet import kernels
from bridgenet.data import PairDataset
from bridgenet.model import BnnModel, TowerConfig
from bridgenet.train import TrainConfig, TrainState, train_epoch

# (batch, channels, height, width) entering each 3x3 valid conv of an MNIST half tower
CONV_INPUTS = [(150, 1, 28, 14), (150, 10, 26, 12), (150, 10, 24, 10)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels(backend, repeat):
    kernels.use_backend(backend)
    rng = np.random.default_rng(0)
    rows = []
    for shape in CONV_INPUTS:
        b, c, h, w = shape
        oh, ow = h - 2, w - 2
        x = rng.standard_normal(shape)
        cols = kernels.im2col(x, 3, 3, 1, oh, ow)
        rows.append((backend, f"im2col {shape}", best_of(lambda: kernels.im2col(x, 3, 3, 1, oh, ow), repeat)))
        rows.append((backend, f"col2im {shape}",
                     best_of(lambda: kernels.col2im(cols, shape, 3, 3, 1, oh, ow), repeat)))
    return rows


def bench_training(backend, repeat):
    kernels.use_backend(backend)
    rng = np.random.default_rng(1)
    images = rng.uniform(0, 1, (300, 28, 28))
    dataset = PairDataset.from_images(images)
    config = TrainConfig(lr=0.1, epochs=1, batch_size=100)

    def step():
        model = BnnModel(TowerConfig(representation_dim=20), seed=0)
        train_epoch(model, dataset, config, TrainState.fresh(0))

    return [(backend, "train epoch (300 positives, 600 negatives)", best_of(step, repeat))]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--csv", help="also write the table as CSV")
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only", file=sys.stderr)
    previous = kernels.backend_name
    results = {}
    try:
        for backend in backends:
            for name_backend, label, seconds in bench_kernels(backend, args.repeat) + bench_training(
                    backend, max(1, args.repeat // 2)):
                results.setdefault(label, {})[name_backend] = seconds
    finally:
        kernels.use_backend(previous)
    lines = ["case,numpy_ms,compiled_ms,speedup"]
    print(f"{'case':48s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, by_backend in results.items():
        py, c = by_backend.get("numpy"), by_backend.get("compiled")
        speedup = py / c if py and c else float("nan")
        print(f"{label:48s} {1e3 * py:10.2f} {1e3 * c if c else float('nan'):12.2f} {speedup:8.2f}")
        lines.append(f"\"{label}\",{1e3 * py:.3f},{1e3 * c if c else float('nan'):.3f},{speedup:.3f}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
