"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package stores 10,000 MNIST digits grouped by class as pixel/255
rounded to three decimals; rounding back to uint8 is exact. The digits are
shuffled with a fixed seed and split into a train and a test file pair in the
standard MNIST layout.

    python tools/npm_digits_to_idx.py path/to/package/src/digits data/mnist-subset
"""
import argparse
import gzip
import json
import os
import struct

import numpy as np


def write_idx(path, array, magic):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir")
    parser.add_argument("out_dir")
    parser.add_argument("--test-count", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(args.digits_dir, f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        pix = np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]

    k = len(images) - args.test_count
    os.makedirs(args.out_dir, exist_ok=True)
    out = lambda name: os.path.join(args.out_dir, name)
    write_idx(out("train-images-idx3-ubyte.gz"), images[:k], 0x00000803)
    write_idx(out("train-labels-idx1-ubyte.gz"), labels[:k], 0x00000801)
    write_idx(out("t10k-images-idx3-ubyte.gz"), images[k:], 0x00000803)
    write_idx(out("t10k-labels-idx1-ubyte.gz"), labels[k:], 0x00000801)
    print(f"wrote {k} train / {len(images) - k} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
