"""Convert the digit JSON files shipped in the `mnist` npm package (MIT,
Juan Cazala) into gzipped IDX files.

Usage: python3 mnist_npm_to_idx.py <package/src/digits> <out_dir>

Pixels are stored as 3-decimal fractions of 255; they are mapped back to u8 by
rounding. Per class, the last 10% of samples form the test split. Both splits
are shuffled with a fixed seed so the files are reproducible.
"""
import gzip
import json
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, out):
    train_x, train_y, test_x, test_y = [], [], [], []
    for label in range(10):
        with open(f"{src}/{label}.json") as f:
            data = np.asarray(json.load(f)["data"], dtype=np.float64)
        imgs = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8).reshape(-1, 784)
        n_test = len(imgs) // 10
        train_x.append(imgs[:-n_test])
        train_y += [label] * (len(imgs) - n_test)
        test_x.append(imgs[-n_test:])
        test_y += [label] * n_test
    rng = np.random.default_rng(0)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.asarray(ys, dtype=np.uint8)
        perm = rng.permutation(len(y))
        x, y = x[perm], y[perm]
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", 0x803, (len(y), 28, 28), x.tobytes())
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", 0x801, (len(y),), y.tobytes())
        print(name, x.shape, np.bincount(y))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
