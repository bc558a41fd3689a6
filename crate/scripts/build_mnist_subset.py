"""Rebuild the bundled MNIST subset as gzipped IDX files.

The full MNIST download is not always reachable, so the repository ships the
10,000-digit MNIST subset redistributed in the `mnist` npm package. Pixels are
stored there as 3-decimal floats and are recovered to the original bytes
exactly by round(v * 255). The digits are shuffled with a fixed seed and split
8,000 / 2,000 into train / test.

Usage:
    python scripts/build_mnist_subset.py <mnist-npm-package-dir> <out-dir>
"""

import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx_images(path, images):
    n = images.shape[0]
    header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + labels.astype(np.uint8).tobytes())


def load_npm(package_dir):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(package_dir, "src", "digits", f"{digit}.json")) as f:
            data = np.asarray(json.load(f)["data"], dtype=np.float64)
        pixels = np.round(data * 255.0)
        assert np.abs(pixels / 255.0 - data).max() < 1.0 / 510.0
        pixels = pixels.reshape(-1, 784)
        images.append(pixels)
        labels.append(np.full(pixels.shape[0], digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    return images[order], labels[order]


def main():
    npm_dir, out = sys.argv[1:3]
    os.makedirs(out, exist_ok=True)
    images, labels = load_npm(npm_dir)
    train_x, train_y = images[:8000], labels[:8000]
    test_x, test_y = images[8000:], labels[8000:]
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte.gz"), train_x)
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), train_y)
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte.gz"), test_x)
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), test_y)
    print(f"train {len(train_y)} / test {len(test_y)} written to {out}")


if __name__ == "__main__":
    main()
