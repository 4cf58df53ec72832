#!/usr/bin/env python3
"""Build an offline MNIST-format digit corpus from sklearn's 8x8 digits.

Writes the four canonical IDX files (train/t10k images+labels) so the rest of
the pipeline is a drop-in for real MNIST: swap these files for the originals
and nothing else changes. The 8x8 digits are bilinearly upscaled to 28x28.
"""

import argparse
import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("data/raw"))
    ap.add_argument("--seed", type=int, default=7, help="shuffle seed for the train/test split")
    ap.add_argument("--test-count", type=int, default=297)
    args = ap.parse_args()

    ds = load_digits()
    images = ds.images / ds.images.max()  # 0..16 -> 0..1
    up = np.stack([zoom(img, 3.5, order=1) for img in images])
    up = np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8)
    assert up.shape[1:] == (28, 28), up.shape

    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(up))
    test_idx, train_idx = order[: args.test_count], order[args.test_count :]
    for split in (train_idx, test_idx):
        present = set(ds.target[split].tolist())
        if present != set(range(10)):
            raise SystemExit(f"split is missing digit classes: {sorted(present)}")

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out / "train-images-idx3-ubyte", up[train_idx])
    write_idx_labels(args.out / "train-labels-idx1-ubyte", ds.target[train_idx])
    write_idx_images(args.out / "t10k-images-idx3-ubyte", up[test_idx])
    write_idx_labels(args.out / "t10k-labels-idx1-ubyte", ds.target[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {args.out}")


if __name__ == "__main__":
    main()
