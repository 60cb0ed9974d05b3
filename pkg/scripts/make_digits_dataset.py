#!/usr/bin/env python3
"""Build a small handwritten-digit dataset in IDX format.

Pulls the 1797 8x8 digit images bundled with scikit-learn, upsamples them
bicubically to a target size, and writes two IDX image files (a training
split and a held-out split) plus matching label files. The output feeds the
`heatgen train` / `heatgen eval-nll` commands.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from heatgen.dataio import write_idx


def build_images(size: int) -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_digits

    digits = load_digits()
    raw = digits.images  # (1797, 8, 8) floats in 0..16
    labels = digits.target.astype(np.uint8)
    scaled = np.rint(raw / 16.0 * 255.0).astype(np.uint8)
    out = np.empty((scaled.shape[0], size, size), dtype=np.uint8)
    for i, img in enumerate(scaled):
        pil = Image.fromarray(img, mode="L").resize((size, size), Image.BICUBIC)
        out[i] = np.asarray(pil, dtype=np.uint8)
    return out, labels


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True, help="output directory")
    ap.add_argument("--size", type=int, default=28, help="output side length")
    ap.add_argument("--train", type=int, default=1000, help="images in the training split")
    args = ap.parse_args()

    images, labels = build_images(args.size)
    if not 0 < args.train < len(images):
        ap.error(f"--train must be in 1..{len(images) - 1}")

    args.out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": (images[: args.train], labels[: args.train]),
        "eval": (images[args.train :], labels[args.train :]),
    }
    for name, (imgs, labs) in splits.items():
        img_path = args.out / f"digits-{name}.idx"
        lab_path = args.out / f"digits-{name}-labels.idx"
        write_idx(img_path, imgs)
        write_idx(lab_path, labs)
        print(f"{name}: {imgs.shape[0]} images {imgs.shape[1]}x{imgs.shape[2]} -> {img_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
