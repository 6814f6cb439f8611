"""Convert a per-class JSON image bundle into gzipped IDX archives.

Some package registries ship Fashion-MNIST as ten JSON files (``0.json`` ..
``9.json``), each holding ``{"data": [[784 uint8 pixels], ...]}`` with the
1000 test images of the class first and the 6000 training images after them.
This writes the four standard ``*-idx?-ubyte.gz`` archives so that
``pise ingest fashion-mnist --source DIR`` can consume them offline.

Usage: python tools/bundle_to_idx.py BUNDLE_DIR OUT_DIR
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TEST_PER_CLASS = 1000


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 2051 if array.ndim == 3 else 2049
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.open(path, "wb") as f:
        f.write(header + array.tobytes())


def main(bundle_dir, out_dir):
    bundle_dir, out_dir = Path(bundle_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for label in range(10):
        rows = json.loads((bundle_dir / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 784]  # bundle carries empty separators
        imgs = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        for name, part in (("t10k", imgs[:TEST_PER_CLASS]), ("train", imgs[TEST_PER_CLASS:])):
            splits[name][0].append(part)
            splits[name][1].append(np.full(len(part), label, dtype=np.uint8))
    rng = np.random.default_rng(0)
    for name, (imgs, labels) in splits.items():
        imgs, labels = np.concatenate(imgs), np.concatenate(labels)
        order = rng.permutation(len(labels))
        write_idx(out_dir / f"{name}-images-idx3-ubyte.gz", imgs[order])
        write_idx(out_dir / f"{name}-labels-idx1-ubyte.gz", labels[order])
        print(name, imgs.shape, np.bincount(labels))


if __name__ == "__main__":
    main(*sys.argv[1:3])
