"""Dataset ingest: IDX / CIFAR archives into a local cached store.

Store layout (one directory per dataset tag under the cache root)::

    <root>/<tag>/train_images.npy   uint8 (N, H, W)
    <root>/<tag>/train_labels.npy   uint8 (N,)
    <root>/<tag>/test_images.npy
    <root>/<tag>/test_labels.npy
    <root>/<tag>/VERSION.json       counts + sha256 of each array file

Images are kept as uint8 on disk and divided by 255 on load.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import pickle
import shutil
import struct
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

STORE_VERSION = 1
IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

FASHION_URL = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
FASHION_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
EXPECTED_COUNTS = {
    "fashion-mnist": (60000, 10000),
    "cifar10-gray": (50000, 10000),
}
LUMA = np.array([0.299, 0.587, 0.114])


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    tag: str
    train_images: torch.Tensor  # float32 (N, H, W) in [0, 1]
    train_labels: torch.Tensor  # int64 (N,)
    test_images: torch.Tensor
    test_labels: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.train_images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.train_labels.max()) + 1


def cache_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get("PISE_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "pise"


def _open(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an (optionally gzipped) IDX file of unsigned bytes."""
    with _open(Path(path)) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DatasetError(f"{path}: magic {magic} != expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise DatasetError(f"{path}: only unsigned-byte IDX payloads are supported")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    size = int(np.prod(dims))
    if len(raw) - hdr != size:
        raise DatasetError(f"{path}: expected {size} payload bytes, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(name: str, source: Path | None, url: str, dest: Path) -> Path:
    if source is not None:
        for candidate in (source / name, source / name.removesuffix(".gz")):
            if candidate.exists():
                return candidate
        raise DatasetError(f"{name} not found under {source}")
    target = dest / name
    log.info("downloading %s", url)
    try:
        with urllib.request.urlopen(url, timeout=60) as r, open(target, "wb") as f:
            shutil.copyfileobj(r, f)
    except OSError as e:
        raise DatasetError(f"could not download {url}: {e}") from e
    return target


def _load_fashion(source: Path | None, scratch: Path) -> dict[str, np.ndarray]:
    arrays = {}
    for key, name in FASHION_FILES.items():
        path = _fetch(name, source, FASHION_URL + name, scratch)
        magic = IDX_IMAGE_MAGIC if key.endswith("images") else IDX_LABEL_MAGIC
        arrays[key] = read_idx(path, magic)
    return arrays


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luminance of ``(N, 3, H, W)`` uint8 images, rounded back to uint8."""
    gray = np.tensordot(LUMA, rgb.astype(np.float64), axes=([0], [1]))
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def _load_cifar(source: Path | None, scratch: Path) -> dict[str, np.ndarray]:
    archive = _fetch("cifar-10-python.tar.gz", source, CIFAR_URL, scratch)
    batches = {}
    try:
        with tarfile.open(archive) as tar:
            for member in tar.getmembers():
                base = Path(member.name).name
                if base.startswith("data_batch_") or base == "test_batch":
                    batches[base] = pickle.load(tar.extractfile(member), encoding="bytes")
    except (tarfile.TarError, EOFError, pickle.UnpicklingError) as e:
        raise DatasetError(f"{archive}: unreadable CIFAR archive ({e})") from e
    train_keys = sorted(k for k in batches if k.startswith("data_batch_"))
    if not train_keys or "test_batch" not in batches:
        raise DatasetError(f"{archive}: missing CIFAR batches")

    def unpack(keys):
        data = np.concatenate([batches[k][b"data"] for k in keys]).reshape(-1, 3, 32, 32)
        labels = np.concatenate([np.asarray(batches[k][b"labels"]) for k in keys])
        return to_grayscale(data), labels.astype(np.uint8)

    tr_x, tr_y = unpack(train_keys)
    te_x, te_y = unpack(["test_batch"])
    return {"train_images": tr_x, "train_labels": tr_y, "test_images": te_x, "test_labels": te_y}


LOADERS = {"fashion-mnist": _load_fashion, "cifar10-gray": _load_cifar}


def store_is_valid(store: Path) -> bool:
    meta_path = store / "VERSION.json"
    if not meta_path.exists():
        return False
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError:
        return False
    if meta.get("version") != STORE_VERSION:
        return False
    for key, digest in meta.get("sha256", {}).items():
        path = store / f"{key}.npy"
        if not path.exists() or _sha256(path) != digest:
            return False
    return len(meta.get("sha256", {})) == 4


def ingest(tag: str, root=None, source=None, verify_counts: bool = True) -> Path:
    """Build (or confirm) the local store for ``tag``; returns its directory.

    ``source`` points at a directory of pre-placed archives; without it the
    archives are downloaded. An existing valid store is left untouched.
    """
    if tag not in LOADERS:
        raise DatasetError(f"unknown dataset {tag!r}; choose from {sorted(LOADERS)}")
    store = cache_root(root) / tag
    if store_is_valid(store):
        log.info("%s already ingested at %s", tag, store)
        return store
    tmp = store.with_name(store.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    try:
        arrays = LOADERS[tag](Path(source) if source else None, tmp)
        n_train, n_test = len(arrays["train_images"]), len(arrays["test_images"])
        if len(arrays["train_labels"]) != n_train or len(arrays["test_labels"]) != n_test:
            raise DatasetError(f"{tag}: image/label counts disagree")
        if verify_counts and (n_train, n_test) != EXPECTED_COUNTS[tag]:
            raise DatasetError(
                f"{tag}: found {n_train}/{n_test} items, expected {EXPECTED_COUNTS[tag]}")
        digests = {}
        for key, arr in arrays.items():
            np.save(tmp / f"{key}.npy", np.ascontiguousarray(arr, dtype=np.uint8))
            digests[key] = _sha256(tmp / f"{key}.npy")
        for leftover in tmp.glob("*.gz"):
            leftover.unlink()
        meta = {
            "version": STORE_VERSION, "tag": tag, "train_count": n_train, "test_count": n_test,
            "shape": list(arrays["train_images"].shape[1:]),
            "num_classes": int(arrays["train_labels"].max()) + 1, "sha256": digests,
        }
        (tmp / "VERSION.json").write_text(json.dumps(meta, indent=2))
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    shutil.rmtree(store, ignore_errors=True)
    tmp.rename(store)
    return store


def load(tag: str, root=None) -> Dataset:
    store = cache_root(root) / tag
    if not store_is_valid(store):
        raise DatasetError(
            f"dataset {tag!r} is not ingested under {store.parent}; run `pise ingest {tag}`")
    arr = {k: np.load(store / f"{k}.npy") for k in FASHION_FILES}
    if arr["train_labels"].size == 0:
        raise DatasetError(f"dataset {tag!r} has no labels")
    to_img = lambda a: torch.from_numpy(a.astype(np.float32) / 255.0)
    to_lbl = lambda a: torch.from_numpy(a.astype(np.int64))
    return Dataset(tag, to_img(arr["train_images"]), to_lbl(arr["train_labels"]),
                   to_img(arr["test_images"]), to_lbl(arr["test_labels"]))
