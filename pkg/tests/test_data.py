import gzip
import io
import json
import pickle
import struct
import tarfile

import numpy as np
import pytest
import torch

from pise import data as datasets
from pise.data import DatasetError, ingest, load, read_idx, to_grayscale


def idx_bytes(arr: np.ndarray, magic=None) -> bytes:
    magic = magic if magic is not None else 0x0800 | arr.ndim
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def write_fashion(dir_, n_train=30, n_test=10, gz=True):
    rng = np.random.default_rng(0)
    arrays = {
        "train_images": rng.integers(0, 256, (n_train, 28, 28), dtype=np.uint8),
        "train_labels": (np.arange(n_train) % 10).astype(np.uint8),
        "test_images": rng.integers(0, 256, (n_test, 28, 28), dtype=np.uint8),
        "test_labels": (np.arange(n_test) % 10).astype(np.uint8),
    }
    dir_.mkdir(parents=True, exist_ok=True)
    for key, name in datasets.FASHION_FILES.items():
        raw = idx_bytes(arrays[key])
        if gz:
            (dir_ / name).write_bytes(gzip.compress(raw))
        else:
            (dir_ / name.removesuffix(".gz")).write_bytes(raw)
    return arrays


def test_idx_magic_numbers():
    assert (datasets.IDX_IMAGE_MAGIC, datasets.IDX_LABEL_MAGIC) == (2051, 2049)


@pytest.mark.parametrize("gz", [True, False])
def test_read_idx_round_trip(tmp_path, gz):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    raw = idx_bytes(arr)
    assert struct.unpack(">I", raw[:4])[0] == 2051
    path = tmp_path / "x.idx"
    path.write_bytes(gzip.compress(raw) if gz else raw)
    assert np.array_equal(read_idx(path, 2051), arr)


def test_read_idx_errors(tmp_path):
    arr = np.zeros((4, 2, 2), dtype=np.uint8)
    cases = {
        "wrong_magic": idx_bytes(arr),
        "truncated_payload": idx_bytes(arr)[:-3],
        "truncated_header": idx_bytes(arr)[:6],
        "tiny": b"\x00\x00",
        "float_payload": idx_bytes(arr, magic=0x0D03),
    }
    for name, raw in cases.items():
        path = tmp_path / name
        path.write_bytes(raw)
        expected = 2049 if name == "wrong_magic" else None
        with pytest.raises(DatasetError):
            read_idx(path, expected)


def test_ingest_and_load(tmp_path):
    arrays = write_fashion(tmp_path / "src")
    store = ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    meta = json.loads((store / "VERSION.json").read_text())
    assert (meta["train_count"], meta["test_count"], meta["num_classes"]) == (30, 10, 10)
    ds = load("fashion-mnist", tmp_path / "cache")
    assert ds.shape == (28, 28) and ds.num_classes == 10
    assert ds.train_images.dtype == torch.float32
    assert 0 <= float(ds.train_images.min()) and float(ds.train_images.max()) <= 1
    assert torch.equal(ds.train_images, torch.from_numpy(arrays["train_images"]).float() / 255)
    assert ds.test_labels.dtype == torch.int64
    assert not list(store.glob("*.gz"))


def test_uncompressed_sources_accepted(tmp_path):
    write_fashion(tmp_path / "src", gz=False)
    ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    assert len(load("fashion-mnist", tmp_path / "cache").train_images) == 30


def test_reingest_is_noop(tmp_path):
    write_fashion(tmp_path / "src")
    store = ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    stamp = {p.name: p.stat().st_mtime_ns for p in store.iterdir()}
    for p in (tmp_path / "src").iterdir():
        p.unlink()  # a no-op must not even look at the sources
    assert ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src") == store
    assert {p.name: p.stat().st_mtime_ns for p in store.iterdir()} == stamp


def test_corrupted_store_is_rebuilt(tmp_path):
    write_fashion(tmp_path / "src")
    store = ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    np.save(store / "test_labels.npy", np.zeros(10, dtype=np.uint8))
    with pytest.raises(DatasetError, match="not ingested"):
        load("fashion-mnist", tmp_path / "cache")
    ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    assert load("fashion-mnist", tmp_path / "cache").test_labels.tolist() == [i % 10 for i in range(10)]


def test_count_verification(tmp_path):
    write_fashion(tmp_path / "src")
    with pytest.raises(DatasetError, match="expected"):
        ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src")
    assert not (tmp_path / "cache" / "fashion-mnist").exists()
    assert not (tmp_path / "cache" / "fashion-mnist.partial").exists()


def test_truncated_archive_leaves_nothing(tmp_path):
    write_fashion(tmp_path / "src")
    name = datasets.FASHION_FILES["test_images"]
    raw = gzip.decompress((tmp_path / "src" / name).read_bytes())
    (tmp_path / "src" / name).write_bytes(gzip.compress(raw[:-100]))
    with pytest.raises(DatasetError, match="payload"):
        ingest("fashion-mnist", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    assert not any((tmp_path / "cache").iterdir())


def test_missing_source_and_unknown_tag(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="not found"):
        ingest("fashion-mnist", tmp_path / "cache", tmp_path / "empty")
    with pytest.raises(DatasetError, match="unknown"):
        ingest("imagenet", tmp_path / "cache")
    with pytest.raises(DatasetError):
        load("fashion-mnist", tmp_path / "nowhere")


def test_cache_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PISE_CACHE", str(tmp_path))
    assert datasets.cache_root() == tmp_path
    assert datasets.cache_root(tmp_path / "x") == tmp_path / "x"


# -- CIFAR ---------------------------------------------------------------------------

def cifar_tarball(path, n_per_batch=4):
    rng = np.random.default_rng(1)

    def batch(k):
        return {b"data": rng.integers(0, 256, (n_per_batch, 3072), dtype=np.uint8),
                b"labels": [(k + i) % 10 for i in range(n_per_batch)]}

    with tarfile.open(path, "w:gz") as tar:
        for name in ["data_batch_1", "data_batch_2", "test_batch"]:
            blob = pickle.dumps(batch(len(name)))
            info = tarfile.TarInfo(f"cifar-10-batches-py/{name}")
            info.size = len(blob)
            tar.addfile(info, io.BytesIO(blob))


def test_grayscale_luminance_weights():
    rgb = np.zeros((1, 3, 1, 3), dtype=np.uint8)
    rgb[0, :, 0, 0] = (255, 0, 0)
    rgb[0, :, 0, 1] = (0, 255, 0)
    rgb[0, :, 0, 2] = (100, 100, 100)
    assert to_grayscale(rgb)[0, 0].tolist() == [76, 150, 100]


def test_cifar_ingest(tmp_path):
    (tmp_path / "src").mkdir()
    cifar_tarball(tmp_path / "src" / "cifar-10-python.tar.gz")
    ingest("cifar10-gray", tmp_path / "cache", tmp_path / "src", verify_counts=False)
    ds = load("cifar10-gray", tmp_path / "cache")
    assert ds.train_images.shape == (8, 32, 32) and ds.test_images.shape == (4, 32, 32)
    assert ds.shape == (32, 32)


def test_cifar_garbage_archive(tmp_path):
    (tmp_path / "src").mkdir()
    (tmp_path / "src" / "cifar-10-python.tar.gz").write_bytes(b"not a tarball")
    with pytest.raises(DatasetError, match="CIFAR"):
        ingest("cifar10-gray", tmp_path / "cache", tmp_path / "src", verify_counts=False)
