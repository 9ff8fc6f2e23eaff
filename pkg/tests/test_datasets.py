import struct

import numpy as np
import pytest

from capsdefense import datasets
from capsdefense.errors import FormatError, UsageError


def _write_cifar(path, records):
    with open(path, "wb") as f:
        for label, pixels in records:
            f.write(bytes([label]) + bytes(pixels))


def test_cifar_fixture_exact(tmp_path):
    p = tmp_path / "batch.bin"
    px0 = [0] * 3072
    px0[0] = 255  # R channel, pixel (0, 0)
    px1 = [128] * 3072
    _write_cifar(p, [(3, px0), (9, px1)])
    ds = datasets.load_cifar10_binary(str(p))
    assert len(ds) == 2
    assert list(ds.labels) == [3, 9]
    assert ds.images[0, 0, 0, 0] == pytest.approx(1.0)
    assert ds.images[0, 0, 0, 1] == 0.0
    assert np.allclose(ds.images[1], 128 / 255.0)


def test_cifar_truncated(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError):
        datasets.load_cifar10_binary(str(p))


def test_cifar_empty(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    with pytest.raises(FormatError):
        datasets.load_cifar10_binary(str(p))


def test_cifar_bad_label(tmp_path):
    p = tmp_path / "label.bin"
    _write_cifar(p, [(12, [0] * 3072)])
    with pytest.raises(FormatError):
        datasets.load_cifar10_binary(str(p))


def _write_idx(tmp_path, images, labels):
    n, rows, cols = images.shape
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labels.idx"
    with open(ip, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(lp, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))
    return str(ip), str(lp)


def test_idx_roundtrip(tmp_path):
    img = np.arange(16).reshape(1, 4, 4) * 16
    ip, lp = _write_idx(tmp_path, img, [7])
    ds = datasets.load_idx(ip, lp)
    assert ds.labels[0] == 7
    assert np.allclose(ds.images[0, 0], img[0] / 255.0)


def test_idx_zero_image_and_channel_replication(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((1, 4, 4)), [0])
    ds = datasets.load_idx(ip, lp, channels=3)
    assert ds.images.shape == (1, 3, 4, 4)
    assert np.all(ds.images == 0)


def test_idx_count_mismatch(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((2, 4, 4)), [0])
    with pytest.raises(FormatError):
        datasets.load_idx(ip, lp)


def test_idx_bad_magic(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((1, 4, 4)), [0])
    with open(ip, "r+b") as f:
        f.write(struct.pack(">I", 0x123))
    with pytest.raises(FormatError):
        datasets.load_idx(ip, lp)


def test_synth_deterministic():
    a = datasets.synth_toy(42, per_class=5, size=16)
    b = datasets.synth_toy(42, per_class=5, size=16)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = datasets.synth_toy(43, per_class=5, size=16)
    assert not np.array_equal(a.images, c.images)


def test_synth_class_balanced_and_range():
    ds = datasets.synth_toy(0, per_class=7, size=14)
    counts = np.bincount(ds.labels, minlength=10)
    assert np.all(counts == 7)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.all(np.isfinite(ds.images))


def test_synth_too_small():
    with pytest.raises(UsageError):
        datasets.synth_toy(0, per_class=1, size=8)


def test_synth_knn_separability():
    train = datasets.synth_toy(1, per_class=30, size=16, split="train")
    test = datasets.synth_toy(1, per_class=10, size=16, split="test")
    xtr = train.images.reshape(len(train), -1)
    xte = test.images.reshape(len(test), -1)
    d2 = ((xte[:, None, :] - xtr[None, :, :]) ** 2).sum(axis=2)
    nn5 = np.argsort(d2, axis=1)[:, :5]
    votes = train.labels[nn5]
    preds = np.array([np.bincount(v, minlength=10).argmax() for v in votes])
    acc = (preds == test.labels).mean()
    assert acc >= 0.80


def test_batch_iterator_permutation():
    ds = datasets.synth_toy(2, per_class=4, size=12)
    it = datasets.BatchIterator(ds, batch_size=7, seed=5)
    seen = []
    for imgs, labels in it:
        seen.append(len(labels))
    assert sum(seen) == len(ds)
    o1 = it.epoch_order(0)
    o2 = it.epoch_order(1)
    assert sorted(o1) == list(range(len(ds)))
    assert not np.array_equal(o1, o2)


def test_raw_f32_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((1, 6, 6)).astype(np.float32)
    p = tmp_path / "adv_000000.bin"
    img.astype("<f4").tofile(p)
    out = datasets.load_raw_f32_images([str(p)], (1, 6, 6))
    assert np.array_equal(out[0], img)
