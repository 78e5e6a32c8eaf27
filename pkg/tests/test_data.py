import numpy as np
import pytest
from fixtures import IDX_LABELS, IDX_PIXELS, cifar_record, idx_images_bytes, idx_labels_bytes, write_cifar_dir

from multiprize import data
from multiprize.errors import FormatError


# CIFAR-10 --------------------------------------------------------------------


def test_cifar_fixture_parses_to_known_tensors(tmp_path):
    expected = write_cifar_dir(tmp_path)
    x, y = data.read_cifar10_batch(tmp_path / "data_batch_2.bin")
    ex, ey = expected["data_batch_2.bin"]
    assert x.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(x, ex)
    np.testing.assert_array_equal(y, ey)


def test_cifar_loader_spans_batches_and_scales(tmp_path):
    expected = write_cifar_dir(tmp_path, n_per_batch=2)
    ds = data.load_cifar10(tmp_path, "train", n=5)
    assert ds.images.shape == (5, 3, 32, 32)
    want = np.concatenate([expected[f"data_batch_{i}.bin"][0] for i in (1, 2, 3)])[:5]
    np.testing.assert_allclose(ds.images, want / 255, rtol=1e-6)
    test = data.load_cifar10(tmp_path, "test")
    np.testing.assert_array_equal(test.labels, expected["test_batch.bin"][1])


def test_cifar_channel_order(tmp_path):
    rec, pix = cifar_record(4, seed=9)
    (tmp_path / "b.bin").write_bytes(rec)
    x, y = data.read_cifar10_batch(tmp_path / "b.bin")
    assert y.tolist() == [4]
    np.testing.assert_array_equal(x[0, 0], pix[0])  # red plane first
    assert x[0, 2, 0, 1] == rec[1 + 2 * 1024 + 1]


def test_cifar_truncated_is_corrupt(tmp_path):
    rec, _ = cifar_record(1, 0)
    (tmp_path / "b.bin").write_bytes(rec + rec[:100])
    with pytest.raises(FormatError, match="corrupt batch"):
        data.read_cifar10_batch(tmp_path / "b.bin")


def test_cifar_bad_label(tmp_path):
    rec, _ = cifar_record(1, 0)
    (tmp_path / "b.bin").write_bytes(bytes([10]) + rec[1:])
    with pytest.raises(FormatError, match="corrupt batch"):
        data.read_cifar10_batch(tmp_path / "b.bin")


def test_cifar_write_read_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    x = gen.integers(0, 256, (7, 3, 32, 32), dtype=np.uint8)
    y = gen.integers(0, 10, 7)
    data.write_cifar10_batch(tmp_path / "b.bin", x, y)
    assert (tmp_path / "b.bin").stat().st_size == 7 * 3073
    rx, ry = data.read_cifar10_batch(tmp_path / "b.bin")
    np.testing.assert_array_equal(rx, x)
    np.testing.assert_array_equal(ry, y)


# IDX -------------------------------------------------------------------------


def _idx_pair(tmp_path, images=None, labels=None):
    (tmp_path / "img").write_bytes(images if images is not None else idx_images_bytes())
    (tmp_path / "lab").write_bytes(labels if labels is not None else idx_labels_bytes())
    return tmp_path / "img", tmp_path / "lab"


def test_idx_fixture_parses_to_known_tensors(tmp_path):
    ds = data.load_idx(*_idx_pair(tmp_path))
    assert ds.images.shape == (4, 1, 2, 2)
    np.testing.assert_allclose(ds.images[:, 0], IDX_PIXELS / 255, rtol=1e-6)
    np.testing.assert_array_equal(ds.labels, IDX_LABELS)


def test_idx_big_endian_count(tmp_path):
    labels = np.zeros(256, dtype=np.uint8)
    blob = idx_labels_bytes(labels)
    assert blob[4:8] == b"\x00\x00\x01\x00"
    (tmp_path / "lab").write_bytes(blob)
    assert data.read_idx(tmp_path / "lab", data.IDX_LABELS_MAGIC).shape == (256,)


def test_idx_bad_magic(tmp_path):
    img, lab = _idx_pair(tmp_path, images=idx_labels_bytes())
    with pytest.raises(FormatError, match="bad magic"):
        data.load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    img, lab = _idx_pair(tmp_path, labels=idx_labels_bytes(IDX_LABELS[:3]))
    with pytest.raises(FormatError, match="count"):
        data.load_idx(img, lab)


def test_idx_truncated_payload(tmp_path):
    img, lab = _idx_pair(tmp_path, images=idx_images_bytes()[:-1])
    with pytest.raises(FormatError):
        data.load_idx(img, lab)


def test_idx_writer_round_trip(tmp_path):
    data.write_idx(tmp_path / "img", IDX_PIXELS)
    assert (tmp_path / "img").read_bytes() == idx_images_bytes()


# synthetic data and normalization ----------------------------------------------


def test_synth_deterministic_and_balanced():
    a = data.synth_dataset(5, 100, 2, (3, 8, 8))
    b = data.synth_dataset(5, 100, 2, (3, 8, 8))
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [50, 50]
    with pytest.raises(ValueError):
        data.synth_dataset(0, 1, 2)


def test_synth_linearly_separable():
    # closed-form probe: project on the difference of class means (Fisher direction
    # with identity covariance, which is exact for isotropic unit noise)
    train, test = data.synth_splits(0, 1000, 1000, 2, (3, 16, 16))
    xt, xs = train.images.reshape(len(train), -1), test.images.reshape(len(test), -1)
    mu0, mu1 = xt[train.labels == 0].mean(0), xt[train.labels == 1].mean(0)
    pred = (xs - (mu0 + mu1) / 2) @ (mu1 - mu0) > 0
    assert np.mean(pred == test.labels) > 0.95


def test_normalize_uses_train_statistics():
    gen = np.random.default_rng(0)
    train = data.Dataset(gen.normal(5, 2, (50, 3, 4, 4)), np.zeros(50, int), 2)
    test = data.Dataset(gen.normal(9, 2, (20, 3, 4, 4)), np.zeros(20, int), 2, "test")
    ntr, nte = data.normalize(train, test)
    np.testing.assert_allclose(ntr.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(ntr.images.std(axis=(0, 2, 3)), 1, atol=1e-4)
    mean, std = data.channel_stats(train.images)
    np.testing.assert_allclose(nte.images, (test.images - mean[:, None, None]) / std[:, None, None], rtol=1e-5)


def test_dataset_validation():
    with pytest.raises(FormatError):
        data.Dataset(np.zeros((2, 1, 1, 1)), np.array([0]), 2)
    with pytest.raises(FormatError):
        data.Dataset(np.zeros((1, 1, 1, 1)), np.array([2]), 2)


def test_batches_cover_epoch_and_depend_on_epoch():
    a = np.concatenate(list(data.batches(10, 3, seed=1, epoch=0)))
    b = np.concatenate(list(data.batches(10, 3, seed=1, epoch=1)))
    assert sorted(a) == list(range(10)) and not np.array_equal(a, b)
    assert [len(i) for i in data.batches(10, 4)] == [4, 4, 2]
