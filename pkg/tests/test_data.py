import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xcnn.data import (
    AugmentConfig, DataError, Dataset, augment, class_counts, find_data_dir, hflip, load_cifar, load_or_synthesize,
    normalize_input, prepare, record_bytes, rgb_to_yuv, shift, subset, subset_size, synthetic_cifar,
    write_cifar_binary,
)


@pytest.fixture(scope="module")
def c10_dir(tmp_path_factory, tiny_cifar):
    return write_cifar_binary(tmp_path_factory.mktemp("c10"), *tiny_cifar)


@pytest.fixture(scope="module")
def c100():
    return synthetic_cifar("cifar100", 60, 30, seed=3)


# loading ----------------------------------------------------------------------------


def test_binary_round_trip(c10_dir, tiny_cifar):
    train, test = load_cifar(c10_dir, strict=False)
    assert (len(train), len(test)) == (200, 100)
    np.testing.assert_array_equal(train.raw, tiny_cifar[0].raw)
    np.testing.assert_array_equal(test.labels, tiny_cifar[1].labels)
    assert train.images.dtype == np.float32 and train.colourspace == "RGB"
    assert 0 <= train.images.min() and train.images.max() <= 1
    assert train.labels.min() >= 0 and train.labels.max() < 10


def test_first_record_bytes_match_file(c10_dir):
    train, _ = load_cifar(c10_dir, strict=False)
    blob = (c10_dir / "data_batch_1.bin").read_bytes()
    assert len(blob) % 3073 == 0
    assert record_bytes(train, 0) == blob[:3073]


def test_strict_counts(c10_dir):
    with pytest.raises(DataError, match="expected 50000"):
        load_cifar(c10_dir)


def test_truncated_file_names_offset(tmp_path, tiny_cifar):
    d = write_cifar_binary(tmp_path, *tiny_cifar)
    path = d / "data_batch_2.bin"
    path.write_bytes(path.read_bytes()[:3073 * 3 + 100])
    with pytest.raises(DataError, match="byte offset 9219"):
        load_cifar(d, strict=False)


def test_bad_label_rejected(tmp_path, tiny_cifar):
    d = write_cifar_binary(tmp_path, *tiny_cifar)
    blob = bytearray((d / "test_batch.bin").read_bytes())
    blob[3073 * 2] = 11
    (d / "test_batch.bin").write_bytes(bytes(blob))
    with pytest.raises(DataError, match="record 2"):
        load_cifar(d, strict=False)


def test_cifar100_fine_labels(tmp_path, c100):
    d = write_cifar_binary(tmp_path, *c100)
    blob = (d / "test.bin").read_bytes()
    assert len(blob) == 30 * 3074
    train, test = load_cifar(d, "cifar100", strict=False)
    np.testing.assert_array_equal(test.labels, c100[1].labels)
    np.testing.assert_array_equal(test.coarse_labels, c100[1].labels // 5)
    assert test.labels.max() < 100 and test.num_classes == 100
    assert record_bytes(test, 0) == blob[:3074]


def test_missing_files(tmp_path, monkeypatch):
    monkeypatch.delenv("DATA_DIR", raising=False)
    with pytest.raises(DataError):
        load_cifar(tmp_path)
    assert find_data_dir("cifar10", tmp_path) is None


def test_data_dir_env_and_subdirectory(tmp_path, tiny_cifar, monkeypatch):
    write_cifar_binary(tmp_path / "cifar-10-batches-bin", *tiny_cifar)
    monkeypatch.setenv("DATA_DIR", str(tmp_path))
    assert find_data_dir("cifar10") == tmp_path
    train, _ = load_or_synthesize("cifar10", strict=False)
    assert train.source == "cifar" and len(train) == 200


def test_synthetic_fallback_warns(tmp_path, monkeypatch, caplog):
    monkeypatch.delenv("DATA_DIR", raising=False)
    with caplog.at_level(logging.WARNING):
        train, test = load_or_synthesize("cifar10", tmp_path, n_train=20, n_test=10)
    assert "synthetic" in caplog.text
    assert train.source == "synthetic" and (len(train), len(test)) == (20, 10)


def test_synthetic_is_seeded():
    a, _ = synthetic_cifar("cifar10", 10, 5, seed=1)
    b, _ = synthetic_cifar("cifar10", 10, 5, seed=1)
    c, _ = synthetic_cifar("cifar10", 10, 5, seed=2)
    np.testing.assert_array_equal(a.raw, b.raw)
    assert not np.array_equal(a.raw, c.raw)


# YUV ----------------------------------------------------------------------------------


def _pixels(rgb):
    img = np.broadcast_to(np.asarray(rgb, np.float64)[:, :, None, None], (len(rgb), 3, 32, 32)).copy()
    return Dataset(img, np.zeros(len(rgb), dtype=np.int64), "RGB")


@given(v=st.floats(0, 1))
def test_yuv_grey_axis(v):
    out = rgb_to_yuv(_pixels([[v, v, v]])).images[0, :, 0, 0]
    np.testing.assert_allclose(out, [v, 0, 0], atol=1e-12)


def test_yuv_red():
    out = rgb_to_yuv(_pixels([[1, 0, 0]])).images[0, :, 0, 0]
    np.testing.assert_allclose(out, [0.299, 0.492 * -0.299, 0.877 * 0.701], atol=1e-12)
    np.testing.assert_allclose(out[1:], [-0.147, 0.615], atol=1e-3)


@given(a=st.floats(-4, 4), seed=st.integers(0, 1000))
def test_yuv_is_linear(a, seed):
    rgb = np.random.default_rng(seed).uniform(0, 1, (2, 3))
    lhs = rgb_to_yuv(_pixels(a * rgb)).images
    rhs = a * rgb_to_yuv(_pixels(rgb)).images
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_yuv_twice_rejected(tiny_cifar):
    with pytest.raises(DataError):
        rgb_to_yuv(rgb_to_yuv(tiny_cifar[0]))


def test_yuv_commutes_with_subset_and_batching(tiny_cifar):
    train = tiny_cifar[0]
    whole = rgb_to_yuv(train)
    np.testing.assert_array_equal(rgb_to_yuv(subset(train, 10)).images, whole.images[:20])
    parts = [rgb_to_yuv(train.take(np.arange(i, i + 50))).images for i in range(0, 200, 50)]
    np.testing.assert_array_equal(np.concatenate(parts), whole.images)


# normalization ---------------------------------------------------------------------------


def test_normalized_training_moments(tiny_cifar):
    train, test, stats = normalize_input(rgb_to_yuv(tiny_cifar[0]), rgb_to_yuv(tiny_cifar[1]))
    x = train.images.astype(np.float64)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(x.var(axis=(0, 2, 3)) - 1).max() < 1e-4
    t = test.images.astype(np.float64)
    assert np.abs(t.mean(axis=(0, 2, 3))).max() > 1e-5 or np.abs(t.var(axis=(0, 2, 3)) - 1).max() > 1e-4
    assert train.stats is stats and test.stats is stats


def test_constant_channel_stays_finite(tiny_cifar):
    train = tiny_cifar[0]
    flat = train.images.copy()
    flat[:, 2] = 0.25
    train = Dataset(flat, train.labels, "RGB")
    out, test, stats = normalize_input(train, tiny_cifar[1])
    assert np.isfinite(out.images).all() and np.isfinite(test.images).all()
    assert stats.std[2] == pytest.approx(np.sqrt(1e-5))
    assert not out.images[:, 2].any()


def test_normalize_rejects_mixed_colourspaces(tiny_cifar):
    with pytest.raises(DataError):
        normalize_input(rgb_to_yuv(tiny_cifar[0]), tiny_cifar[1])


def test_prepare_uses_subset_statistics(tiny_cifar):
    train, test, stats = prepare(*tiny_cifar, p=25)
    assert len(train) == 50 and len(test) == 100 and train.colourspace == "YUV"
    expected = rgb_to_yuv(tiny_cifar[0].take(np.arange(50))).images.mean(axis=(0, 2, 3), dtype=np.float64)
    np.testing.assert_allclose(stats.mean, expected)


# subsetting ----------------------------------------------------------------------------------


def test_subset_sizes():
    assert subset_size(50000, 1) == 500
    assert subset_size(50000, 20) == 10000  # the same size as the test set
    assert subset_size(50000, 15) == 7500
    assert subset_size(200, 0.3) == 1
    assert subset_size(50000, 100) == 50000


def test_subset_identity_and_prefix(tiny_cifar):
    train = tiny_cifar[0]
    full = subset(train, 100)
    np.testing.assert_array_equal(full.images, train.images)
    small = subset(train, 1)
    assert len(small) == 2
    np.testing.assert_array_equal(small.labels, train.labels[:2])
    np.testing.assert_array_equal(subset(train, 1).images, small.images)


@given(p1=st.floats(0.5, 100), p2=st.floats(0.5, 100))
def test_subset_prefix_monotone(tiny_cifar, p1, p2):
    p1, p2 = sorted((p1, p2))
    a, b = subset(tiny_cifar[0], p1), subset(tiny_cifar[0], p2)
    assert len(a) <= len(b)
    np.testing.assert_array_equal(a.raw, b.raw[:len(a)])


def test_subset_rejects_out_of_range(tiny_cifar):
    for p in (0, -1, 101):
        with pytest.raises(ValueError):
            subset(tiny_cifar[0], p)


def test_subset_stratified(tiny_cifar):
    train = tiny_cifar[0]
    out = subset(train, 10, stratified=True)
    counts = class_counts(train)
    np.testing.assert_array_equal(class_counts(out), np.ceil(counts / 10).astype(int))
    # still canonical order: the kept images appear in file order
    rows = [int(np.flatnonzero((train.raw == r).all(axis=(1, 2, 3)))[0]) for r in out.raw]
    assert rows == sorted(rows)


def test_subset_reports_missing_classes(c100, caplog):
    with caplog.at_level(logging.WARNING):
        out = subset(c100[0], 5)
    assert len(out) == 3
    assert "omits" in caplog.text
    assert class_counts(out).sum() == 3


# augmentation -------------------------------------------------------------------------------


def test_augment_identity(rng):
    batch = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    out = augment(batch, AugmentConfig(0, False), rng)
    np.testing.assert_array_equal(out, batch)


def test_double_flip(rng):
    img = rng.standard_normal((3, 32, 32))
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(hflip(img)[:, :, 0], img[:, :, -1])


def test_shift_there_and_back(rng):
    img = rng.standard_normal((3, 32, 32)) + 5
    back = shift(shift(img, 4, 0), -4, 0)
    np.testing.assert_array_equal(back[:, :, :28], img[:, :, :28])
    assert not back[:, :, 28:].any()
    down = shift(img, 0, 2)
    assert not down[:, :2].any()
    np.testing.assert_array_equal(down[:, 2:], img[:, :30])


def test_augment_is_seeded_and_shape_preserving(rng):
    batch = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
    cfg = AugmentConfig()
    a = augment(batch, cfg, np.random.default_rng(5))
    b = augment(batch, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.shape == batch.shape and a.dtype == batch.dtype
    assert not np.array_equal(a, batch)


def test_augment_keeps_labels():
    train, _ = synthetic_cifar("cifar10", 16, 1, seed=9)
    before = train.labels.copy()
    augment(train.images, AugmentConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(train.labels, before)


def test_augment_config_bounds():
    for bad in (-1, 32):
        with pytest.raises(ValueError):
            AugmentConfig(bad)
