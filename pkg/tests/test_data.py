"""Data plumbing: binary CIFAR-10 records, P6 pixmaps, stratified splits,
subsampling, bicubic resize, normalisation, and the synthetic generator."""

import numpy as np
import pytest

from dsfusion.data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    CIFAR10_RECORD_BYTES,
    LabeledDataset,
    Preprocess,
    load_cifar10_binary,
    load_folder_dataset,
    normalize,
    read_ppm,
    read_split_manifest,
    resize_bicubic,
    stratified_split,
    stratified_split_indices,
    subsample_fraction,
    synth_dataset,
    write_ppm,
    write_split_manifest,
)


def _make_record(label: int, rgb_planes: np.ndarray) -> bytes:
    assert rgb_planes.shape == (3, 32, 32)
    return bytes([label]) + rgb_planes.astype(np.uint8).tobytes()


class TestCifarLoader:
    def test_two_handcrafted_records_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        planes1 = np.full((3, 32, 32), 255, dtype=np.uint8)
        planes2 = rng.integers(0, 256, (3, 32, 32)).astype(np.uint8)
        path = tmp_path / "batch.bin"
        path.write_bytes(_make_record(3, planes1) + _make_record(9, planes2))
        ds = load_cifar10_binary(path)
        assert len(ds) == 2
        np.testing.assert_array_equal(ds.labels, [3, 9])
        np.testing.assert_array_equal(ds.images[0], np.ones((3, 32, 32), dtype=np.float32))
        np.testing.assert_array_equal(ds.images[1], planes2.astype(np.float32) / 255.0)

    def test_record_arithmetic(self, tmp_path):
        path = tmp_path / "two.bin"
        path.write_bytes(bytes(CIFAR10_RECORD_BYTES * 2))
        assert len(load_cifar10_binary(path)) == 2

    def test_truncated_file_rejected_with_offset(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(CIFAR10_RECORD_BYTES + 100))
        with pytest.raises(ValueError, match=f"byte offset {CIFAR10_RECORD_BYTES}"):
            load_cifar10_binary(path)

    def test_bad_label_byte_rejected(self, tmp_path):
        rec = bytearray(CIFAR10_RECORD_BYTES)
        rec[0] = 17
        path = tmp_path / "label.bin"
        path.write_bytes(bytes(rec))
        with pytest.raises(ValueError, match="label byte 17"):
            load_cifar10_binary(path)

    def test_files_assembled_in_sorted_order(self, tmp_path):
        a = tmp_path / "data_batch_2.bin"
        b = tmp_path / "data_batch_1.bin"
        rec = bytearray(CIFAR10_RECORD_BYTES)
        rec[0] = 1
        a.write_bytes(bytes(rec))
        rec[0] = 0
        b.write_bytes(bytes(rec))
        ds = load_cifar10_binary([a, b])
        np.testing.assert_array_equal(ds.labels, [0, 1])


class TestPpm:
    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (3, 5, 7)).astype(np.float32) / 255.0
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        np.testing.assert_array_equal(read_ppm(path), img)

    def test_header_with_comment(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        img = read_ppm(path)
        assert img.shape == (3, 1, 2)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "p5.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError, match="P6"):
            read_ppm(path)

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "deep.ppm"
        path.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(ValueError, match="maxval"):
            read_ppm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ValueError, match="truncated"):
            read_ppm(path)


class TestFolderLoader:
    def _build_tree(self, root, sizes=((4, 4), (4, 4)), names=("corn_rust", "apple_rot")):
        rng = np.random.default_rng(0)
        for name, (h, w) in zip(names, sizes):
            d = root / name
            d.mkdir()
            for i in range(3):
                write_ppm(d / f"img_{i}.ppm", rng.random((3, h, w)).astype(np.float32))

    def test_lexicographic_class_order(self, tmp_path):
        self._build_tree(tmp_path)
        ds = load_folder_dataset(tmp_path)
        assert ds.class_names == ["apple_rot", "corn_rust"]
        assert len(ds) == 6
        np.testing.assert_array_equal(np.unique(ds.labels), [0, 1])

    def test_empty_class_rejected(self, tmp_path):
        (tmp_path / "empty_class").mkdir()
        with pytest.raises(ValueError, match="empty"):
            load_folder_dataset(tmp_path)

    def test_mixed_sizes_rejected_without_resize(self, tmp_path):
        self._build_tree(tmp_path, sizes=((4, 4), (6, 6)))
        with pytest.raises(ValueError, match="mixed"):
            load_folder_dataset(tmp_path)

    def test_mixed_sizes_ok_with_resize(self, tmp_path):
        self._build_tree(tmp_path, sizes=((4, 4), (6, 6)))
        ds = load_folder_dataset(tmp_path, resize_hw=(8, 8))
        assert ds.images.shape == (6, 3, 8, 8)

    def test_malformed_image_names_path(self, tmp_path):
        d = tmp_path / "klass"
        d.mkdir()
        bad = d / "broken.ppm"
        bad.write_bytes(b"JUNK")
        with pytest.raises(ValueError, match="broken.ppm"):
            load_folder_dataset(tmp_path)


class TestSplits:
    def _dataset(self, per_class=(100, 100, 100)):
        labels = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
        images = np.zeros((len(labels), 3, 4, 4), dtype=np.float32)
        images[:, 0, 0, 0] = np.arange(len(labels))  # make samples identifiable
        return LabeledDataset(images, labels, [f"c{c}" for c in range(len(per_class))])

    def test_eighty_twenty_exact(self):
        ds = self._dataset()
        train, test = stratified_split(ds, 0.8, seed=0)
        for c in range(3):
            assert (train.labels == c).sum() == 80
            assert (test.labels == c).sum() == 20

    def test_small_class_keeps_test_sample(self):
        ds = self._dataset(per_class=(5, 5))
        train, test = stratified_split(ds, 0.8, seed=1)
        assert (train.labels == 0).sum() == 4
        assert (test.labels == 0).sum() == 1

    def test_singleton_class_rejected(self):
        ds = self._dataset(per_class=(3, 1))
        with pytest.raises(ValueError, match="at least 2"):
            stratified_split(ds, 0.8, seed=0)

    def test_deterministic_per_seed(self):
        ds = self._dataset()
        a = stratified_split_indices(ds.labels, 0.8, seed=7)
        b = stratified_split_indices(ds.labels, 0.8, seed=7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        c = stratified_split_indices(ds.labels, 0.8, seed=8)
        assert not np.array_equal(a[0], c[0])

    def test_union_and_disjointness(self):
        ds = self._dataset(per_class=(13, 31, 7))
        train_idx, test_idx = stratified_split_indices(ds.labels, 0.8, seed=3)
        assert np.intersect1d(train_idx, test_idx).size == 0
        np.testing.assert_array_equal(np.sort(np.concatenate([train_idx, test_idx])), np.arange(len(ds)))

    def test_manifest_round_trip(self, tmp_path):
        ds = self._dataset(per_class=(10, 10))
        train_idx, test_idx = stratified_split_indices(ds.labels, 0.8, seed=0)
        path = tmp_path / "split.tsv"
        write_split_manifest(path, len(ds), train_idx)
        got_train, got_test = read_split_manifest(path)
        np.testing.assert_array_equal(got_train, train_idx)
        np.testing.assert_array_equal(got_test, test_idx)


class TestSubsample:
    def _dataset(self, per_class):
        labels = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
        images = np.zeros((len(labels), 3, 2, 2), dtype=np.float32)
        return LabeledDataset(images, labels, [f"c{c}" for c in range(len(per_class))])

    def test_ten_percent_balanced(self):
        ds = self._dataset([100] * 10)
        sub = subsample_fraction(ds, 0.10, seed=0)
        assert len(sub) == 100
        for c in range(10):
            assert (sub.labels == c).sum() == 10

    def test_fraction_one_is_identity(self):
        ds = self._dataset([9, 17])
        sub = subsample_fraction(ds, 1.0, seed=0)
        np.testing.assert_array_equal(sub.labels, ds.labels)
        np.testing.assert_array_equal(sub.images, ds.images)

    def test_cifar_scale_counts(self):
        ds = self._dataset([5000] * 10)
        sub = subsample_fraction(ds, 0.10, seed=2)
        assert len(sub) == 5000
        assert all((sub.labels == c).sum() == 500 for c in range(10))

    def test_at_least_one_per_class(self):
        ds = self._dataset([3, 3])
        sub = subsample_fraction(ds, 0.01, seed=0)
        assert all((sub.labels == c).sum() == 1 for c in range(2))

    def test_bad_fraction_rejected(self):
        ds = self._dataset([4, 4])
        with pytest.raises(ValueError, match="fraction"):
            subsample_fraction(ds, 0.0, seed=0)


class TestResize:
    def test_constant_image_stays_constant(self):
        img = np.full((3, 5, 5), 0.37, dtype=np.float32)
        out = resize_bicubic(img, 13, 9)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_same_size_bit_identical(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 8)).astype(np.float32)
        out = resize_bicubic(img, 8, 8)
        assert np.array_equal(out, img)

    def test_cifar_to_paper_size(self):
        img = np.zeros((3, 32, 32), dtype=np.float32)
        assert resize_bicubic(img, 224, 224).shape == (3, 224, 224)

    def test_batched_resize(self):
        rng = np.random.default_rng(1)
        batch = rng.random((4, 3, 8, 8)).astype(np.float32)
        out = resize_bicubic(batch, 16, 16)
        assert out.shape == (4, 3, 16, 16)
        np.testing.assert_allclose(out[2], resize_bicubic(batch[2], 16, 16), atol=1e-6)

    def test_interpolates_linear_ramp_interior(self):
        # Catmull-Rom reproduces linear functions exactly away from edges
        img = np.tile(np.arange(8, dtype=np.float64), (8, 1))
        out = resize_bicubic(img, 8, 15)
        src = (np.arange(15) + 0.5) * 8.0 / 15.0 - 0.5
        interior = (src > 1.0) & (src < 6.0)
        np.testing.assert_allclose(out[4][interior], src[interior], atol=1e-9)


class TestNormalize:
    def test_channel_mean_maps_to_zero(self):
        pre = Preprocess(mean=(0.2, 0.4, 0.6), std=(1.0, 2.0, 3.0))
        img = np.stack([np.full((4, 4), m) for m in (0.2, 0.4, 0.6)]).astype(np.float32)
        out = normalize(img, pre)
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_identity_normalisation(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 3, 4, 4)).astype(np.float32)
        out = normalize(img, Preprocess())
        np.testing.assert_array_equal(out, img)

    def test_cifar_red_plane(self):
        pre = Preprocess(mean=CIFAR10_MEAN, std=CIFAR10_STD)
        img = np.zeros((3, 4, 4), dtype=np.float32)
        img[0] = 0.4914
        out = normalize(img, pre)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-6)

    def test_zero_std_rejected(self):
        with pytest.raises(ValueError, match="std"):
            Preprocess(std=(1.0, 0.0, 1.0))


class TestSynth:
    def test_shapes_and_balance(self):
        ds = synth_dataset(3, 100, 32, seed=0)
        assert ds.images.shape == (300, 3, 32, 32)
        assert all((ds.labels == c).sum() == 100 for c in range(3))
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_zero_noise_within_class_identical(self):
        ds = synth_dataset(4, 5, 16, seed=1, noise_std=0.0)
        for c in range(4):
            cls = ds.images[ds.labels == c]
            assert np.array_equal(cls[0], cls[1])
            assert np.array_equal(cls[0], cls[4])

    def test_nearest_centroid_perfect_at_zero_noise(self):
        ds = synth_dataset(5, 10, 16, seed=2, noise_std=0.0)
        flat = ds.images.reshape(len(ds), -1)
        centroids = np.stack([flat[ds.labels == c].mean(axis=0) for c in range(5)])
        d = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        preds = d.argmin(axis=1)
        assert (preds == ds.labels).mean() == 1.0

    def test_deterministic_per_seed(self):
        a = synth_dataset(3, 4, 8, seed=9)
        b = synth_dataset(3, 4, 8, seed=9)
        assert np.array_equal(a.images, b.images)
        c = synth_dataset(3, 4, 8, seed=10)
        assert not np.array_equal(a.images, c.images)

    def test_too_few_classes_rejected(self):
        with pytest.raises(ValueError, match="num_classes"):
            synth_dataset(1, 10, 16)


class TestLabeledDataset:
    def test_label_range_validated(self):
        with pytest.raises(ValueError, match="labels"):
            LabeledDataset(np.zeros((2, 3, 2, 2)), [0, 5], ["a", "b"])

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            LabeledDataset(np.zeros((2, 3, 2, 2)), [0], ["a"])

    def test_subset_preserves_classes(self):
        ds = synth_dataset(3, 4, 8, seed=0)
        sub = ds.subset([0, 5, 9])
        assert sub.class_names == ds.class_names
        assert len(sub) == 3
