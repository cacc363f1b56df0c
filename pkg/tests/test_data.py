"""Dataset ingestion, synthetic data, and augmentation contracts."""

import numpy as np
import pytest
import torch

from backlab import (
    FormatError,
    LabeledDataset,
    augment_batch,
    load_cifar,
    make_synthetic,
    read_index_file,
    save_cifar,
    write_index_file,
)


def write_records(path, records):
    """Byte-level oracle: hand-assemble CIFAR records."""
    blob = b"".join(bytes([label]) + bytes(pixels) for label, pixels in records)
    path.write_bytes(blob)


class TestLoadCifar:
    def test_max_byte_record(self, tmp_path):
        f = tmp_path / "one.bin"
        write_records(f, [(2, [255] * 3072)])
        ds = load_cifar(str(f))
        assert ds.labels.tolist() == [2]
        assert torch.all(ds.images == 1.0)

    def test_zero_record(self, tmp_path):
        f = tmp_path / "zero.bin"
        write_records(f, [(0, [0] * 3072)])
        ds = load_cifar(str(f))
        assert torch.all(ds.images == 0.0)

    def test_three_records_file_order(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [(int(l), rng.integers(0, 256, 3072).tolist()) for l in (5, 0, 9)]
        f = tmp_path / "three.bin"
        write_records(f, recs)
        ds = load_cifar(str(f))
        assert len(ds) == 3
        assert ds.labels.tolist() == [5, 0, 9]
        # byte-level oracle: value = byte / 255, channel-major layout
        for i, (_, pixels) in enumerate(recs):
            expected = torch.tensor(pixels, dtype=torch.float32).reshape(3, 32, 32) / 255.0
            assert torch.equal(ds.images[i], expected)

    def test_malformed_length(self, tmp_path):
        f = tmp_path / "bad.bin"
        f.write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError):
            load_cifar(str(f))

    def test_label_out_of_range(self, tmp_path):
        f = tmp_path / "bad_label.bin"
        write_records(f, [(11, [0] * 3072)])
        with pytest.raises(FormatError):
            load_cifar(str(f))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        recs = [(int(rng.integers(0, 10)), rng.integers(0, 256, 3072).tolist())
                for _ in range(7)]
        f = tmp_path / "orig.bin"
        write_records(f, recs)
        ds = load_cifar(str(f))
        g = tmp_path / "copy.bin"
        save_cifar(ds, str(g))
        assert f.read_bytes() == g.read_bytes()
        back = load_cifar(str(g))
        assert torch.equal(back.images, ds.images)
        assert torch.equal(back.labels, ds.labels)


class TestSynthetic:
    def test_counts(self):
        ds = make_synthetic(2, 5, (8, 8), seed=0)
        assert len(ds) == 10
        assert (ds.labels == 0).sum() == 5 and (ds.labels == 1).sum() == 5

    def test_deterministic(self):
        a = make_synthetic(4, 10, (8, 8), seed=3)
        b = make_synthetic(4, 10, (8, 8), seed=3)
        assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)

    def test_range_and_shape(self):
        ds = make_synthetic(3, 4, (16, 12), seed=1, channels=1)
        assert ds.images.shape == (12, 1, 16, 12)
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_linearly_separable(self):
        # oracle: a linear probe should exceed 90% accuracy
        from sklearn.linear_model import LogisticRegression

        ds = make_synthetic(3, 100, (16, 16), seed=1)
        X = ds.images.reshape(len(ds), -1).numpy()
        y = ds.labels.numpy()
        probe = LogisticRegression(max_iter=200).fit(X, y)
        assert probe.score(X, y) > 0.90

    def test_per_class_guard(self):
        with pytest.raises(ValueError):
            make_synthetic(2, 0, (8, 8), seed=0)


class TestAugment:
    def test_range_preserved(self):
        ds = make_synthetic(2, 30, (16, 16), seed=0)
        g = torch.Generator().manual_seed(1)
        out = augment_batch(ds.images, g)
        assert out.shape == ds.images.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_under_generator(self):
        ds = make_synthetic(2, 10, (16, 16), seed=0)
        a = augment_batch(ds.images, torch.Generator().manual_seed(5))
        b = augment_batch(ds.images, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_flip_only_mirrors(self):
        x = torch.rand(4, 3, 8, 8)
        g = torch.Generator().manual_seed(0)
        out = augment_batch(x, g, random_crop=False, horizontal_flip=True)
        for i in range(4):
            same = torch.equal(out[i], x[i])
            flipped = torch.equal(out[i], torch.flip(x[i], dims=(2,)))
            assert same or flipped

    def test_crop_matches_manual_pad(self):
        # oracle: some offset of the reflect-padded image reproduces each crop
        x = torch.rand(2, 1, 6, 6)
        g = torch.Generator().manual_seed(2)
        out = augment_batch(x, g, random_crop=True, horizontal_flip=False)
        padded = torch.nn.functional.pad(x, (4, 4, 4, 4), mode="reflect")
        for i in range(2):
            found = any(
                torch.equal(out[i], padded[i, :, r:r + 6, c:c + 6])
                for r in range(9) for c in range(9))
            assert found


class TestIndexSidecar:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "idx.txt"
        write_index_file([3, 1, 4, 1, 5], str(p))
        assert read_index_file(str(p)) == [3, 1, 4, 1, 5]

    def test_empty(self, tmp_path):
        p = tmp_path / "idx.txt"
        write_index_file([], str(p))
        assert read_index_file(str(p)) == []


class TestLabeledDataset:
    def test_invariants(self):
        with pytest.raises(ValueError):
            LabeledDataset(images=torch.rand(3, 2, 2), labels=torch.zeros(3), num_classes=2)
        with pytest.raises(ValueError):
            LabeledDataset(images=torch.rand(3, 1, 2, 2), labels=torch.zeros(2),
                           num_classes=2)

    def test_subset_keeps_provenance(self):
        ds = make_synthetic(2, 5, (4, 4), seed=0)
        ds.poisoned[3] = True
        sub = ds.subset([3, 4])
        assert sub.poisoned.tolist() == [True, False]
