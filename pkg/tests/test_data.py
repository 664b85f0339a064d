import numpy as np
import pytest

from rcs.data import (
    DataError,
    Dataset,
    DatasetSpec,
    class_counts,
    generate,
    load_dataset,
    save_dataset,
    split_validation,
)
from rcs.rng import philox_rng


class TestSpec:
    def test_validation(self):
        with pytest.raises(DataError):
            DatasetSpec(n=0, dim=4)
        with pytest.raises(DataError):
            DatasetSpec(n=4, dim=4, cov_scale=0.0)

    def test_class_counts_balanced(self):
        assert class_counts(10, 2) == [5, 5]
        assert class_counts(10, 3) == [4, 3, 3]


class TestGenerate:
    def test_balanced_labels(self):
        ds = generate(DatasetSpec(n=10, dim=3, classes=2, seed=1))
        assert np.sum(ds.y == 0) == 5 and np.sum(ds.y == 1) == 5

    def test_deterministic(self):
        a = generate(DatasetSpec(n=50, dim=4, classes=3, seed=9))
        b = generate(DatasetSpec(n=50, dim=4, classes=3, seed=9))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        c = generate(DatasetSpec(n=50, dim=4, classes=3, seed=10))
        assert not np.array_equal(a.x, c.x)

    def test_unlabeled(self):
        ds = generate(DatasetSpec(n=20, dim=4, classes=0, seed=2))
        assert ds.y is None and ds.x.shape == (20, 4)

    def test_empirical_means_close_to_spec_means(self):
        spec = DatasetSpec(n=10_000, dim=4, classes=2, mean_scale=3.0, cov_scale=1.0, seed=5)
        ds = generate(spec)
        means = 3.0 * philox_rng(5, "dataset").standard_normal((2, 4))
        for c in range(2):
            emp = ds.x[ds.y == c].mean(axis=0)
            n_c = np.sum(ds.y == c)
            assert np.all(np.abs(emp - means[c]) <= 3.0 * 1.0 / np.sqrt(n_c))


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        ds = generate(DatasetSpec(n=30, dim=5, classes=3, seed=4))
        path = tmp_path / "d.rcsd"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.x, ds.x.astype("<f4").astype(np.float64))
        assert np.array_equal(loaded.y, ds.y)

    def test_byte_identical_files(self, tmp_path):
        a, b = tmp_path / "a.rcsd", tmp_path / "b.rcsd"
        save_dataset(a, generate(DatasetSpec(n=30, dim=5, classes=3, seed=4)))
        save_dataset(b, generate(DatasetSpec(n=30, dim=5, classes=3, seed=4)))
        assert a.read_bytes() == b.read_bytes()

    def test_magic_and_layout(self, tmp_path):
        import struct

        path = tmp_path / "d.rcsd"
        save_dataset(path, generate(DatasetSpec(n=6, dim=2, classes=2, seed=1)))
        raw = path.read_bytes()
        assert raw[:4] == b"RCSD"
        version, n, d, c = struct.unpack("<IQII", raw[4:24])
        assert (version, n, d, c) == (1, 6, 2, 2)
        assert len(raw) == 24 + 6 * 2 * 4 + 6 * 4

    def test_unlabeled_file_has_no_label_block(self, tmp_path):
        path = tmp_path / "u.rcsd"
        save_dataset(path, generate(DatasetSpec(n=6, dim=2, classes=0, seed=1)))
        assert len(path.read_bytes()) == 24 + 6 * 2 * 4
        assert load_dataset(path).y is None

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.rcsd"
        path.write_bytes(b"WHAT" + b"\x00" * 24)
        with pytest.raises(DataError, match="magic"):
            load_dataset(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "trunc.rcsd"
        save_dataset(path, generate(DatasetSpec(n=6, dim=2, classes=2, seed=1)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_dataset(path)


class TestSplit:
    def test_disjoint_and_complete(self):
        train, val = split_validation(100, 0.05, seed=3)
        assert len(val) == 5 and len(train) == 95
        assert not set(train) & set(val)
        assert sorted(set(train) | set(val)) == list(range(100))

    def test_deterministic(self):
        assert np.array_equal(split_validation(50, 0.1, 7)[1], split_validation(50, 0.1, 7)[1])
        assert not np.array_equal(split_validation(50, 0.1, 7)[1], split_validation(50, 0.1, 8)[1])

    def test_at_least_one_validation_point(self):
        train, val = split_validation(30, 0.001, seed=1)
        assert len(val) == 1

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            split_validation(10, 0.0, 1)


def test_dataset_label_length_checked():
    with pytest.raises(DataError):
        Dataset(x=np.zeros((3, 2)), y=np.array([0, 1]))
