import gzip

import numpy as np
import pytest

from dfme.datasets import (load_csv, load_dataset, load_digits, load_idx_pair, make_blobs, read_idx,
                           train_test_split, write_idx)


def test_blobs_are_in_range_and_balanced():
    data = make_blobs(50, 4, 3, np.random.default_rng(0))
    assert data.x.shape == (200, 3)
    assert np.all(np.abs(data.x) <= 1)
    assert np.bincount(data.y).tolist() == [50] * 4


def test_digits_are_scaled_to_unit_range():
    data = load_digits()
    assert data.x.shape == (1797, 64) and data.n_classes == 10
    assert data.x.min() == -1.0 and data.x.max() == 1.0


def test_stratified_split_keeps_every_class():
    data = load_digits()
    train, test = train_test_split(data, 0.25, np.random.default_rng(0))
    assert len(train) + len(test) == len(data)
    assert set(test.y.tolist()) == set(range(10))


@pytest.mark.parametrize("dtype", [np.uint8, np.int8, ">i2", ">i4", ">f4", ">f8"])
def test_idx_round_trip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) % 100).astype(dtype)
    path = tmp_path / "a.idx"
    write_idx(path, arr)
    np.testing.assert_array_equal(read_idx(path), arr)


def test_gzipped_idx_and_image_label_pairs(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, size=(5, 8, 8)).astype(np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    with open(tmp_path / "img.idx", "rb") as src, gzip.open(tmp_path / "img.idx.gz", "wb") as dst:
        dst.write(src.read())
    write_idx(tmp_path / "lbl.idx", labels)
    data = load_idx_pair(tmp_path / "img.idx.gz", tmp_path / "lbl.idx")
    assert data.x.shape == (5, 64) and data.n_classes == 3
    assert data.x.min() == -1.0 and data.x.max() == 1.0


def test_bad_idx_files(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(ValueError, match="magic"):
        read_idx(tmp_path / "bad")
    write_idx(tmp_path / "short", np.zeros(10, dtype=np.uint8))
    (tmp_path / "short").write_bytes((tmp_path / "short").read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_idx(tmp_path / "short")


def test_csv_with_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,a,b\n0,0,10\n1,5,5\n2,10,0\n")
    data = load_csv(path)
    assert data.y.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(data.x, [[-1, 1], [0, 0], [1, -1]])
    path.write_text("0,1\n1,x\n")
    with pytest.raises(ValueError, match="line 2"):
        load_csv(path)


def test_dataset_descriptors(tmp_path):
    rng = np.random.default_rng(0)
    assert load_dataset("digits", rng).n_classes == 10
    blobs = load_dataset("blobs:5:4", rng)
    assert blobs.input_dim == 5 and blobs.n_classes == 4
    assert load_dataset("blobs", rng).input_dim == 2
    with pytest.raises(ValueError):
        load_dataset("mnist", rng)
