import gzip

import numpy as np
import pytest

from apcsim.datasets import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, load_csv, load_mnist_idx, make_blobs, read_idx, write_idx,
)
from apcsim.errors import FormatError


def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    for name in ("i.idx", "i.idx.gz"):
        path = write_idx(tmp_path / name, images)
        assert np.array_equal(read_idx(path, IDX_IMAGES_MAGIC), images)
    assert gzip.decompress((tmp_path / "i.idx.gz").read_bytes())[:4] == b"\x00\x00\x08\x03"


def test_idx_errors_name_offsets(tmp_path):
    path = write_idx(tmp_path / "l.idx", np.arange(5, dtype=np.uint8))
    with pytest.raises(FormatError, match="offset 0"):
        read_idx(path, IDX_IMAGES_MAGIC)
    raw = path.read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="offset 8"):
        read_idx(tmp_path / "short.idx", IDX_LABELS_MAGIC)
    (tmp_path / "tiny.idx").write_bytes(raw[:2])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "tiny.idx", IDX_LABELS_MAGIC)


def test_mnist_loader(tmp_path):
    images = np.full((3, 28, 28), 255, dtype=np.uint8)
    write_idx(tmp_path / "img.gz", images)
    write_idx(tmp_path / "lab.gz", np.array([1, 2, 3], dtype=np.uint8))
    data = load_mnist_idx(tmp_path / "img.gz", tmp_path / "lab.gz", limit=2)
    assert data.inputs.shape == (2, 1, 28, 28) and data.inputs.max() == 1.0
    assert list(data.labels) == [1, 2] and data.class_count == 10
    write_idx(tmp_path / "lab4.gz", np.arange(4, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img.gz", tmp_path / "lab4.gz")


def test_csv_loader(tmp_path):
    (tmp_path / "d.csv").write_text("1,0,255\n0,255,0\n")
    data = load_csv(tmp_path / "d.csv", scale=1 / 255)
    assert data.inputs.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert list(data.labels) == [1, 0] and data.class_count == 2
    (tmp_path / "bad.csv").write_text("1,0,x\n")
    with pytest.raises(FormatError, match=":1:"):
        load_csv(tmp_path / "bad.csv")
    (tmp_path / "ragged.csv").write_text("1,0\n0,1,2\n")
    with pytest.raises(FormatError):
        load_csv(tmp_path / "ragged.csv")


def test_blobs_are_seeded_and_balanced():
    a, b = make_blobs(100, 0.2, seed=3), make_blobs(100, 0.2, seed=3)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert np.bincount(a.labels).tolist() == [50, 50]
    assert not np.array_equal(a.inputs, make_blobs(100, 0.2, seed=4).inputs)
    means = [a.inputs[a.labels == k].mean(axis=0) for k in (0, 1)]
    np.testing.assert_allclose(means, [[1, 3], [3, 1]], atol=0.1)
    with pytest.raises(ValueError):
        make_blobs(10, 0.1, seed=0, classes=5)


def test_bundled_subset_is_stratified():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "data" / "mnist_subset"
    for split, n in (("train", 2000), ("t10k", 500)):
        data = load_mnist_idx(root / f"{split}-images-idx3-ubyte.gz", root / f"{split}-labels-idx1-ubyte.gz")
        assert len(data) == n
        assert np.bincount(data.labels).tolist() == [n // 10] * 10
