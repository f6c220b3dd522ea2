import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdvit.data import (DatasetSpec, load_split, read_labels, read_tensor, save_split, synth_dataset,
                        write_labels, write_tensor)


def test_same_seed_bit_identical():
    a, b = synth_dataset(seed=4), synth_dataset(seed=4)
    for s in ("train", "val", "holdout"):
        np.testing.assert_array_equal(getattr(a, s).images, getattr(b, s).images)
        np.testing.assert_array_equal(getattr(a, s).labels, getattr(b, s).labels)
    c = synth_dataset(seed=5)
    assert not np.array_equal(a.train.images, c.train.images)


def test_shapes_and_balance():
    spec = DatasetSpec(train_per_class=10, val_per_class=3, holdout_per_class=2)
    ds = synth_dataset(spec, 0)
    assert ds.train.images.shape == (80, 3, 16, 16)
    assert len(ds.val) == 24 and len(ds.holdout) == 16
    np.testing.assert_array_equal(np.bincount(ds.train.labels), [10] * 8)
    assert len(ds.informative) == spec.informative_patches


def test_linear_probe_beats_chance():
    ds = synth_dataset(DatasetSpec(), 0)

    def feats(images):
        b = len(images)
        p = images.reshape(b, 3, 4, 4, 4, 4).transpose(0, 2, 4, 1, 3, 5).reshape(b, 16, 48)
        # per-patch mean colour per channel keeps the spatial layout
        return np.concatenate([p.reshape(b, 16, 3, 16).mean(-1).reshape(b, -1), np.ones((b, 1))], axis=1)

    x, y = feats(ds.train.images), np.eye(8)[ds.train.labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    acc = np.mean((feats(ds.val.images) @ w).argmax(1) == ds.val.labels)
    assert acc > 1 / 8 + 0.1


@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.sampled_from([1, 2]))
def test_tensor_roundtrip(shape, version):
    arr = np.random.default_rng(0).normal(size=shape)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.mdvp"
        write_tensor(path, arr, version)
        back = read_tensor(path)
    assert back.shape == tuple(shape)
    if version == 2:
        np.testing.assert_array_equal(back, arr)
    else:
        np.testing.assert_array_equal(back, arr.astype(np.float32))


def test_header_layout(tmp_path):
    path = tmp_path / "x.mdvp"
    write_tensor(path, np.zeros((2, 3)), version=1)
    raw = path.read_bytes()
    assert raw[:4] == b"MDVP"
    assert struct.unpack_from("<HHII", raw, 4) == (1, 2, 2, 3)
    assert len(raw) == 16 + 6 * 4


def test_corrupt_files_rejected(tmp_path):
    path = tmp_path / "x.mdvp"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        read_tensor(path)
    write_tensor(path, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_tensor(path)
    with pytest.raises(ValueError):
        write_tensor(path, np.zeros(2), version=7)


def test_split_roundtrip(tmp_path):
    ds = synth_dataset(DatasetSpec(train_per_class=2), 0)
    save_split(tmp_path, "train", ds.train, version=2)
    back = load_split(tmp_path, "train")
    np.testing.assert_array_equal(back.images, ds.train.images)
    np.testing.assert_array_equal(back.labels, ds.train.labels)
    write_labels(tmp_path / "l", [0, 65535])
    np.testing.assert_array_equal(read_labels(tmp_path / "l"), [0, 65535])
