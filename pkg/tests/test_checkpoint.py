"""Binary checkpoint format and ParamStore behavior."""

import numpy as np
import pytest

from msfcn import ParamStore, Tensor, load_checkpoint, save_checkpoint
from msfcn.errors import CheckpointError, InvalidArgument


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "conv1.weight": rng.normal(size=(4, 2, 3, 3)).astype(np.float32),
        "conv1.bias": rng.normal(size=(4,)).astype(np.float32),
        "bn1.running_var": rng.uniform(0.5, 2.0, size=(4,)).astype(np.float64),
    }
    path = tmp_path / "model.msfc"
    save_checkpoint(arrays, path)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(
            loaded[name].view(np.uint8), arrays[name].view(np.uint8)
        ), f"{name} not bit-exact"


def test_save_is_deterministic(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(1, dtype=np.float32)}
    p1, p2 = tmp_path / "c1.msfc", tmp_path / "c2.msfc"
    save_checkpoint(arrays, p1)
    save_checkpoint(arrays, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.msfc"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "trunc.msfc"
    save_checkpoint({"w": np.ones((8, 8), dtype=np.float32)}, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_unicode_names(tmp_path):
    p = tmp_path / "uni.msfc"
    save_checkpoint({"weights/läyer-1": np.zeros(3, dtype=np.float32)}, p)
    assert "weights/läyer-1" in load_checkpoint(p)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", Tensor(np.zeros(2)))
        with pytest.raises(InvalidArgument, match="already registered"):
            store.add("w", Tensor(np.zeros(2)))

    def test_flags_and_iteration(self):
        store = ParamStore()
        store.add("w", Tensor(np.zeros((2, 2))), decayed=True)
        store.add("running_mean", Tensor(np.zeros(2)), trainable=False)
        assert [n for n, _ in store.trainable()] == ["w"]
        assert store.entry("w").decayed and not store.entry("running_mean").decayed
        assert len(list(iter(store))) == 2

    def test_load_rejects_mismatched_names(self, tmp_path):
        store = ParamStore()
        store.add("w", Tensor(np.zeros((2, 2))))
        p = tmp_path / "other.msfc"
        save_checkpoint({"v": np.zeros((2, 2), dtype=np.float32)}, p)
        with pytest.raises(CheckpointError, match="missing"):
            store.load(p)

    def test_load_rejects_mismatched_shape(self, tmp_path):
        store = ParamStore()
        store.add("w", Tensor(np.zeros((2, 2))))
        p = tmp_path / "shape.msfc"
        save_checkpoint({"w": np.zeros((3, 2), dtype=np.float32)}, p)
        with pytest.raises(CheckpointError, match="shape"):
            store.load(p)

    def test_store_roundtrip(self, tmp_path):
        store = ParamStore()
        rng = np.random.default_rng(1)
        store.add("w", Tensor(rng.normal(size=(3, 3)).astype(np.float32)), decayed=True)
        store.add("b", Tensor(rng.normal(size=(3,)).astype(np.float32)))
        p = tmp_path / "store.msfc"
        store.save(p)
        w_before = store["w"].data.copy()
        store["w"].data[:] = 0
        store.load(p)
        assert np.array_equal(store["w"].data, w_before)
