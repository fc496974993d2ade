"""Attention map containers, mass-preserving resizing, and array persistence."""

import numpy as np
import pytest

from matte.arrayio import load_arrays, save_arrays
from matte.attention import AttentionMapStack, resize_mass_preserving


class TestResize:
    def test_upsample_preserves_mass(self):
        arr = np.random.default_rng(0).random((4, 4))
        up = resize_mass_preserving(arr, 8)
        assert up.shape == (8, 8)
        assert up.sum() == pytest.approx(arr.sum(), rel=1e-12)

    def test_downsample_preserves_mass(self):
        arr = np.random.default_rng(1).random((8, 8))
        down = resize_mass_preserving(arr, 2)
        assert down.shape == (2, 2)
        assert down.sum() == pytest.approx(arr.sum(), rel=1e-12)

    def test_upsample_spreads_uniformly(self):
        arr = np.array([[4.0]])
        up = resize_mass_preserving(arr, 2)
        np.testing.assert_allclose(up, np.full((2, 2), 1.0))

    def test_identity(self):
        arr = np.random.default_rng(2).random((4, 4))
        np.testing.assert_array_equal(resize_mass_preserving(arr, 4), arr)

    def test_non_integer_ratio_rejected(self):
        with pytest.raises(ValueError):
            resize_mass_preserving(np.zeros((4, 4)), 6)


def small_stack():
    stack = AttentionMapStack(metadata={"seed": 3})
    stack.add(1, 999, "dog", np.full((2, 2), 0.5, dtype=np.float32))
    stack.add(1, 0, "dog", np.full((2, 2), 0.25, dtype=np.float32))
    stack.add(7, 999, "<c>", np.full((1, 1), 2.0, dtype=np.float32))
    return stack


class TestStack:
    def test_accessors(self):
        stack = small_stack()
        assert stack.tokens() == ("<c>", "dog")
        assert stack.layers() == (1, 7)
        assert stack.timesteps() == (0, 999)
        assert stack.map_for(1, 999, "dog")[0, 0] == pytest.approx(0.5)

    def test_entries_filter(self):
        stack = small_stack()
        keys = [key for key, _ in stack.entries("dog")]
        assert keys == [(1, 0, "dog"), (1, 999, "dog")]

    def test_add_overwrites_same_key(self):
        stack = small_stack()
        stack.add(1, 999, "dog", np.zeros((2, 2), dtype=np.float32))
        assert stack.map_for(1, 999, "dog").max() == 0.0

    def test_negative_values_rejected(self):
        stack = AttentionMapStack()
        with pytest.raises(ValueError):
            stack.add(1, 0, "x", np.array([[-1.0]], dtype=np.float32))

    def test_pipe_in_token_rejected(self):
        stack = AttentionMapStack()
        with pytest.raises(ValueError):
            stack.add(1, 0, "a|b", np.zeros((1, 1), dtype=np.float32))

    def test_normalize_peak_one(self):
        normed = small_stack().normalize()
        assert normed.normalized
        for _, arr in normed.entries():
            assert arr.max() == pytest.approx(1.0)

    def test_save_load_round_trip(self, tmp_path):
        stack = small_stack()
        path = tmp_path / "stack.bin"
        stack.save(path)
        loaded = AttentionMapStack.load(path)
        assert loaded.metadata == stack.metadata
        assert set(loaded.maps) == set(stack.maps)
        for key, arr in stack.maps.items():
            np.testing.assert_array_equal(loaded.maps[key], arr)

    def test_concat_disjoint(self):
        a = small_stack()
        b = AttentionMapStack()
        b.add(2, 100, "cat", np.ones((4, 4), dtype=np.float32))
        merged = a.concat(b)
        assert len(merged.maps) == len(a.maps) + 1

    def test_concat_overlap_rejected(self):
        a = small_stack()
        with pytest.raises(ValueError):
            a.concat(small_stack())


class TestArrayIO:
    def test_round_trip_and_determinism(self, tmp_path):
        arrays = {
            "a": np.arange(6, dtype=np.float64).reshape(2, 3),
            "b": np.ones((3,), dtype=np.float32),
        }
        meta = {"kind": "test", "n": 2}
        p1 = tmp_path / "one.bin"
        p2 = tmp_path / "two.bin"
        save_arrays(p1, arrays, meta)
        save_arrays(p2, arrays, meta)
        assert p1.read_bytes() == p2.read_bytes()
        loaded, loaded_meta = load_arrays(p1)
        assert loaded_meta == meta
        for name, arr in arrays.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].dtype == arr.dtype

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not-a-container")
        with pytest.raises(ValueError):
            load_arrays(path)
