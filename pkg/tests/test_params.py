"""Parameter store, Xavier init, Adam, and checkpoint container."""
from __future__ import annotations

import numpy as np
import pytest

from hypervrp.autodiff import Tensor
from hypervrp.errors import CheckpointFormatError
from hypervrp.params import (
    AdamState,
    ParameterStore,
    adam_step,
    clip_gradients,
    load_checkpoint,
    save_checkpoint,
    xavier_init,
)


class TestParameterStore:
    def _store(self):
        store = ParameterStore()
        store.add("enc.w", np.ones((3, 2)), "rl")
        store.add("enc.sel", np.full((2, 2), 2.0), "hg")
        store.add("enc.bn.mean", np.zeros(2), "stats")
        return store

    def test_groups_and_lookup(self):
        store = self._store()
        assert store.names("rl") == ["enc.w"]
        assert store.names("hg") == ["enc.sel"]
        assert store.group_of("enc.bn.mean") == "stats"
        assert len(store) == 3

    def test_stats_buffers_never_require_grad(self):
        store = self._store()
        assert not store.tensor("enc.bn.mean").requires_grad
        assert store.tensor("enc.w").requires_grad

    def test_duplicate_name_rejected(self):
        store = self._store()
        with pytest.raises(ValueError, match="duplicate"):
            store.add("enc.w", np.zeros(2), "rl")

    def test_unknown_group_rejected(self):
        with pytest.raises(ValueError, match="unknown group"):
            ParameterStore().add("x", np.zeros(2), "nope")

    def test_gradient_harvest_by_group(self):
        store = self._store()
        store.tensor("enc.w").grad = np.full((3, 2), 5.0)
        grads = store.gradients("rl")
        assert list(grads) == ["enc.w"]
        assert store.gradients("hg") == {}
        # harvested arrays are copies
        grads["enc.w"][0, 0] = -1.0
        assert store.tensor("enc.w").grad[0, 0] == 5.0

    def test_copy_values_from(self):
        a, b = self._store(), self._store()
        b.tensor("enc.w").data = np.full((3, 2), 9.0)
        a.copy_values_from(b)
        assert np.array_equal(a.tensor("enc.w").data, b.tensor("enc.w").data)
        # deep copy: later edits to b do not leak into a
        b.tensor("enc.w").data[0, 0] = -7.0
        assert a.tensor("enc.w").data[0, 0] == 9.0


class TestXavier:
    def test_deterministic(self):
        a = xavier_init((16, 8), seed=42)
        b = xavier_init((16, 8), seed=42)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, xavier_init((16, 8), seed=43))

    def test_bound_respected(self):
        w = xavier_init((64, 32), seed=0)
        bound = np.sqrt(6.0 / (64 + 32))
        assert np.all(np.abs(w) <= bound)

    def test_variance_close_to_glorot(self):
        # uniform(-b, b) has variance b^2/3 = 2/(fan_in + fan_out)
        w = xavier_init((256, 256), seed=7)
        want = 2.0 / 512
        assert abs(w.var() - want) / want <= 0.2

    def test_vector_shape(self):
        v = xavier_init((10,), seed=1)
        assert v.shape == (10,)
        assert np.all(np.abs(v) <= np.sqrt(6.0 / 11))


class TestAdam:
    def test_hand_step(self):
        # fresh state, g=1: update is exactly -lr * m_hat/(sqrt(v_hat)+eps)
        store = ParameterStore()
        store.add("p", np.array([1.0]), "rl")
        state = AdamState()
        adam_step(store, {"p": np.array([1.0])}, state, lr=1e-3)
        m_hat = 0.1 / (1 - 0.9)
        v_hat = 0.001 / (1 - 0.999)
        want = 1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert store.tensor("p").data[0] == pytest.approx(want, abs=1e-15)
        assert state.step == 1

    def test_zero_gradient_is_identity_on_values(self):
        store = ParameterStore()
        store.add("p", np.array([2.0, -3.0]), "rl")
        state = AdamState()
        before = store.tensor("p").data.copy()
        adam_step(store, {"p": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(store.tensor("p").data, before)
        assert state.step == 1

    def test_group_filtered_step_leaves_others_bit_identical(self):
        store = ParameterStore()
        rng = np.random.default_rng(0)
        store.add("rl.w", rng.standard_normal((4, 4)), "rl")
        store.add("hg.sel", rng.standard_normal((4, 4)), "hg")
        rl_before = store.tensor("rl.w").data.copy()
        state = AdamState()
        adam_step(store, {"hg.sel": rng.standard_normal((4, 4))}, state, lr=0.01)
        assert np.array_equal(store.tensor("rl.w").data, rl_before)
        assert not np.array_equal(store.tensor("hg.sel").data,
                                  store.tensor("rl.w").data)

    def test_descends_a_quadratic(self):
        store = ParameterStore()
        store.add("p", np.array([5.0]), "rl")
        state = AdamState()
        for _ in range(2000):
            p = store.tensor("p").data
            adam_step(store, {"p": 2.0 * p}, state, lr=0.01)
        assert abs(store.tensor("p").data[0]) < 0.05

    def test_unknown_name_rejected(self):
        store = ParameterStore()
        store.add("p", np.zeros(2), "rl")
        with pytest.raises(ValueError, match="unknown parameter"):
            adam_step(store, {"q": np.zeros(2)}, AdamState(), lr=0.1)

    def test_stats_buffer_rejected(self):
        store = ParameterStore()
        store.add("bn.mean", np.zeros(2), "stats")
        with pytest.raises(ValueError, match="stats buffer"):
            adam_step(store, {"bn.mean": np.zeros(2)}, AdamState(), lr=0.1)

    def test_shape_mismatch_rejected(self):
        store = ParameterStore()
        store.add("p", np.zeros((2, 2)), "rl")
        with pytest.raises(ValueError, match="shape"):
            adam_step(store, {"p": np.zeros(3)}, AdamState(), lr=0.1)


class TestClipGradients:
    def test_small_gradients_pass_through_unchanged(self):
        grads = {"a": np.array([0.3, 0.4]), "b": np.array([[0.5]])}
        clipped = clip_gradients(grads, max_norm=1.0)
        assert clipped is grads

    def test_large_gradients_scaled_to_the_bound(self):
        grads = {"a": np.array([30.0, 40.0]), "b": np.zeros(3)}
        clipped = clip_gradients(grads, max_norm=1.0)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
        assert norm == pytest.approx(1.0, rel=1e-12)

    def test_direction_preserved(self):
        grads = {"a": np.array([3.0, -4.0])}
        clipped = clip_gradients(grads, max_norm=2.0)
        np.testing.assert_allclose(clipped["a"], np.array([1.2, -1.6]),
                                   rtol=1e-12)

    def test_norm_spans_every_entry(self):
        # each entry alone is under the bound; jointly they are over it
        grads = {"a": np.full(4, 0.6), "b": np.full(4, 0.6)}
        clipped = clip_gradients(grads, max_norm=1.0)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
        assert norm == pytest.approx(1.0, rel=1e-12)

    def test_zero_gradients_untouched(self):
        grads = {"a": np.zeros(3)}
        assert clip_gradients(grads, max_norm=1.0) is grads


class TestCheckpointContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        tensors = {
            "actor/enc.w": (rng.standard_normal((5, 3)), "rl"),
            "actor/enc.sel": (rng.standard_normal((3, 3)), "hg"),
            "actor/enc.bn.mean": (rng.standard_normal(3), "stats"),
            "opt_rl/m/enc.w": (rng.standard_normal((5, 3)), "rl"),
        }
        extra = {"epoch": 7, "config": {"nodes": 20}, "note": "x"}
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, tensors, extra)
        back, back_extra = load_checkpoint(path)
        assert set(back) == set(tensors)
        for name, (arr, group) in tensors.items():
            got_arr, got_group = back[name]
            assert got_group == group
            assert np.array_equal(got_arr, arr)
            assert got_arr.dtype == np.float64
        assert back_extra == extra

    def test_bad_magic_raises_version_error(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE!\n" + b"\x00" * 64)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_file(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, {"w": (np.ones((4, 4)), "rl")}, {})
        blob = open(path, "rb").read()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(blob[:len(blob) - 32])
        with pytest.raises(CheckpointFormatError, match="past end"):
            load_checkpoint(str(cut))

    def test_scalarless_empty_extra(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, {"w": (np.arange(4.0), "rl")}, None)
        _, extra = load_checkpoint(path)
        assert extra == {}

    def test_load_values_shape_check(self, tmp_path):
        store = ParameterStore()
        store.add("w", np.zeros((2, 2)), "rl")
        with pytest.raises(CheckpointFormatError, match="shape"):
            store.load_values({"w": np.zeros((3, 3))})
