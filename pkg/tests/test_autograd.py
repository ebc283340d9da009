"""Graph mechanics: backward, tape lifetime, SGD, checkpoint round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfa.core import SGD, Parameter, Tensor, backward, load_checkpoint, save_checkpoint
from pfa.core import functional as F
from pfa.core.gradcheck import check_gradients
from pfa.errors import CheckpointError, GraphError
from pfa.rng import stream


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3), name="x")
        backward(F.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_at_three(self):
        x = Parameter(np.array([3.0]), name="x")
        backward(F.sum_all(F.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_fanout_accumulates(self):
        x = Parameter(np.array([2.0]), name="x")
        y = F.mul(x, x)        # x^2
        z = F.add(y, F.mul(x, Tensor([5.0])))   # x^2 + 5x -> grad 2x + 5 = 9
        backward(F.sum_all(z))
        np.testing.assert_allclose(x.grad, [9.0])

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3), name="x")
        y = F.mul(x, x)
        with pytest.raises(GraphError):
            backward(y)

    def test_repeated_backward_rejected(self):
        x = Parameter(np.ones(3), name="x")
        loss = F.sum_all(F.mul(x, x))
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_backward_through_freed_subgraph_rejected(self):
        x = Parameter(np.ones(3), name="x")
        shared = F.mul(x, x)
        loss1 = F.sum_all(shared)
        loss2 = F.sum_all(F.add(shared, shared))
        backward(loss1)
        with pytest.raises(GraphError):
            backward(loss2)

    def test_detach_blocks_gradient(self):
        x = Parameter(np.array([2.0]), name="x")
        y = F.mul(x.detach(), x)    # d/dx = detached value = 2
        backward(F.sum_all(y))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_composite_network_matches_finite_differences(self):
        rng = stream(123, "composite")
        x = Parameter(rng.normal(size=(2, 2, 4, 4)), name="x")
        k1 = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5, name="k1")
        w = Parameter(rng.normal(size=(5, 3)) * 0.5, name="w")
        b = Parameter(rng.normal(size=5), name="b")

        def build():
            h = F.relu(F.conv2d(x, k1, stride=1, padding=1))
            v = F.global_avg_pool(h)
            out = F.sigmoid(F.fully_connected(v, w, b))
            return F.mean_all(F.mul(out, out))

        assert check_gradients(build, [x, k1, w, b]) < 1e-4

    def test_forward_determinism(self):
        def run():
            rng = stream(99, "det")
            x = Tensor(rng.normal(size=(2, 3, 8, 8)))
            k = Parameter(rng.normal(size=(4, 3, 3, 3)), name="k")
            return F.conv2d(x, k, stride=1, padding=1).data

        a, b = run(), run()
        assert np.array_equal(a, b)


class TestConcatSplit:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=2, max_size=4),
           st.integers(min_value=0, max_value=10_000))
    def test_concat_then_split_roundtrip(self, sizes, seed):
        rng = np.random.default_rng(seed)
        parts = [Tensor(rng.normal(size=(2, s, 3))) for s in sizes]
        joined = F.concat(parts, axis=1)
        back = F.split(joined, sizes, axis=1)
        for orig, piece in zip(parts, back):
            np.testing.assert_array_equal(orig.data, piece.data)


class TestSGD:
    def test_plain_step(self):
        p = Parameter(np.array([1.0, 2.0]), name="p")
        p.grad = np.array([0.5, -0.5])
        SGD([p], lr=1.0).step()
        np.testing.assert_allclose(p.data, [0.5, 2.5])

    def test_momentum_two_steps(self):
        p = Parameter(np.array([0.0]), name="p")
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([1.0])
        opt.step()                      # v1 = 1, p = -0.1
        np.testing.assert_allclose(p.data, [-0.1])
        p.grad = np.array([1.0])
        opt.step()                      # v2 = 0.9*1 + 1 = 1.9, p = -0.1 - 0.19
        np.testing.assert_allclose(p.data, [-0.29])

    def test_weight_decay_adds_scaled_param(self):
        p = Parameter(np.array([10.0]), name="p")
        opt = SGD([p], lr=1.0, weight_decay=5e-4)
        p.grad = np.array([0.0])
        opt.step()                      # effective grad = 5e-4 * 10
        np.testing.assert_allclose(p.data, [10.0 - 5e-3])

    def test_missing_grad_names_parameter(self):
        p = Parameter(np.array([1.0]), name="stuck.weight")
        with pytest.raises(GraphError, match="stuck.weight"):
            SGD([p], lr=0.1).step()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {
            "trunk.conv.kernel": rng.normal(size=(4, 3, 3, 3)),
            "head.bias": rng.normal(size=7),
            "bn.running_mean": rng.normal(size=4),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, arrays)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(arrays)
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])

    def test_unknown_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones((2, 2))})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        arrays = {"a": np.arange(4.0), "b": np.ones((2, 3))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, arrays)
        assert p1.read_bytes() == p2.read_bytes()
