"""Finite-difference verification battery for every differentiable op.

Shared by the test suite and the gradcheck CLI command. Each entry builds
a randomized scalar loss through one op and compares analytic gradients
with central differences on every leaf.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..rng import stream
from . import functional as F
from .gradcheck import check_gradients
from .tensor import Parameter, Tensor


def _leaf(rng, shape, name) -> Parameter:
    return Parameter(rng.normal(size=shape), name=name)


def _loss(t: Tensor) -> Tensor:
    # Weighted sum keeps the loss sensitive to every element.
    w = Tensor(np.linspace(0.5, 1.5, t.data.size).reshape(t.data.shape))
    return F.sum_all(F.mul(t, w))


def op_check_cases(seed: int) -> dict[str, Callable[[], float]]:
    """Map op name -> callable returning worst relative FD error."""
    cases: dict[str, Callable[[], float]] = {}

    def conv2d_case():
        rng = stream(seed, "opcheck", "conv2d")
        x = _leaf(rng, (1, 2, 5, 5), "x")
        k = _leaf(rng, (3, 2, 3, 3), "k")
        return check_gradients(lambda: _loss(F.conv2d(x, k, stride=1, padding=1)), [x, k])

    def conv2d_strided_case():
        rng = stream(seed, "opcheck", "conv2d_strided")
        x = _leaf(rng, (2, 3, 6, 6), "x")
        k = _leaf(rng, (4, 3, 3, 3), "k")
        return check_gradients(lambda: _loss(F.conv2d(x, k, stride=2, padding=1)), [x, k])

    def conv3d_case():
        rng = stream(seed, "opcheck", "conv3d")
        x = _leaf(rng, (1, 1, 3, 3, 3), "x")
        k = _leaf(rng, (2, 1, 3, 3, 3), "k")
        return check_gradients(lambda: _loss(F.conv3d(x, k, stride=1, padding=1)), [x, k])

    def avg_pool2d_case():
        rng = stream(seed, "opcheck", "avg_pool2d")
        x = _leaf(rng, (2, 2, 4, 4), "x")
        return check_gradients(lambda: _loss(F.avg_pool(x, 2, dims=2)), [x])

    def avg_pool3d_case():
        rng = stream(seed, "opcheck", "avg_pool3d")
        x = _leaf(rng, (1, 2, 4, 4, 4), "x")
        return check_gradients(lambda: _loss(F.avg_pool(x, 2, dims=3)), [x])

    def global_avg_pool_case():
        rng = stream(seed, "opcheck", "gap")
        x = _leaf(rng, (2, 3, 4, 4), "x")
        return check_gradients(lambda: _loss(F.global_avg_pool(x)), [x])

    def fully_connected_case():
        rng = stream(seed, "opcheck", "fc")
        x = _leaf(rng, (2, 5), "x")
        w = _leaf(rng, (4, 5), "w")
        b = _leaf(rng, (4,), "b")
        return check_gradients(lambda: _loss(F.fully_connected(x, w, b)), [x, w, b])

    def relu_case():
        rng = stream(seed, "opcheck", "relu")
        x = _leaf(rng, (3, 7), "x")
        # Keep elements away from the kink where FD is one-sided.
        x.data[np.abs(x.data) < 1e-2] += 0.05
        return check_gradients(lambda: _loss(F.relu(x)), [x])

    def sigmoid_case():
        rng = stream(seed, "opcheck", "sigmoid")
        x = _leaf(rng, (3, 7), "x")
        return check_gradients(lambda: _loss(F.sigmoid(x)), [x])

    def mul_add_case():
        rng = stream(seed, "opcheck", "mul_add")
        a = _leaf(rng, (2, 3, 4), "a")
        b = _leaf(rng, (2, 3, 4), "b")
        c = _leaf(rng, (3, 1), "c")
        return check_gradients(lambda: _loss(F.add(F.mul(a, b), c)), [a, b, c])

    def scale_channels_case():
        rng = stream(seed, "opcheck", "scale_channels")
        x = _leaf(rng, (2, 3, 4, 4), "x")
        s = _leaf(rng, (2, 3), "s")
        return check_gradients(lambda: _loss(F.scale_channels(x, s)), [x, s])

    def concat_case():
        rng = stream(seed, "opcheck", "concat")
        a = _leaf(rng, (2, 2, 3, 3), "a")
        b = _leaf(rng, (2, 3, 3, 3), "b")
        return check_gradients(lambda: _loss(F.concat([a, b], axis=1)), [a, b])

    def upsample_case():
        rng = stream(seed, "opcheck", "upsample")
        x = _leaf(rng, (2, 2, 3, 3), "x")
        return check_gradients(lambda: _loss(F.upsample_nearest2d(x, 2)), [x])

    def batch_norm_train_case():
        rng = stream(seed, "opcheck", "bn_train")
        x = _leaf(rng, (4, 3, 4, 4), "x")
        gamma = _leaf(rng, (3,), "gamma")
        beta = _leaf(rng, (3,), "beta")

        def build():
            state = F.BatchNormState.create(3)
            return _loss(F.batch_norm(x, gamma, beta, state, mode="train"))

        return check_gradients(build, [x, gamma, beta])

    def batch_norm_eval_case():
        rng = stream(seed, "opcheck", "bn_eval")
        x = _leaf(rng, (4, 3, 4, 4), "x")
        gamma = _leaf(rng, (3,), "gamma")
        beta = _leaf(rng, (3,), "beta")
        state = F.BatchNormState.create(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        return check_gradients(
            lambda: _loss(F.batch_norm(x, gamma, beta, state, mode="eval")),
            [x, gamma, beta])

    cases["conv2d"] = conv2d_case
    cases["conv2d_strided"] = conv2d_strided_case
    cases["conv3d"] = conv3d_case
    cases["avg_pool2d"] = avg_pool2d_case
    cases["avg_pool3d"] = avg_pool3d_case
    cases["global_avg_pool"] = global_avg_pool_case
    cases["fully_connected"] = fully_connected_case
    cases["relu"] = relu_case
    cases["sigmoid"] = sigmoid_case
    cases["mul_add"] = mul_add_case
    cases["scale_channels"] = scale_channels_case
    cases["concat"] = concat_case
    cases["upsample_nearest2d"] = upsample_case
    cases["batch_norm_train"] = batch_norm_train_case
    cases["batch_norm_eval"] = batch_norm_eval_case
    return cases


def run_op_checks(seed: int = 0) -> dict[str, float]:
    """Worst relative FD error per op for one seed."""
    return {name: fn() for name, fn in op_check_cases(seed).items()}
