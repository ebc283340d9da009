"""Finite-difference gradient oracle.

Central differences at fp64: the independent check every differentiable op
and the assembled network are verified against. Loss closures must be
deterministic (re-running them with the same parameter values must give
the same loss).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Parameter, backward


def finite_difference(loss_fn: Callable[[], float], array: np.ndarray,
                      indices: Sequence[tuple], h: float = 1e-5) -> np.ndarray:
    """Central-difference dloss/darray at the given flat element indices."""
    grads = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        orig = array[idx]
        array[idx] = orig + h
        fp = loss_fn()
        array[idx] = orig - h
        fm = loss_fn()
        array[idx] = orig
        grads[n] = (fp - fm) / (2.0 * h)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-6, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build_loss: Callable[[], "object"],
                    leaves: Sequence[Parameter],
                    h: float = 1e-5,
                    max_elements_per_leaf: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between analytic and central-difference grads.

    build_loss must construct a fresh graph and return the scalar loss
    tensor; leaves are the tensors whose gradients are compared. When
    max_elements_per_leaf is set, that many elements are sampled per leaf
    (all elements otherwise).
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    backward(loss)

    worst = 0.0
    for leaf in leaves:
        if leaf.grad is None:
            raise AssertionError("leaf received no gradient; is it connected to the loss?")
        flat_count = leaf.data.size
        if max_elements_per_leaf is not None and flat_count > max_elements_per_leaf:
            if rng is None:
                rng = np.random.default_rng(0)
            chosen = rng.choice(flat_count, size=max_elements_per_leaf, replace=False)
        else:
            chosen = np.arange(flat_count)
        idx_tuples = [np.unravel_index(i, leaf.data.shape) for i in chosen]
        numeric = finite_difference(lambda: build_loss().item(), leaf.data, idx_tuples, h=h)
        analytic = np.array([leaf.grad[t] for t in idx_tuples])
        worst = max(worst, relative_error(analytic, numeric))
    return worst
