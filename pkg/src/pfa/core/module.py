"""Lightweight parameter container for models.

Parameters and batch-norm states are discovered by walking instance
attributes (recursing through sub-modules and lists of sub-modules), and
parameter names are the attribute paths, which keeps checkpoint names
stable and unique.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import CheckpointError
from .functional import BatchNormState
from .tensor import Parameter


class Module:
    """Base class whose attributes define the parameter tree."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module, BatchNormState)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module, BatchNormState)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=path + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_states(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out = []
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_states(prefix=path + "."))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters plus running statistics."""
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            arrays[name] = p.data
        for name, s in self.named_states():
            arrays[name + ".running_mean"] = s.running_mean
            arrays[name + ".running_var"] = s.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise CheckpointError(f"state name mismatch: missing={missing[:5]} "
                                  f"extra={extra[:5]}")
        for name, p in self.named_parameters():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint "
                                      f"{src.shape}, model {p.data.shape}")
            p.data = src.copy()
            p.grad = None
        for name, s in self.named_states():
            s.running_mean = arrays[name + ".running_mean"].copy()
            s.running_var = arrays[name + ".running_var"].copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())
