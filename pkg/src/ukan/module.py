"""Minimal layer container: parameter/buffer discovery and train/eval state.

Attribute insertion order drives iteration order, so parameter names and
checkpoint layouts are deterministic for a fixed model-construction order.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    """Base class for layers. Subclasses assign Tensors (parameters when
    requires_grad), numpy buffers via `register_buffer`, and child Modules
    (directly or in lists) as attributes."""

    def __init__(self):
        self.training = True
        self._buffer_names: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Track a non-learnable state array (e.g. running statistics)."""
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def named_parameters(self, prefix: str = ""):
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        """Yields (name, owner module, attribute) so buffers can be reassigned."""
        for mod_name, mod in self.named_modules(prefix):
            for attr in mod._buffer_names:
                yield (f"{mod_name}.{attr}" if mod_name else attr), mod, attr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent state (parameters then buffers) as named arrays."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, mod, attr in self.named_buffers():
            state[name] = getattr(mod, attr)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        """Assign named arrays back into parameters and buffers (strict)."""
        own = self.state_arrays()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        params = dict(self.named_parameters())
        buffers = {name: (mod, attr) for name, mod, attr in self.named_buffers()}
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{p.data.shape} vs {arr.shape}")
                p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
            else:
                mod, attr = buffers[name]
                setattr(mod, attr, np.ascontiguousarray(arr))

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def resolve_parameter(model: Module, name: str):
    """Locate a named parameter, returning (owning module, attribute name)."""
    *path, attr = name.split(".")
    node = model
    for part in path:
        if isinstance(node, (list, tuple)):
            node = node[int(part)]
        else:
            node = getattr(node, part)
    if isinstance(node, (list, tuple)):
        raise KeyError(f"{name} does not name a parameter attribute")
    if not isinstance(getattr(node, attr, None), Tensor):
        raise KeyError(f"no parameter named {name}")
    return node, attr
