"""Parameter containers shared by the model components."""
from __future__ import annotations

import copy

import numpy as np

from .autograd import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple, dtype=np.float32, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)


class Module:
    """Holds trainable :class:`Tensor` attributes, buffers, and child modules.

    Parameters are discovered by attribute type; buffers are numpy arrays
    listed in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: getattr(self, name) for name in self._buffers}
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.update(val.named_buffers(prefix + key + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _resolve(self, name: str):
        owner = self
        *path, leaf = name.split(".")
        for part in path:
            owner = getattr(owner, part)
        return owner, leaf

    def assign(self, tensors: dict[str, Tensor]) -> None:
        """Swap parameter tensors by name (used to thread gradient-check leaves)."""
        for name, t in tensors.items():
            owner, leaf = self._resolve(name)
            setattr(owner, leaf, t)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {buf.shape}")
            owner, leaf = self._resolve(name)
            setattr(owner, leaf, arr.astype(buf.dtype, copy=True))

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for name, p in clone.named_parameters().items():
            owner, leaf = clone._resolve(name)
            setattr(owner, leaf, Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype))
        for name, buf in clone.named_buffers().items():
            owner, leaf = clone._resolve(name)
            setattr(owner, leaf, buf.astype(dtype))
        return clone


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (out_features, in_features), in_features)
        self.bias = zeros_param((out_features,)) if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        from .autograd import linear
        return linear(x, self.weight, self.bias)
