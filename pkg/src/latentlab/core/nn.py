"""Parameter containers: a small ``Module`` base and common layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .rng import RngStream
from .tensor import Tensor

INIT_STD = 0.02


def param(data: np.ndarray, no_decay: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=True)
    # weight decay exclusion is carried on the tensor name prefix
    t.name = "no_decay" if no_decay else None
    return t


class Module:
    """Discovers parameters from attributes in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True,
                 zero: bool = False, std: float = INIT_STD):
        if zero:
            w = np.zeros((d_in, d_out), np.float32)
        else:
            w = rng.truncated_normal((d_in, d_out), std=std)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out, np.float32), no_decay=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: RngStream, std: float = INIT_STD):
        self.weight = param(rng.truncated_normal((n, d), std=std), no_decay=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.weight, ids)


class Norm(Module):
    def __init__(self, d: int, kind: str, affine: bool = True):
        self.kind = kind
        self.gain = param(np.ones(d, np.float32), no_decay=True) if affine else None
        self.bias = (param(np.zeros(d, np.float32), no_decay=True)
                     if affine and kind == "layer_norm" else None)

    def forward(self, x: Tensor) -> Tensor:
        return ops.normalize(x, self.kind, self.gain, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: RngStream, stride: int = 1,
                 padding: int | None = None):
        fan_in = c_in * kernel * kernel
        self.weight = param(rng.normal((kernel, kernel, c_in, c_out), std=float(np.sqrt(1.0 / fan_in))))
        self.bias = param(np.zeros(c_out, np.float32), no_decay=True)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
