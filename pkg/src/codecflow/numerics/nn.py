"""Parameter containers and the handful of layers the networks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from codecflow.errors import ConfigurationError
from codecflow.numerics import tensor as T
from codecflow.numerics.tensor import Tensor


def parameter(values: np.ndarray) -> Tensor:
    p = Tensor(values, requires_grad=True)
    p.is_param = True
    return p


class Module:
    """Walks attributes (modules, tensors, lists/dicts of them) to find parameters."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ConfigurationError(f"state is missing parameters: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigurationError(f"parameter {name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def train(self, mode: bool = True) -> Module:
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            yield from _walk_modules(value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.is_param:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(value[key], f"{name}.{key}")


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk_modules(item)
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk_modules(value[key])


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``x @ weight + bias`` over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(
        self,
        n_in: int,
        n_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding=0,
        depthwise: bool = False,
        gain: float = 1.0,
    ):
        if depthwise and n_in != n_out:
            raise ConfigurationError("depthwise conv needs n_in == n_out")
        fan_in = kernel if depthwise else n_in * kernel
        bound = gain / np.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, bound, (n_out, 1 if depthwise else n_in, kernel)))
        self.bias = parameter(np.zeros(n_out))
        self.stride = stride
        self.padding = padding
        self.groups = n_in if depthwise else 1

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def same_padding(kernel: int) -> tuple[int, int]:
    return (kernel - 1) // 2, kernel // 2


class ConvTranspose1d(Module):
    def __init__(
        self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, crop=0, gain: float = 1.0
    ):
        bound = gain / np.sqrt(n_in * kernel / stride)
        self.weight = parameter(_uniform(rng, bound, (n_in, n_out, kernel)))
        self.bias = parameter(np.zeros(n_out))
        self.stride = stride
        self.crop = crop

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose1d(x, self.weight, self.bias, self.stride, self.crop)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, n_entries: int, dim: int, rng: np.random.Generator):
        self.table = parameter(rng.normal(0.0, 1.0, size=(n_entries, dim)))

    def forward(self, indices: np.ndarray) -> Tensor:
        return T.take(self.table, indices)
