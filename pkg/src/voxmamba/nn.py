"""Parameter containers built on the tensor engine."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Holds parameters and child modules as attributes, in definition order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
            p.bump_version()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.bump_version()
        return self


class ModuleList(Module):
    def __init__(self, items=()):
        for i, m in enumerate(items):
            setattr(self, str(i), m)
        self._n = len(items)

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if i < 0:
            i += self._n
        return getattr(self, str(i))

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))


def uniform(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def constant(shape, value: float) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_default_dtype()))


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = constant((c_out, c_in), 0.0) if zero_init else uniform(rng, (c_out, c_in), bound)
        self.bias: Optional[Parameter] = None
        if bias:
            self.bias = constant((c_out,), 0.0) if zero_init else uniform(rng, (c_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, padding: Optional[int] = None,
                 stride: int = 1, groups: int = 1, bias: bool = True):
        fan_in = (c_in // groups) * k ** 3
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = uniform(rng, (c_out, c_in // groups, k, k, k), bound)
        self.bias = uniform(rng, (c_out,), bound) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class GroupNorm(Module):
    def __init__(self, n_groups: int, channels: int, eps: float = 1e-5):
        if channels % n_groups:
            raise ValueError(f"{channels} channels not divisible by {n_groups} groups")
        self.gamma = constant((channels,), 1.0)
        self.beta = constant((channels,), 0.0)
        self.n_groups = n_groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.n_groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = constant((channels,), 1.0)
        self.beta = constant((channels,), 0.0)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)
