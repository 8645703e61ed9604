"""Parameter containers and the handful of layers the networks use."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if k not in own:
                continue
            p = own[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, zero: bool = False, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        bound = 1.0 / np.sqrt(cin * k * k)
        w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, (cout, cin, k, k))
        self.weight = nx.parameter(w)
        self.bias = nx.parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(fin)
        self.weight = nx.parameter(np.zeros((fin, fout)) if zero else rng.uniform(-bound, bound, (fin, fout)))
        self.bias = nx.parameter(np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.fc(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4):
        self.groups = _fit_groups(channels, groups)
        self.gamma = nx.parameter(np.ones(channels))
        self.beta = nx.parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.group_norm(x, self.groups, self.gamma, self.beta)


def _fit_groups(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g
