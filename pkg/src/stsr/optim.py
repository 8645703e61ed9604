"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 1e-5) -> None:
    """Update ``params`` and ``state`` in place.

    The decay multiplies the parameter by ``1 - lr * weight_decay`` before
    the Adam step and never enters the moment estimates. Missing gradients
    count as zero.
    """
    if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0 or weight_decay < 0:
        raise ValueError("invalid AdamW hyper-parameters")
    state.step += 1
    k = state.step
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Thin wrapper binding :func:`adamw_step` to a module's named parameters."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = AdamWState()

    def step(self) -> None:
        adamw_step({k: p.data for k, p in self.params.items()},
                   {k: p.grad for k, p in self.params.items()},
                   self.state, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def moments(self) -> List[str]:
        return sorted(self.state.m)
