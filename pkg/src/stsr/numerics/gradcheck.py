"""Central finite-difference gradient checking."""

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ShapeError(f"grad_check needs a scalar-valued function, got output {shape}")
    return out.item()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|autodiff - fd| / max(1, |fd|)``.

    ``x`` is perturbed in place (and restored); ``f`` must build a fresh
    graph on each call.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    _scalar(out)
    out.backward()
    auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = _scalar(f(x))
        flat[k] = orig - eps
        fm = _scalar(f(x))
        flat[k] = orig
        fd[k] = (fp - fm) / (2.0 * eps)
    fd = fd.reshape(x.shape)
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd)))) if fd.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Same error measure as :func:`grad_check`, over several parameter tensors.

    With ``max_coords`` set, only that many randomly chosen coordinates of each
    parameter are probed by finite differences.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = loss_fn()
    _scalar(out)
    out.backward()

    worst = 0.0
    for p in params:
        auto = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = _scalar(loss_fn())
            flat[k] = orig - eps
            fm = _scalar(loss_fn())
            flat[k] = orig
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(auto[k] - fd) / max(1.0, abs(fd)))
    return worst
