"""Central finite-difference oracle for checking autograd gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch


def numerical_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: int,
                       eps: float = 1e-5) -> float:
    flat = tensor.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + eps
        up = fn().item()
        flat[index] = orig - eps
        down = fn().item()
        flat[index] = orig
    return (up - down) / (2 * eps)


def check_gradients(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                    eps: float = 1e-5, max_entries: int | None = None, seed: int = 0,
                    rel_floor: float = 1e-3
                    ) -> dict[str, float]:
    """Compare autograd against central differences for each named tensor.

    Returns, per tensor, ``max|g_auto - g_fd| / max(max|g_fd|, floor)`` over
    the checked entries, where ``floor`` is ``rel_floor`` times the largest
    finite-difference magnitude over all tensors. The floor keeps tensors with
    (near) zero true gradient, such as attention key biases, from dividing
    round-off by round-off. Tensors larger than ``max_entries`` are checked on
    a seeded random subset of entries.
    """
    rng = np.random.default_rng(seed)
    leaves = list(tensors.values())
    for t in leaves:
        t.requires_grad_(True)
    out = fn()
    if out.numel() != 1:
        raise ValueError("check_gradients: fn must return a scalar")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    pairs = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = np.arange(n)
        auto = g.detach().reshape(-1)[idx].cpu().numpy()
        fd = np.array([numerical_gradient(fn, t, int(i), eps) for i in idx])
        pairs[name] = (auto, fd)
    top = max((float(np.abs(fd).max(initial=0.0)) for _, fd in pairs.values()), default=0.0)
    floor = max(rel_floor * top, 1e-8)
    return {name: float(np.abs(auto - fd).max(initial=0.0)) / max(float(np.abs(fd).max(initial=0.0)), floor)
            for name, (auto, fd) in pairs.items()}
