"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar. Inputs should be float64. When
    ``max_entries`` is set, that many coordinates per input are probed at random.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps
    coordinates with vanishing gradient from dominating.
    """
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[i]
            denom = max(abs(a), abs(num), 1e-6)
            worst = max(worst, abs(a - num) / denom)
    return worst
