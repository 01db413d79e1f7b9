from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3, order: int = 4,
               floor: float = 1e-6) -> float:
    """Compare backprop gradients with central finite differences.

    ``f`` takes no arguments and reads ``params`` through closure. Params with
    ``requires_grad=False`` are skipped. ``order`` 4 uses the five-point
    stencil ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``; ``order`` 2
    the plain ``(f(x+h) - f(x-h)) / 2h``. Returns the max over all checked
    coordinates of ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps exactly-zero gradients from turning rounding noise into
    a huge relative error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    tracked = [p for p in params if p.requires_grad]
    for p in tracked:
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise NonDeterministicError(
            f"f disagrees with itself: {loss.item()!r} vs {again.item()!r}")
    loss.backward()
    worst = 0.0
    for p in tracked:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]

            def at(delta):
                p.data[idx] = orig + delta
                return f().item()

            with no_grad():
                if order == 2:
                    numeric = (at(eps) - at(-eps)) / (2 * eps)
                else:
                    numeric = (-at(2 * eps) + 8 * at(eps) - 8 * at(-eps) + at(-2 * eps)) / (12 * eps)
            p.data[idx] = orig
            err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), floor)
            worst = max(worst, err)
    for p in tracked:
        p.grad = None
    return worst
