"""Central finite-difference gradient checking for tape-built losses."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autograd import Tape, Tensor


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` for every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a - n| / max(max |a|, max |n|, floor)`` over one tensor."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-3,
) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients, per parameter.

    ``loss_fn`` must be deterministic (re-seed any dropout inside it).
    """
    analytic = analytic_gradients(loss_fn, params)
    return {name: relative_error(analytic[name], numerical_gradient(loss_fn, p, step)) for name, p in params.items()}
