"""Central-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, Tape

__all__ = ["numerical_grad", "relative_error", "check_gradients"]


def numerical_grad(f: Callable[[], float], value: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``value``, perturbed in place and restored."""
    grad = np.zeros_like(value)
    flat, gflat = value.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the Frobenius norm."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Relative error between tape and central-difference gradients, per named tensor.

    ``loss_fn`` must rebuild its output from the current tensor values on every call.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    def value() -> float:
        return loss_fn().item()

    out = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        out[name] = relative_error(analytic, numerical_grad(value, t.data, h))
    return out
