"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from moma.core.tensor import GradTape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; the floor keeps all-zero gradients comparable."""
    num = np.linalg.norm(np.ravel(analytic - numeric))
    den = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(num / den)


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros(t.shape)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f().item()
        flat[i] = old - eps
        down = f().item()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]


def check_gradients(f: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per tensor."""
    names = list(tensors)
    grads = analytic_grads(f, [tensors[n] for n in names])
    return {n: relative_error(g, numeric_grad(f, tensors[n], eps)) for n, g in zip(names, grads)}
