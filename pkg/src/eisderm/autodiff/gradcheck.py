"""Central finite-difference checks for the autodiff ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[..., float], arrays: Sequence[np.ndarray], index: int,
                 h: float = 1e-6) -> np.ndarray:
    """d f / d arrays[index] by central differences; ``f`` takes numpy arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(*arrays)
        x[i] = orig - h
        down = f(*arrays)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(op: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    rng: np.random.Generator, h: float = 1e-6,
                    wrt: Sequence[int] | None = None) -> list[float]:
    """Compare analytic and numeric gradients of ``sum(op(*inputs) * R)``.

    ``R`` is a fixed random projection so every output element contributes.
    Returns the relative error for each checked input.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = op(*leaves)
    (out * Tensor(proj)).sum().backward()
    errors = []
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        errors.append(relative_error(analytic, numeric_grad(scalar, arrays, i, h)))
    return errors
