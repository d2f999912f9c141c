"""Central finite-difference checks for functions built from tensor ops."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-300)
    return float(num / den) if num > 0 else 0.0


def numerical_gradient(f: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                       index: int, h: float = 1e-5) -> np.ndarray:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(arrays)
        x[i] = orig - h
        fm = f(arrays)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                    rng: Optional[np.random.Generator] = None, wrt: Optional[Sequence[int]] = None) -> list:
    """Relative errors between reverse-mode and central-difference gradients.

    The output is contracted with a fixed random cotangent so non-scalar
    outputs are covered too.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    out = fn(*[Tensor(a) for a in inputs])
    cot = rng.standard_normal(out.shape)

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * cot))

    leaves = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(inputs)]
    fn(*leaves).backward(cot)
    errors = []
    for i in wrt:
        num = numerical_gradient(scalar, inputs, i, h)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(inputs[i])
        errors.append(relative_error(ana, num))
    return errors
