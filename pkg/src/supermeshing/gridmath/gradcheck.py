"""Central finite-difference checks for the backward passes."""

from __future__ import annotations

import numpy as np

from ..errors import InvariantError
from .tensor import Tensor, no_grad


def _relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(fn, x: Tensor, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(x).data)
            flat[i] = orig - h
            f_minus = float(fn(x).data)
            flat[i] = orig
            grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_gradients(fn, input: Tensor, h: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a tensor to a scalar tensor.  The relative error of each
    element is |a - n| / max(|a|, |n|, 1e-6).  Pass a float64 tensor for a
    meaningful comparison.
    """
    x = Tensor(input.data.copy(), requires_grad=True, dtype=input.dtype)
    out = fn(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros(x.shape, dtype=x.dtype)
    if not np.all(np.isfinite(analytic)):
        raise InvariantError("analytic gradient contains non-finite values")
    x.grad = None
    numeric = numerical_gradient(fn, x, h)
    return float(_relative_error(analytic, numeric).max(initial=0.0))


def check_parameter_gradients(loss_fn, params, n_samples: int = 50, h: float = 1e-6,
                              seed: int = 0) -> float:
    """Finite-difference check on ``n_samples`` randomly chosen parameter entries.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    """
    params = [p for p in params if not p.frozen]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        if not np.all(np.isfinite(p.grad)):
            raise InvariantError(f"analytic gradient of {p.name!r} contains non-finite values")

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params], dtype=float)
    picks = rng.choice(len(params), size=n_samples, p=sizes / sizes.sum())
    worst = 0.0
    with no_grad():
        for pi in picks:
            p = params[pi]
            idx = int(rng.integers(p.data.size))
            flat = p.data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(loss_fn().data)
            flat[idx] = orig - h
            f_minus = float(loss_fn().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, float(_relative_error(p.grad.flat[idx], numeric)))
    return worst
