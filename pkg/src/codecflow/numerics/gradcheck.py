"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from codecflow.numerics.tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences for ``param``; only flat indices ``entries`` when given (others stay 0)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn().data)
        flat[i] = orig - step
        minus = float(fn().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps parameters whose true gradient is exactly zero (such as
    an attention key bias, which softmax ignores) from scoring finite
    difference roundoff, about ``eps * |loss| / step`` or 1e-10 here, as a
    relative error of order one.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Relative error between backward and central differences for each param.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    Run inside :func:`~codecflow.numerics.tensor.double_precision`.
    ``max_entries`` limits each parameter to a seeded random subset of
    coordinates, compared on that subset only.
    """
    for p in params:
        p.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    errors = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_entries is None or p.data.size <= max_entries:
            errors.append(relative_error(analytic, numeric_grad(fn, p, step)))
        else:
            idx = rng.choice(p.data.size, size=max_entries, replace=False)
            numeric = numeric_grad(fn, p, step, entries=idx).reshape(-1)[idx]
            errors.append(relative_error(analytic.reshape(-1)[idx], numeric))
    return errors
