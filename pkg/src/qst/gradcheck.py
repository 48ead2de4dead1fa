"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericalError
from .tensor import Tensor


def grad_check(
    scalar_function: Callable[[Tensor], Tensor],
    point: np.ndarray | Tensor,
    eps: float = 1e-5,
) -> float:
    """Compare the reverse-mode gradient against central finite differences.

    ``scalar_function`` maps one tensor to a scalar tensor and must be
    differentiable at ``point`` (keep sample points away from rounding
    thresholds and mask boundaries).  Returns the maximum over components of
    ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = scalar_function(x)
    if out.size != 1:
        raise NumericalError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericalError("function value is not finite at the given point")
    out.backward()
    g_ad = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        hi = scalar_function(Tensor(probe.reshape(base.shape))).item()
        probe[i] = flat[i] - eps
        lo = scalar_function(Tensor(probe.reshape(base.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError(f"non-finite function value while probing component {i}")
        g_fd[i] = (hi - lo) / (2.0 * eps)
    g_fd = g_fd.reshape(base.shape)

    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """grad_check over every component of a named parameter dict.

    ``loss_fn`` closes over ``params`` and rebuilds the loss from their current
    data, so finite differences can perturb parameters in place.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite at the given parameters")
    loss.backward()

    worst = 0.0
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi = loss_fn().item()
            flat[i] = original - eps
            lo = loss_fn().item()
            flat[i] = original
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalError(f"non-finite loss while probing {name}[{i}]")
            g_fd = (hi - lo) / (2.0 * eps)
            err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
