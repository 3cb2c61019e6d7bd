"""Numeric validation helpers: central finite differences for gradient checks."""

from __future__ import annotations

from collections.abc import Callable, Iterable

import torch
from torch import Tensor


def central_difference_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> Tensor:
    """Elementwise central finite-difference gradient of a scalar functional."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    """max |a - n| / max(floor, |a|, |n|) over all elements."""
    diff = (analytic - numeric).abs()
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (diff / scale).max().item()


def check_gradients(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Compare autograd gradients of ``fn`` against central differences.

    ``fn`` must rebuild the scalar loss from scratch on every call so that
    in-place parameter perturbations are observed. Returns the worst relative
    error across all parameters; raises AssertionError above ``tol``.
    """
    params = list(params)
    loss = fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=False)
    worst = 0.0
    for param, a_grad in zip(params, analytic):
        n_grad = central_difference_grad(fn, param, step=step)
        worst = max(worst, max_relative_error(a_grad, n_grad))
    if worst > tol:
        raise AssertionError(f"gradient mismatch: max relative error {worst:.3e} > {tol:.1e}")
    return worst
