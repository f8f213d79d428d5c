"""Central finite-difference gradient checks for torch objectives."""

from __future__ import annotations

from typing import Callable, Mapping

import torch


def numerical_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float) -> torch.Tensor:
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = fn().item()
            flat[i] = old - eps
            lo = fn().item()
            flat[i] = old
            g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """``||a - n|| / (||a|| + ||n||)``, 0 when both vanish."""
    num = torch.linalg.vector_norm(analytic - numeric).item()
    den = torch.linalg.vector_norm(analytic).item() + torch.linalg.vector_norm(numeric).item()
    return 0.0 if den == 0 else num / den


def check_gradients(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
) -> dict[str, float]:
    """Relative error of autograd vs central differences, per parameter group.

    ``fn`` must be deterministic and read the tensors in ``params``, which
    should be float64 leaf tensors with ``requires_grad``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps out of range")
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need float64 parameters")
        p.grad = None
    loss = fn()
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), a in zip(params.items(), analytic):
        if a is None:
            a = torch.zeros_like(p)
        out[name] = relative_error(a, numerical_grad(fn, p, eps))
    return out
