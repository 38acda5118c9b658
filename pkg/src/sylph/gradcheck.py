"""Finite-difference verification of analytic gradients.

Checks run in float64: central differences at epsilon ~1e-5 leave ~1e-10 of
headroom against the 1e-3 acceptance bar, so any real backward bug stands out.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

Tensor = torch.Tensor


class GradCheckError(RuntimeError):
    pass


def scalar_projection(t: Tensor, seed: int = 0) -> Tensor:
    """Fixed random projection to a scalar, for checking non-scalar ops."""
    gen = torch.Generator().manual_seed(seed)
    w = torch.rand(t.shape, generator=gen, dtype=torch.float64)
    return (t * w.to(t.dtype)).sum()


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must return a scalar (wrap with scalar_projection otherwise). All
    inputs are promoted to float64; the error per element is
    |a - n| / max(|a|, |n|, 1e-8), and the max over all elements of all
    inputs is returned. Non-finite outputs raise GradCheckError.
    """
    leaves = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.dim() != 0:
        raise ValueError("grad_check: fn must return a scalar")
    if not torch.isfinite(out):
        raise GradCheckError("non-finite output at the check point")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    # Numeric side works on grad-free copies so in-place perturbation is legal.
    vals = [x.detach().double().clone() for x in inputs]

    def evaluate() -> float:
        with torch.no_grad():
            return float(fn(*vals))

    max_err = 0.0
    for leaf_idx, a in enumerate(analytic):
        if a is None:
            a = torch.zeros_like(vals[leaf_idx])
        if not torch.isfinite(a).all():
            raise GradCheckError("non-finite analytic gradient")
        flat = vals[leaf_idx].reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradCheckError(f"non-finite output while perturbing element {i}")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a_i = a_flat[i].item()
            err = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
