"""SGD with momentum over named parameter dicts, plus global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

Tensor = torch.Tensor
ParamDict = dict[str, Tensor]


class NonFiniteGradError(RuntimeError):
    """Raised when a step sees NaN/Inf gradients; no parameter is touched."""


@dataclass
class SGDState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, Tensor] = field(default_factory=dict)


def sgd_step(params: ParamDict, grads: ParamDict, state: SGDState,
             decay_exclude: frozenset[str] | set[str] = frozenset()) -> None:
    """One update: v <- momentum*v + (g + wd*p); p <- p - lr*v. In place.

    The whole step is rejected (NonFiniteGradError, params untouched) if any
    gradient contains NaN/Inf. Names in decay_exclude skip weight decay.
    """
    if state.lr <= 0:
        raise ValueError(f"sgd_step: lr must be positive, got {state.lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"sgd_step: gradient for unknown parameter {name!r}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradError(f"non-finite gradient in {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"sgd_step: grad shape {tuple(g.shape)} != param shape "
                f"{tuple(params[name].shape)} for {name!r}")
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            wd = 0.0 if name in decay_exclude else state.weight_decay
            d = g if wd == 0.0 else g + wd * p
            v = state.velocity.get(name)
            if v is None:
                v = torch.zeros_like(p)
                state.velocity[name] = v
            v.mul_(state.momentum).add_(d)
            p.sub_(state.lr * v)


def clip_gradients(grads: ParamDict, max_norm: float) -> float:
    """Scale all grads in place so the global L2 norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError(f"clip_gradients: max_norm must be > 0, got {max_norm}")
    total = grad_norm(grads)
    if total > max_norm:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads.values():
                g.mul_(scale)
    return total


def grad_norm(grads: ParamDict) -> float:
    """Global L2 norm over a gradient dict."""
    sq = 0.0
    for g in grads.values():
        sq += float(g.detach().pow(2).sum())
    return sq ** 0.5
