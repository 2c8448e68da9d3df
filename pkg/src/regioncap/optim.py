"""AdamW with decoupled weight decay, and the warmup+cosine schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import GradientMap, Tensor


@dataclass
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        state = cls()
        for name, p in params.items():
            if p.requires_grad:
                state.m[name] = np.zeros_like(p.data, dtype=np.float64)
                state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        return state


def adamw_update(params: Mapping[str, Tensor], grads: GradientMap, state: AdamState,
                 hyper: AdamHyper, lr_map: Mapping[str, float] | None = None) -> None:
    """One bias-corrected AdamW step over every parameter named in `grads`.

    Updates tensors in place and advances `state.step`.  Frozen parameters
    never appear in a GradientMap, so they are untouched by construction.
    `lr_map` overrides the learning rate per parameter name (used for the
    per-group rates of the second tuning stage).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name in sorted(grads):
        if name not in state.m:
            raise KeyError(f"adamw_update: no optimizer state for parameter {name!r}")
        p = params[name]
        g = grads[name].data.astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        lr = hyper.lr if lr_map is None else lr_map.get(name, hyper.lr)
        step_dir = m_hat / (np.sqrt(v_hat) + hyper.eps)
        if hyper.weight_decay:
            step_dir = step_dir + hyper.weight_decay * p.data.astype(np.float64)
        p.data -= (lr * step_dir).astype(p.data.dtype)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    if warmup_steps < 0 or warmup_steps >= total_steps:
        if warmup_steps != 0:
            raise ValueError("cosine_lr: warmup_steps must lie inside the schedule")
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))
