"""Low-rank adaptation of frozen linear layers: W0 + (alpha/r) * B A.

The base weight (and bias, when present) never receive gradients; only
the factors A [r, k] and B [d, r] train.  B starts at zero so a freshly
attached adapter is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .layers import Linear
from .tensor import Tensor


@dataclass
class LoraLinear:
    """y = x W0ᵀ + (alpha/r) x Aᵀ Bᵀ + bias, with W0 [d, k] frozen."""

    w0: Tensor
    a: Tensor
    b: Tensor
    r: int
    alpha: float
    bias: Tensor | None = None

    def __post_init__(self):
        d, k = self.w0.shape
        if not 1 <= self.r <= min(d, k):
            raise ValidationError(f"rank {self.r} outside [1, min({d}, {k})]")
        if self.a.shape != (self.r, k) or self.b.shape != (d, self.r):
            raise ValidationError(
                f"factor shapes {self.a.shape}/{self.b.shape} do not fit rank {self.r} on [{d}, {k}]")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        if self.w0.requires_grad or (self.bias is not None and self.bias.requires_grad):
            raise ValidationError("base weight and bias must be frozen")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(x, self)

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.w0
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        yield f"{prefix}.lora.A", self.a
        yield f"{prefix}.lora.B", self.b


def lora_init(d: int, k: int, r: int, alpha: float, rng: np.random.Generator,
              bias: bool = False) -> LoraLinear:
    """Fresh frozen base plus zero-initialized adapter (A ~ N(0, 0.02), B = 0)."""
    if r < 1 or r > min(d, k):
        raise ValidationError(f"rank {r} outside [1, min({d}, {k})]")
    w0 = T.init_normal(rng, (d, k), 1.0 / np.sqrt(k), trainable=False)
    return LoraLinear(
        w0=w0,
        a=T.init_normal(rng, (r, k), 0.02, trainable=True),
        b=T.init_zeros((d, r), trainable=True),
        r=r,
        alpha=alpha,
        bias=T.init_zeros((d,), trainable=False) if bias else None,
    )


def attach_lora(base: Linear, r: int, alpha: float, rng: np.random.Generator) -> LoraLinear:
    """Wrap an existing layer, freezing its tensors in place and sharing them."""
    base.weight.requires_grad = False
    if base.bias is not None:
        base.bias.requires_grad = False
    d, k = base.weight.shape
    if r < 1 or r > min(d, k):
        raise ValidationError(f"rank {r} outside [1, min({d}, {k})]")
    return LoraLinear(
        w0=base.weight,
        a=T.init_normal(rng, (r, k), 0.02, trainable=True),
        b=T.init_zeros((d, r), trainable=True),
        r=r,
        alpha=alpha,
        bias=base.bias,
    )


def lora_forward(x: Tensor, layer: LoraLinear) -> Tensor:
    """Adapted forward pass; gradients reach only the A/B factors."""
    y = T.matmul(x, T.transpose(layer.w0))
    delta = T.scale(T.matmul(T.matmul(x, T.transpose(layer.a)), T.transpose(layer.b)),
                    layer.scaling)
    y = T.add(y, delta)
    if layer.bias is not None:
        y = T.add(y, layer.bias)
    return y


def lora_merge(layer: LoraLinear) -> Tensor:
    """Collapse the adapter into a plain weight: W0 + (alpha/r) B A."""
    merged = layer.w0.data + layer.scaling * (layer.b.data @ layer.a.data)
    return Tensor(merged, requires_grad=False, dtype=layer.w0.data.dtype)
