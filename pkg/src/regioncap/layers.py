"""Small parameter containers shared by the model modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Linear:
    """y = x @ weightᵀ + bias, with weight stored [out, in]."""

    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def init_linear(rng: np.random.Generator, d_in: int, d_out: int,
                std: float | None = None, bias: bool = True,
                trainable: bool = True) -> Linear:
    if std is None:
        std = 1.0 / np.sqrt(d_in)
    return Linear(
        weight=T.init_normal(rng, (d_out, d_in), std, trainable=trainable),
        bias=T.init_zeros((d_out,), trainable=trainable) if bias else None,
    )


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def init_layer_norm(d: int, trainable: bool = True) -> LayerNormParams:
    return LayerNormParams(gain=T.init_ones((d,), trainable=trainable),
                           bias=T.init_zeros((d,), trainable=trainable))
