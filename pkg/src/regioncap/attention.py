"""Multi-head scaled-dot-product attention.

Used in three configurations: self-attention over bounding-box tokens,
cross-attention in either direction inside the region interaction block,
and (through `attend`) the causal self-attention of the toy language
model.  Heads are contiguous slices of the projection axis, so checkpoints
are portable across implementations that split the same way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

_NEG_INF = -1e9  # additive mask value; underflows to exactly 0 after softmax


@dataclass
class AttentionParams:
    """Projection weights: w_q/w_k/w_v are [d_model, d_attn], w_o is [d_attn, d_model]."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        d_model, d_attn = self.w_q.shape
        if d_attn % self.num_heads != 0:
            raise ShapeError(f"d_attn {d_attn} not divisible by {self.num_heads} heads")
        for name, w, want in (("w_k", self.w_k, (d_model, d_attn)),
                              ("w_v", self.w_v, (d_model, d_attn)),
                              ("w_o", self.w_o, (d_attn, d_model))):
            if w.shape != want:
                raise ShapeError(f"{name}: expected {want}, got {w.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_attn(self) -> int:
        return self.w_q.shape[1]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


def init_attention(d_model: int, d_attn: int, num_heads: int,
                   rng: np.random.Generator, std: float | None = None,
                   trainable: bool = True) -> AttentionParams:
    """Seeded Gaussian init; biases are intentionally absent."""
    if std is None:
        std = 1.0 / np.sqrt(d_model)
    mk = lambda shape: T.init_normal(rng, shape, std, trainable=trainable)
    return AttentionParams(
        w_q=mk((d_model, d_attn)),
        w_k=mk((d_model, d_attn)),
        w_v=mk((d_model, d_attn)),
        w_o=mk((d_attn, d_model)),
        num_heads=num_heads,
    )


def _causal_mask(n: int, dtype) -> Tensor:
    mask = np.triu(np.full((n, n), _NEG_INF, dtype=dtype), k=1)
    return Tensor(mask, requires_grad=False, dtype=dtype)


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int, causal: bool = False) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_head)) V per head; heads re-concatenated.

    q is [Nq, d_attn]; k and v are [Nk, d_attn].  With `causal` set (which
    requires Nq == Nk) position t only attends to positions <= t.
    """
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(f"attend: inconsistent projections {q.shape}/{k.shape}/{v.shape}")
    d_attn = q.shape[1]
    if d_attn % num_heads != 0:
        raise ShapeError(f"attend: d_attn {d_attn} not divisible by {num_heads} heads")
    if causal and q.shape[0] != k.shape[0]:
        raise ShapeError("attend: causal mask needs equal query/key counts")
    d_head = d_attn // num_heads
    inv_sqrt = 1.0 / np.sqrt(d_head)
    mask = _causal_mask(q.shape[0], q.dtype) if causal else None

    head_outputs = []
    for h in range(num_heads):
        lo = h * d_head
        qh = T.narrow(q, 1, lo, d_head)
        kh = T.narrow(k, 1, lo, d_head)
        vh = T.narrow(v, 1, lo, d_head)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
        if mask is not None:
            scores = T.add(scores, mask)
        head_outputs.append(T.matmul(T.softmax(scores), vh))
    return T.concat(head_outputs, axis=1)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
                         causal: bool = False) -> Tensor:
    """Full attention layer: project inputs, attend per head, project back.

    Self-attention is the call with kv_in is q_in.
    """
    if q_in.shape[1] != params.d_model or kv_in.shape[1] != params.d_model:
        raise ShapeError(
            f"multi_head_attention: inputs {q_in.shape}/{kv_in.shape} "
            f"do not match d_model {params.d_model}")
    q = T.matmul(q_in, params.w_q)
    k = T.matmul(kv_in, params.w_k)
    v = T.matmul(kv_in, params.w_v)
    mixed = attend(q, k, v, params.num_heads, causal=causal)
    return T.matmul(mixed, params.w_o)
