"""Two-way region interaction: box corner tokens against global image features.

A bounding box becomes a pair of tokens (positional encoding of each
normalized corner plus a learned corner-type embedding).  Each interaction
layer then runs four sub-steps: self-attention over the box tokens,
cross-attention with box tokens as queries against the image grid, a
point-wise MLP on the box tokens only, and cross-attention back with image
tokens as queries.  The refined box tokens are the regional features
handed to the vision-to-language mapper.

Residual/norm layout (the underlying papers leave this open; frozen here
so checkpoints stay portable):

* every sub-step is ``stream = stream + Sublayer(norm(stream))`` with the
  norm inside the residual branch, so a block with all attention/MLP
  weights zeroed is an exact identity;
* the *original* box tokens are re-added to the current box tokens
  whenever they enter an attention layer (as queries or keys/values), and
  the image grid likewise re-enters attention with its positional
  encodings added.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, init_attention, multi_head_attention
from .errors import ValidationError
from .layers import LayerNormParams, Linear, init_layer_norm, init_linear
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels: [x_min, y_min, width, height] inside image_w x image_h."""

    x_min: float
    y_min: float
    width: float
    height: float
    image_w: float
    image_h: float

    def violations(self) -> list[str]:
        out = []
        if self.width <= 0 or self.height <= 0:
            out.append(f"box size must be positive, got {self.width} x {self.height}")
        if self.x_min < 0 or self.y_min < 0:
            out.append(f"box origin ({self.x_min}, {self.y_min}) outside image")
        if self.x_min + self.width > self.image_w:
            out.append(f"x extent {self.x_min + self.width} exceeds image width {self.image_w}")
        if self.y_min + self.height > self.image_h:
            out.append(f"y extent {self.y_min + self.height} exceeds image height {self.image_h}")
        return out

    def validate(self) -> "BBox":
        problems = self.violations()
        if problems:
            raise ValidationError("; ".join(problems))
        return self

    def normalized_corners(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """((u0, v0), (u1, v1)) for the top-left and bottom-right corners."""
        return (
            (self.x_min / self.image_w, self.y_min / self.image_h),
            ((self.x_min + self.width) / self.image_w, (self.y_min + self.height) / self.image_h),
        )


@dataclass
class RimConfig:
    d_model: int = 1024
    num_layers: int = 2
    d_attn: int = 128
    num_heads: int = 8
    mlp_dim: int = 2048

    def __post_init__(self):
        if min(self.d_model, self.num_layers, self.d_attn, self.num_heads, self.mlp_dim) < 1:
            raise ValidationError("all region-module dimensions must be positive")
        if self.d_attn % self.num_heads != 0:
            raise ValidationError(f"d_attn {self.d_attn} not divisible by {self.num_heads} heads")
        if self.d_model % 2 != 0:
            raise ValidationError("d_model must be even for sin/cos positional encoding")


@dataclass
class RegionalFeatures:
    """Refined box tokens, always [2, d_model]."""

    tokens: Tensor

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.shape[0] != 2:
            raise ShapeError(f"regional features must be [2, d], got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens.data)):
            raise ValidationError("regional features contain non-finite values")


# ---------------------------------------------------------------------------
# positional encoding


def make_pe_frequencies(d_model: int, rng: np.random.Generator) -> Tensor:
    """Frozen random Fourier frequency matrix [d_model/2, 2]."""
    freq = rng.normal(0.0, 2.0 * np.pi, size=(d_model // 2, 2))
    return Tensor(freq, requires_grad=False)


def positional_encoding(pe_freq: Tensor, u: float, v: float) -> Tensor:
    """Deterministic encoding of a normalized point: concat(sin, cos) of freq @ (u, v)."""
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValidationError(f"normalized point ({u}, {v}) outside [0, 1]^2")
    phase = pe_freq.data @ np.array([u, v], dtype=pe_freq.data.dtype)
    return Tensor(np.concatenate([np.sin(phase), np.cos(phase)]), requires_grad=False,
                  dtype=pe_freq.data.dtype)


def grid_positional_encoding(pe_freq: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Encodings for patch centers of a grid, row-major: row i, col j -> token i*grid_w + j."""
    vs, us = np.meshgrid((np.arange(grid_h) + 0.5) / grid_h,
                         (np.arange(grid_w) + 0.5) / grid_w, indexing="ij")
    points = np.stack([us.reshape(-1), vs.reshape(-1)], axis=1)
    phase = points @ pe_freq.data.T
    return Tensor(np.concatenate([np.sin(phase), np.cos(phase)], axis=1),
                  requires_grad=False, dtype=pe_freq.data.dtype)


def encode_bbox(bbox: BBox, corner_embeddings: Tensor, pe_freq: Tensor) -> Tensor:
    """Box -> [2, d_model] tokens: corner positional encodings + learned corner embeddings."""
    bbox.validate()
    (u0, v0), (u1, v1) = bbox.normalized_corners()
    pe = np.stack([positional_encoding(pe_freq, u0, v0).data,
                   positional_encoding(pe_freq, u1, v1).data])
    return T.add(Tensor(pe, requires_grad=False, dtype=corner_embeddings.data.dtype),
                 corner_embeddings)


# ---------------------------------------------------------------------------
# interaction layers


@dataclass
class RimLayer:
    sa: AttentionParams
    norm_sa: LayerNormParams
    box_to_image: AttentionParams
    norm_b2i: LayerNormParams
    mlp_fc1: Linear
    mlp_fc2: Linear
    norm_mlp: LayerNormParams
    image_to_box: AttentionParams
    norm_i2b: LayerNormParams

    def named_tensors(self, prefix: str):
        yield from self.sa.named_tensors(f"{prefix}.sa")
        yield from self.norm_sa.named_tensors(f"{prefix}.norm_sa")
        yield from self.box_to_image.named_tensors(f"{prefix}.b2i")
        yield from self.norm_b2i.named_tensors(f"{prefix}.norm_b2i")
        yield from self.mlp_fc1.named_tensors(f"{prefix}.mlp.fc1")
        yield from self.mlp_fc2.named_tensors(f"{prefix}.mlp.fc2")
        yield from self.norm_mlp.named_tensors(f"{prefix}.norm_mlp")
        yield from self.image_to_box.named_tensors(f"{prefix}.i2b")
        yield from self.norm_i2b.named_tensors(f"{prefix}.norm_i2b")


@dataclass
class RimParams:
    config: RimConfig
    pe_freq: Tensor
    corner_embed: Tensor
    layers: list[RimLayer] = field(default_factory=list)

    def named_tensors(self, prefix: str = "rim"):
        yield f"{prefix}.pe_freq", self.pe_freq
        yield f"{prefix}.corner_embed", self.corner_embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}.layers.{i}")


def init_rim(config: RimConfig, rng: np.random.Generator, trainable: bool = True) -> RimParams:
    d = config.d_model
    attn = lambda: init_attention(d, config.d_attn, config.num_heads, rng, trainable=trainable)
    layers = []
    for _ in range(config.num_layers):
        layers.append(RimLayer(
            sa=attn(), norm_sa=init_layer_norm(d, trainable),
            box_to_image=attn(), norm_b2i=init_layer_norm(d, trainable),
            mlp_fc1=init_linear(rng, d, config.mlp_dim, trainable=trainable),
            mlp_fc2=init_linear(rng, config.mlp_dim, d, trainable=trainable),
            norm_mlp=init_layer_norm(d, trainable),
            image_to_box=attn(), norm_i2b=init_layer_norm(d, trainable),
        ))
    return RimParams(
        config=config,
        pe_freq=make_pe_frequencies(d, rng),
        corner_embed=T.init_normal(rng, (2, d), 0.02, trainable=trainable),
        layers=layers,
    )


def rim_forward(bbox_tokens: Tensor, image_features: Tensor, image_pe: Tensor,
                params: RimParams, collect_trace: bool = False):
    """Run the interaction layers; returns (RegionalFeatures, updated image features).

    `image_pe` must hold one positional encoding per image token, aligned
    row-for-row with `image_features`.  With `collect_trace` a third value
    is returned: per layer, the raw (pre-residual) output of each sub-step.
    """
    d = params.config.d_model
    if bbox_tokens.shape != (2, d):
        raise ShapeError(f"bbox tokens must be [2, {d}], got {bbox_tokens.shape}")
    if image_features.data.ndim != 2 or image_features.shape[1] != d:
        raise ShapeError(f"image features must be [N, {d}], got {image_features.shape}")
    if image_pe.shape != image_features.shape:
        raise ShapeError(
            f"positional encodings {image_pe.shape} do not match features {image_features.shape}")

    box, img, box0 = bbox_tokens, image_features, bbox_tokens
    trace = []
    for layer in params.layers:
        steps = {}

        h = T.add(layer.norm_sa(box), box0)
        steps["sa"] = multi_head_attention(h, h, layer.sa)
        box = T.add(box, steps["sa"])

        q = T.add(layer.norm_b2i(box), box0)
        steps["b2i"] = multi_head_attention(q, T.add(img, image_pe), layer.box_to_image)
        box = T.add(box, steps["b2i"])

        steps["mlp"] = layer.mlp_fc2(T.gelu(layer.mlp_fc1(layer.norm_mlp(box))))
        box = T.add(box, steps["mlp"])

        q_img = T.add(layer.norm_i2b(img), image_pe)
        steps["i2b"] = multi_head_attention(q_img, T.add(box, box0), layer.image_to_box)
        img = T.add(img, steps["i2b"])

        trace.append(steps)

    regional = RegionalFeatures(tokens=box)
    if collect_trace:
        return regional, img, trace
    return regional, img
