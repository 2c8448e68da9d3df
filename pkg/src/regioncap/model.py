"""Desk-scale stand-ins with production-shaped interfaces.

A patch-projection visual encoder replaces a pretrained ViT, a two-linear
mapper carries visual features into the language embedding space, and a
small causal transformer stands in for the language model.  Interfaces
(feature dims, token splicing, greedy decoding) match what a real encoder
and decoder would need, so the stand-ins are swappable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import attend
from .errors import ValidationError
from .layers import LayerNormParams, Linear, init_layer_norm, init_linear
from .lora import LoraLinear, attach_lora
from .params import ModelParams
from .rim import RimConfig, RimParams, init_rim
from .tensor import ShapeError, Tensor
from .vocab import InstructionPrompt, Vocab

# A frozen random decoder still needs a usable logit range, so the head and
# embeddings start wider than the usual 0.02 transformer init.
EMBED_STD = 0.1
HEAD_STD = 0.35


@dataclass(frozen=True)
class ModelPreset:
    """All dimensions for one build of the stack."""

    name: str
    image_size: int
    patch_size: int
    channels: int
    d_v: int
    rim_layers: int
    rim_d_attn: int
    rim_heads: int
    rim_mlp_dim: int
    v2l_hidden: int
    d_lm: int
    lm_layers: int
    lm_heads: int
    lm_mlp_dim: int
    lm_max_len: int

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2


TOY_PRESET = ModelPreset(
    name="toy", image_size=32, patch_size=8, channels=3, d_v=32,
    rim_layers=2, rim_d_attn=32, rim_heads=4, rim_mlp_dim=64,
    v2l_hidden=32, d_lm=32, lm_layers=2, lm_heads=4, lm_mlp_dim=128, lm_max_len=96,
)

# Encoder/region dims follow the full-scale recipe (336/14 patches, 1024-d
# features, 128-d attention, 8 heads, 2048-d MLP); the decoder stays small.
PAPER_PRESET = ModelPreset(
    name="paper", image_size=336, patch_size=14, channels=3, d_v=1024,
    rim_layers=2, rim_d_attn=128, rim_heads=8, rim_mlp_dim=2048,
    v2l_hidden=1024, d_lm=64, lm_layers=2, lm_heads=4, lm_mlp_dim=256, lm_max_len=768,
)

PRESETS = {p.name: p for p in (TOY_PRESET, PAPER_PRESET)}


def get_preset(name: str) -> ModelPreset:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


# ---------------------------------------------------------------------------
# visual encoder


@dataclass
class GlobalFeatures:
    """One feature row per image patch, plus the grid layout they came from."""

    grid: Tensor
    grid_h: int
    grid_w: int


@dataclass
class EncoderParams:
    patch_size: int
    proj: Linear
    norm: LayerNormParams

    def named_tensors(self, prefix: str = "encoder"):
        yield from self.proj.named_tensors(f"{prefix}.proj")
        yield from self.norm.named_tensors(f"{prefix}.norm")


def init_encoder(preset: ModelPreset, rng: np.random.Generator,
                 trainable: bool = False) -> EncoderParams:
    d_patch = preset.patch_size ** 2 * preset.channels
    return EncoderParams(
        patch_size=preset.patch_size,
        proj=init_linear(rng, d_patch, preset.d_v, trainable=trainable),
        norm=init_layer_norm(preset.d_v, trainable=trainable),
    )


def encode_image(image: np.ndarray, params: EncoderParams) -> GlobalFeatures:
    """Non-overlapping patch flattening, linear projection, layer norm."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be [H, W, C], got shape {image.shape}")
    h, w, c = image.shape
    p = params.patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    if p * p * c != params.proj.d_in:
        raise ShapeError(f"patch dim {p * p * c} does not match projection input {params.proj.d_in}")
    gh, gw = h // p, w // p
    patches = (image.reshape(gh, p, gw, p, c)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(gh * gw, p * p * c))
    grid = params.norm(params.proj(Tensor(patches)))
    return GlobalFeatures(grid=grid, grid_h=gh, grid_w=gw)


# ---------------------------------------------------------------------------
# vision-to-language mapper


@dataclass
class MappedFeatures:
    tokens: Tensor
    kind: str  # "region" or "image"


@dataclass
class V2lParams:
    fc1: Linear
    fc2: Linear

    def named_tensors(self, prefix: str = "v2l"):
        yield from self.fc1.named_tensors(f"{prefix}.fc1")
        yield from self.fc2.named_tensors(f"{prefix}.fc2")


def init_v2l(preset: ModelPreset, rng: np.random.Generator, trainable: bool = True) -> V2lParams:
    return V2lParams(
        fc1=init_linear(rng, preset.d_v, preset.v2l_hidden, trainable=trainable),
        fc2=init_linear(rng, preset.v2l_hidden, preset.d_lm, trainable=trainable),
    )


def v2l_map(x: Tensor, params: V2lParams, kind: str) -> MappedFeatures:
    """Two projection layers with a GELU between; applied to regional or global features."""
    if kind not in ("region", "image"):
        raise ValidationError(f"unknown feature kind {kind!r}")
    if x.shape[1] != params.fc1.d_in:
        raise ShapeError(f"mapper expects [n, {params.fc1.d_in}], got {x.shape}")
    return MappedFeatures(tokens=params.fc2(T.gelu(params.fc1(x))), kind=kind)


# ---------------------------------------------------------------------------
# toy causal language model


@dataclass
class LmBlock:
    ln1: LayerNormParams
    wq: Linear | LoraLinear
    wk: Linear | LoraLinear
    wv: Linear | LoraLinear
    wo: Linear | LoraLinear
    ln2: LayerNormParams
    fc1: Linear | LoraLinear
    fc2: Linear | LoraLinear

    def linear_layers(self):
        yield "attn.wq", self.wq
        yield "attn.wk", self.wk
        yield "attn.wv", self.wv
        yield "attn.wo", self.wo
        yield "mlp.fc1", self.fc1
        yield "mlp.fc2", self.fc2

    def named_tensors(self, prefix: str):
        yield from self.ln1.named_tensors(f"{prefix}.ln1")
        yield from self.ln2.named_tensors(f"{prefix}.ln2")
        for sub, layer in self.linear_layers():
            yield from layer.named_tensors(f"{prefix}.{sub}")


@dataclass
class LmParams:
    num_heads: int
    max_len: int
    tok_embed: Tensor
    pos_embed: Tensor
    blocks: list[LmBlock] = field(default_factory=list)
    ln_f: LayerNormParams = None
    head: Linear = None

    @property
    def d_lm(self) -> int:
        return self.tok_embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tok_embed.shape[0]

    def named_tensors(self, prefix: str = "lm"):
        yield f"{prefix}.tok_embed", self.tok_embed
        yield f"{prefix}.pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"{prefix}.blocks.{i}")
        yield from self.ln_f.named_tensors(f"{prefix}.ln_f")
        yield from self.head.named_tensors(f"{prefix}.head")


def init_lm(preset: ModelPreset, vocab_size: int, rng: np.random.Generator,
            trainable: bool = False) -> LmParams:
    d = preset.d_lm
    blocks = []
    for _ in range(preset.lm_layers):
        blocks.append(LmBlock(
            ln1=init_layer_norm(d, trainable),
            wq=init_linear(rng, d, d, trainable=trainable),
            wk=init_linear(rng, d, d, trainable=trainable),
            wv=init_linear(rng, d, d, trainable=trainable),
            wo=init_linear(rng, d, d, trainable=trainable),
            ln2=init_layer_norm(d, trainable),
            fc1=init_linear(rng, d, preset.lm_mlp_dim, trainable=trainable),
            fc2=init_linear(rng, preset.lm_mlp_dim, d, trainable=trainable),
        ))
    return LmParams(
        num_heads=preset.lm_heads,
        max_len=preset.lm_max_len,
        tok_embed=T.init_normal(rng, (vocab_size, d), EMBED_STD, trainable=trainable),
        pos_embed=T.init_normal(rng, (preset.lm_max_len, d), EMBED_STD, trainable=trainable),
        blocks=blocks,
        ln_f=init_layer_norm(d, trainable),
        head=init_linear(rng, d, vocab_size, std=HEAD_STD, bias=False, trainable=trainable),
    )


def lm_forward(seq: Tensor, params: LmParams) -> Tensor:
    """Causal transformer over an embedded sequence [T, d] -> logits [T, V]."""
    t = seq.shape[0]
    if t < 1:
        raise ShapeError("lm_forward: empty sequence")
    if t > params.max_len:
        raise ShapeError(f"sequence length {t} exceeds max_len {params.max_len}")
    if seq.shape[1] != params.d_lm:
        raise ShapeError(f"lm_forward expects [T, {params.d_lm}], got {seq.shape}")
    x = T.add(seq, T.narrow(params.pos_embed, 0, 0, t))
    for block in params.blocks:
        h = block.ln1(x)
        mixed = attend(block.wq(h), block.wk(h), block.wv(h), params.num_heads, causal=True)
        x = T.add(x, block.wo(mixed))
        h = block.ln2(x)
        x = T.add(x, block.fc2(T.gelu(block.fc1(h))))
    return params.head(params.ln_f(x))


def build_prompt(prompt: InstructionPrompt, visual: MappedFeatures, vocab: Vocab,
                 embed_table: Tensor) -> Tensor:
    """Embed prompt tokens and splice the visual tokens over the placeholder.

    Output length is len(prompt) - 1 + n_visual.
    """
    if prompt.mode != visual.kind:
        raise ValidationError(
            f"prompt mode {prompt.mode!r} does not match feature kind {visual.kind!r}")
    prompt.validate(vocab)
    idx = prompt.placeholder_index
    parts = []
    if idx > 0:
        parts.append(T.embedding(embed_table, prompt.token_ids[:idx]))
    parts.append(visual.tokens)
    if idx + 1 < len(prompt.token_ids):
        parts.append(T.embedding(embed_table, prompt.token_ids[idx + 1:]))
    return T.concat(parts, axis=0)


def generate(prefix: Tensor, params: LmParams, vocab: Vocab, max_len: int) -> list[int]:
    """Greedy argmax decoding; stops at `<eos>` or after max_len tokens."""
    out: list[int] = []
    seq = prefix
    for _ in range(max_len):
        if seq.shape[0] >= params.max_len:
            break
        logits = lm_forward(seq, params)
        next_id = int(np.argmax(logits.data[-1]))
        if next_id == vocab.eos_id:
            break
        out.append(next_id)
        seq = T.concat([seq, T.embedding(params.tok_embed, [next_id])], axis=0)
    return out


# ---------------------------------------------------------------------------
# full-stack assembly


@dataclass
class MultimodalModel:
    """All sections of one stage's model plus the flat parameter registry."""

    preset: ModelPreset
    vocab: Vocab
    stage: int
    encoder: EncoderParams
    rim: "RimParams | None"
    v2l: V2lParams
    lm: LmParams
    params: ModelParams


def attach_lm_adapters(lm: LmParams, r: int, alpha: float, rng: np.random.Generator) -> None:
    """Wrap every linear layer of the decoder's attention and MLP blocks."""
    for block in lm.blocks:
        block.wq = attach_lora(block.wq, r, alpha, rng)
        block.wk = attach_lora(block.wk, r, alpha, rng)
        block.wv = attach_lora(block.wv, r, alpha, rng)
        block.wo = attach_lora(block.wo, r, alpha, rng)
        block.fc1 = attach_lora(block.fc1, r, alpha, rng)
        block.fc2 = attach_lora(block.fc2, r, alpha, rng)


def build_model(preset: ModelPreset, vocab: Vocab, seed: int, stage: int,
                lora_r: int = 8, lora_alpha: float = 16.0,
                all_trainable: bool = False) -> MultimodalModel:
    """Deterministically initialize one stage's model.

    Stage 1 trains the region module and the mapper (encoder and decoder
    frozen); stage 2 drops the region module entirely and trains the
    mapper plus LoRA factors on the frozen decoder.  `all_trainable`
    flips every section trainable for gradient checking.
    """
    if stage not in (1, 2):
        raise ValidationError(f"stage must be 1 or 2, got {stage}")
    rng = np.random.default_rng(seed)
    encoder = init_encoder(preset, rng, trainable=all_trainable)
    rim = None
    if stage == 1:
        rim_cfg = RimConfig(d_model=preset.d_v, num_layers=preset.rim_layers,
                            d_attn=preset.rim_d_attn, num_heads=preset.rim_heads,
                            mlp_dim=preset.rim_mlp_dim)
        rim = init_rim(rim_cfg, rng, trainable=True)
    v2l = init_v2l(preset, rng, trainable=True)
    lm = init_lm(preset, len(vocab), rng, trainable=all_trainable)
    if stage == 2:
        attach_lm_adapters(lm, lora_r, lora_alpha, rng)

    registry = ModelParams()
    registry.register(encoder.named_tensors("encoder"))
    if rim is not None:
        registry.register(rim.named_tensors("rim"))
    registry.register(v2l.named_tensors("v2l"))
    registry.register(lm.named_tensors("lm"))
    return MultimodalModel(preset=preset, vocab=vocab, stage=stage, encoder=encoder,
                           rim=rim, v2l=v2l, lm=lm, params=registry)
