"""Two-stage optimization: region-attribute alignment, then caption tuning.

Stage 1 trains the region module and mapper against attribute text with
the encoder and decoder frozen.  Stage 2 loads the stage-1 mapper, drops
the region module entirely, and trains the mapper (at its own learning
rate) plus LoRA factors on the frozen decoder against full descriptions.
The loss supervises only answer tokens; prompt and visual positions are
masked out.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (CaptionSample, InstructionSet, RegionSample, corpus_texts,
                   default_instruction_set, prompt_from_template, sample_instruction)
from .errors import CheckpointError, TrainingError, ValidationError
from .fileio import atomic_write_text
from .model import (MappedFeatures, MultimodalModel, build_model, build_prompt, encode_image,
                    generate, get_preset, lm_forward, v2l_map)
from .optim import AdamHyper, AdamState, adamw_update, cosine_lr
from .params import load_checkpoint, save_checkpoint
from .rim import encode_bbox, grid_positional_encoding, rim_forward
from .tensor import ShapeError, Tensor, backward
from .vocab import InstructionPrompt, Vocab

logger = logging.getLogger(__name__)

IGNORE_ID = -100
VOCAB_FILENAME = "vocab.txt"


@dataclass
class TrainingConfig:
    stage: int
    preset: str = "toy"
    batch_size: int = 4
    epochs: int = 1
    max_steps: int | None = None
    base_lr: float = 1e-3
    v2l_lr: float | None = None  # stage 2 only; defaults to base_lr
    lora_r: int = 8
    lora_alpha: float = 16.0
    weight_decay: float = 0.0
    warmup_steps: int | None = None  # default: 3% of total steps
    grad_accum: int = 1
    seed: int = 0
    log_every: int = 50
    # decoder warmup: the desk-scale stand-in for loading pretrained decoder
    # weights before stage-1 optimization begins (stage 1 only)
    lm_warmup_steps: int = 0
    lm_warmup_lr: float = 3e-3

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("batch_size", "epochs", "grad_accum"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.base_lr <= 0 or (self.v2l_lr is not None and self.v2l_lr <= 0):
            raise ValidationError("learning rates must be positive")
        if self.lora_r < 1 or self.lora_alpha <= 0:
            raise ValidationError("lora_r must be >= 1 and lora_alpha positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError("max_steps must be >= 1 when given")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValidationError("warmup_steps must be >= 0")
        if self.lm_warmup_steps < 0 or self.lm_warmup_lr <= 0:
            raise ValidationError("decoder warmup settings must be non-negative/positive")
        get_preset(self.preset)

    @property
    def effective_v2l_lr(self) -> float:
        return self.base_lr if self.v2l_lr is None else self.v2l_lr


@dataclass
class TrainResult:
    model: MultimodalModel
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    vocab_path: Path | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


# ---------------------------------------------------------------------------
# per-sample losses


def features_for(sample, model: MultimodalModel) -> tuple[Tensor, int, int]:
    """Feature grid for a sample: run the encoder on pixels, or use the stored grid."""
    if sample.image is not None:
        feats = encode_image(np.asarray(sample.image), model.encoder)
        return feats.grid, feats.grid_h, feats.grid_w
    if sample.features is not None:
        gh, gw = sample.grid_hw
        return Tensor(sample.features), gh, gw
    raise ValidationError(f"sample {sample.image_id!r} carries neither an image nor features")


def packed_answer_loss(model: MultimodalModel, prompt: InstructionPrompt,
                       visual, answer_text: str) -> Tensor:
    """Cross-entropy over answer tokens (plus `<eos>`) given prompt + visual splice."""
    prompt_embeds = build_prompt(prompt, visual, model.vocab, model.lm.tok_embed)
    answer_ids = model.vocab.encode(answer_text) + [model.vocab.eos_id]
    seq = T.concat([prompt_embeds, T.embedding(model.lm.tok_embed, answer_ids)], axis=0)
    logits = lm_forward(seq, model.lm)
    n_prompt = prompt_embeds.shape[0]
    targets = [IGNORE_ID] * (n_prompt - 1) + answer_ids
    return T.cross_entropy(T.narrow(logits, 0, 0, seq.shape[0] - 1), targets, IGNORE_ID)


def region_sample_loss(model: MultimodalModel, sample: RegionSample,
                       prompt: InstructionPrompt) -> Tensor:
    if model.rim is None:
        raise ValidationError("region losses need a stage-1 model (with a region module)")
    grid, gh, gw = features_for(sample, model)
    if grid.shape[1] != model.preset.d_v:
        raise ShapeError(f"feature dim {grid.shape[1]} does not match preset d_v {model.preset.d_v}")
    pe = grid_positional_encoding(model.rim.pe_freq, gh, gw)
    box_tokens = encode_bbox(sample.bbox, model.rim.corner_embed, model.rim.pe_freq)
    regional, _ = rim_forward(box_tokens, grid, pe, model.rim)
    mapped = v2l_map(regional.tokens, model.v2l, kind="region")
    return packed_answer_loss(model, prompt, mapped, sample.attribute)


def caption_sample_loss(model: MultimodalModel, sample: CaptionSample,
                        prompt: InstructionPrompt) -> Tensor:
    grid, _, _ = features_for(sample, model)
    mapped = v2l_map(grid, model.v2l, kind="image")
    return packed_answer_loss(model, prompt, mapped, sample.caption)


# ---------------------------------------------------------------------------
# the shared optimization loop


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def _train_loop(config: TrainingConfig, model: MultimodalModel, samples, loss_for,
                result: TrainResult) -> None:
    if not samples:
        raise ValidationError("training dataset is empty")
    trainable = model.params.trainable()
    state = AdamState.for_params(trainable)
    n = len(samples)
    chunk = config.batch_size * config.grad_accum
    steps_per_epoch = math.ceil(n / chunk)
    total = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    warmup = config.warmup_steps if config.warmup_steps is not None else int(round(0.03 * total))
    warmup = min(warmup, max(total - 1, 0))
    rng = np.random.default_rng(config.seed)
    v2l_names = [name for name in trainable if name.startswith("v2l.")]

    log_rows = ["step,lr,loss"]
    step = 0
    for _epoch in range(config.epochs):
        if step >= total:
            break
        order = rng.permutation(n)
        for start in range(0, n, chunk):
            if step >= total:
                break
            step += 1
            lr = cosine_lr(step - 1, total, config.base_lr, warmup)
            lr_map = None
            if config.stage == 2 and v2l_names:
                v2l_lr = cosine_lr(step - 1, total, config.effective_v2l_lr, warmup)
                lr_map = {name: v2l_lr for name in v2l_names}

            idxs = order[start:start + chunk]
            accum: dict[str, np.ndarray] = {}
            micro_losses = []
            for m_start in range(0, len(idxs), config.batch_size):
                micro = idxs[m_start:m_start + config.batch_size]
                loss = _mean_loss([loss_for(samples[i], rng) for i in micro])
                grads = backward(loss, trainable)
                for name, g in grads.items():
                    if name in accum:
                        accum[name] += g.data
                    else:
                        accum[name] = g.data.copy()
                micro_losses.append(loss.item())
            n_micro = len(micro_losses)
            grad_map = {name: Tensor(arr / n_micro, dtype=arr.dtype)
                        for name, arr in accum.items()}
            adamw_update(trainable, grad_map, state,
                         AdamHyper(lr=lr, weight_decay=config.weight_decay), lr_map=lr_map)

            loss_val = float(np.mean(micro_losses))
            if not math.isfinite(loss_val):
                raise TrainingError(f"non-finite loss at step {step}")
            result.losses.append(loss_val)
            result.lrs.append(lr)
            log_rows.append(f"{step},{lr:.8g},{loss_val:.8g}")
            if config.log_every and step % config.log_every == 0:
                logger.info("stage %d step %d/%d lr %.3g loss %.4f",
                            config.stage, step, total, lr, loss_val)

    if result.log_path is not None:
        atomic_write_text(result.log_path, "\n".join(log_rows) + "\n")


def _checkpoint_header(config: TrainingConfig, vocab: Vocab) -> dict:
    return {
        "stage": config.stage,
        "config": asdict(config),
        "seed": config.seed,
        "vocab_sha256": vocab.sha256(),
    }


# ---------------------------------------------------------------------------
# decoder warmup (stand-in for loading pretrained decoder weights)


def _set_section_trainable(model: MultimodalModel, section: str, flag: bool) -> None:
    for _name, t in model.params.section(section).items():
        t.set_trainable(flag)


def pretrain_decoder(model: MultimodalModel, texts: list[str], steps: int, lr: float,
                     rng: np.random.Generator, slot_noise: float = 0.05,
                     batch_size: int = 8,
                     instruction_set: InstructionSet | None = None) -> list[float]:
    """Teach the decoder to read content placed in the visual-slot positions.

    Each example packs two (noisy) embeddings of tokens drawn from the
    target sentence where the visual tokens will later sit, followed by
    the region instruction and the sentence itself.  Training the decoder
    on this slot-reading task is the desk-scale analog of starting from a
    pretrained language model: afterwards the frozen decoder can decode
    whatever the mapper writes into its embedding space.
    """
    iset = instruction_set or default_instruction_set()
    prompt = prompt_from_template(iset.region_template, "region", model.vocab)
    usable = [t for t in texts if model.vocab.encode(t)]
    if not usable:
        raise ValidationError("decoder warmup needs at least one non-empty text")
    _set_section_trainable(model, "lm", True)
    lm_params = {n: t for n, t in model.params.section("lm").items()}
    state = AdamState.for_params(lm_params)
    losses = []
    for _step in range(steps):
        batch = []
        for _ in range(batch_size):
            text = usable[int(rng.integers(0, len(usable)))]
            ids = model.vocab.encode(text)
            picks = sorted(rng.choice(len(ids), size=min(2, len(ids)), replace=False).tolist())
            slot_ids = [ids[p] for p in picks]
            if len(slot_ids) == 1:
                slot_ids = slot_ids * 2
            slots = T.embedding(model.lm.tok_embed, slot_ids)
            noise = Tensor(rng.normal(0.0, slot_noise, size=slots.shape))
            visual = MappedFeatures(tokens=T.add(slots, noise), kind="region")
            batch.append(packed_answer_loss(model, prompt, visual, text))
        loss = _mean_loss(batch)
        grads = backward(loss, lm_params)
        adamw_update(lm_params, grads, state, AdamHyper(lr=lr))
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingError(f"non-finite decoder warmup loss at step {_step + 1}")
        losses.append(val)
    _set_section_trainable(model, "lm", False)
    return losses


def prepare_stage1_model(config: TrainingConfig, samples: list[RegionSample],
                         extra_vocab_texts: tuple[str, ...] = (),
                         instruction_set: InstructionSet | None = None) -> MultimodalModel:
    """Build the stage-1 model; runs the decoder warmup when configured."""
    iset = instruction_set or default_instruction_set()
    vocab = Vocab.build(corpus_texts(region_samples=samples, instruction_set=iset)
                        + list(extra_vocab_texts))
    preset = get_preset(config.preset)
    model = build_model(preset, vocab, config.seed, stage=1)
    if config.lm_warmup_steps:
        warm_rng = np.random.default_rng(config.seed + 101)
        texts = [s.attribute for s in samples] + list(extra_vocab_texts)
        pretrain_decoder(model, texts, config.lm_warmup_steps, config.lm_warmup_lr,
                         warm_rng, instruction_set=iset)
    return model


# ---------------------------------------------------------------------------
# stage entry points


def train_stage1(config: TrainingConfig, samples: list[RegionSample], out_dir,
                 extra_vocab_texts: tuple[str, ...] = (),
                 instruction_set: InstructionSet | None = None,
                 model: MultimodalModel | None = None) -> TrainResult:
    """Region-attribute alignment: trains region module + mapper only."""
    if config.stage != 1:
        raise ValidationError("train_stage1 needs a stage-1 config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iset = instruction_set or default_instruction_set()
    if model is None:
        model = prepare_stage1_model(config, samples, extra_vocab_texts, iset)
    vocab = model.vocab
    prompt = prompt_from_template(iset.region_template, "region", vocab)

    result = TrainResult(model=model, checkpoint_path=out_dir / "stage1.ckpt",
                         log_path=out_dir / "stage1_log.csv",
                         vocab_path=out_dir / VOCAB_FILENAME)
    loss_for = lambda sample, rng: region_sample_loss(model, sample, prompt)
    _train_loop(config, model, samples, loss_for, result)

    vocab.save(result.vocab_path)
    save_checkpoint(result.checkpoint_path, _checkpoint_header(config, vocab), model.params)
    return result


def load_stage2_model(config: TrainingConfig, stage1_checkpoint) -> MultimodalModel:
    """Build the stage-2 model and pull encoder/mapper/decoder weights from stage 1."""
    header, arrays = load_checkpoint(stage1_checkpoint)
    if header.get("stage") != 1:
        raise CheckpointError(
            f"stage 2 must start from a stage-1 checkpoint, got stage {header.get('stage')!r}")
    ckpt_cfg = header.get("config", {})
    if ckpt_cfg.get("preset") != config.preset:
        raise CheckpointError(
            f"checkpoint preset {ckpt_cfg.get('preset')!r} does not match config {config.preset!r}")
    vocab_path = Path(stage1_checkpoint).parent / VOCAB_FILENAME
    if not vocab_path.exists():
        raise CheckpointError(f"vocabulary file not found next to checkpoint: {vocab_path}")
    vocab = Vocab.load(vocab_path)
    if vocab.sha256() != header.get("vocab_sha256"):
        raise CheckpointError("vocabulary file does not match the checkpoint's vocab hash")
    preset = get_preset(config.preset)
    model = build_model(preset, vocab, config.seed, stage=2,
                        lora_r=config.lora_r, lora_alpha=config.lora_alpha)
    # the stage-2 registry has no rim.* names, so stage-1 rim tensors are ignored;
    # fresh adapters keep their init
    model.params.load_values(arrays, missing_ok=lambda name: ".lora." in name)
    return model


def train_stage2(config: TrainingConfig, samples: list[CaptionSample], stage1_checkpoint,
                 out_dir, instruction_set: InstructionSet | None = None) -> TrainResult:
    """Image-level caption tuning: trains mapper + LoRA factors on the frozen decoder."""
    if config.stage != 2:
        raise ValidationError("train_stage2 needs a stage-2 config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iset = instruction_set or default_instruction_set()
    model = load_stage2_model(config, stage1_checkpoint)

    result = TrainResult(model=model, checkpoint_path=out_dir / "stage2.ckpt",
                         log_path=out_dir / "stage2_log.csv",
                         vocab_path=out_dir / VOCAB_FILENAME)
    loss_for = lambda sample, rng: caption_sample_loss(
        model, sample, sample_instruction(rng, iset, "image", model.vocab))
    _train_loop(config, model, samples, loss_for, result)

    model.vocab.save(result.vocab_path)
    save_checkpoint(result.checkpoint_path, _checkpoint_header(config, model.vocab), model.params)
    return result


def generate_captions(model: MultimodalModel, samples: list[CaptionSample],
                      template_index: int = 0, max_new_tokens: int = 40,
                      instruction_set: InstructionSet | None = None) -> list[dict]:
    """Greedy captions for every sample with one fixed instruction template."""
    iset = instruction_set or default_instruction_set()
    if not 0 <= template_index < len(iset.image_templates):
        raise ValidationError(
            f"instruction index {template_index} outside [0, {len(iset.image_templates)})")
    prompt = prompt_from_template(iset.image_templates[template_index], "image", model.vocab)
    out = []
    for sample in samples:
        grid, _, _ = features_for(sample, model)
        mapped = v2l_map(grid, model.v2l, kind="image")
        prefix = build_prompt(prompt, mapped, model.vocab, model.lm.tok_embed)
        ids = generate(prefix, model.lm, model.vocab, max_new_tokens)
        out.append({"image_id": sample.image_id, "caption": model.vocab.decode(ids)})
    return out
