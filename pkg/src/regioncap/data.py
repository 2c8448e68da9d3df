"""Dataset schemas, JSONL ingestion, instruction templates, and synthetic data.

Records are JSON Lines.  Region records:

    {"image_id": ..., "image": {"w": ..., "h": ...},
     "bbox": [x_min, y_min, width, height], "attribute": "...",
     "features": [[...], ...]?, "grid": {"h": ..., "w": ...}?}

Caption records swap `bbox`/`attribute` for `caption`.  The optional
`features` grid stands in for encoder output so the pipeline runs without
image decoding; `grid` gives its layout (defaults to a square grid).
Synthetic in-memory samples may instead carry a raw image array.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .fileio import iter_jsonl, write_jsonl
from .rim import BBox
from .vocab import InstructionPrompt, Vocab

logger = logging.getLogger(__name__)

REGION_INSTRUCTION = (
    "Based on the provided region of the remote sensing image, describe the "
    "basic attributes of the main objects in that region."
)

IMAGE_INSTRUCTIONS = (
    "Describe the following remote sensing image in detail.",
    "Provide a detailed description of the given remote sensing image.",
    "Elaborate on the remote sensing image you see.",
    "Share a comprehensive overview of the presented remote sensing image.",
    "Conduct a thorough analysis of the remote sensing image.",
    "Explain the various aspects of the remote sensing image before you.",
    "Clarify the contents of the displayed remote sensing image with great detail.",
    "Characterize the remote sensing image using a detailed description.",
    "Break down the elements of the remote sensing image in detail.",
    "Walk through the important details of the remote sensing image.",
    "Portray the remote sensing image with a rich, descriptive narrative.",
    "Narrate the contents of the remote sensing image with precision.",
    "Analyze the remote sensing image in a comprehensive and detailed manner.",
    "Illustrate the remote sensing image through a descriptive explanation.",
    "Write an exhaustive depiction of the given remote sensing image.",
)


class AttributeKind(enum.Enum):
    """The seven attribute families used for dataset statistics (metadata only)."""

    CATEGORY = "category"
    COLOR = "color"
    SIZE = "size"
    GEOMETRY = "geometry"
    ABSOLUTE_LOCATION = "absolute location"
    RELATIVE_LOCATION_RELATION = "relative location relation"
    RELATIVE_SIZE_RELATION = "relative size relation"


@dataclass
class InstructionSet:
    region_template: str = REGION_INSTRUCTION
    image_templates: tuple[str, ...] = IMAGE_INSTRUCTIONS

    def __post_init__(self):
        if len(self.image_templates) != 15:
            raise ValidationError(
                f"expected exactly 15 image-level templates, got {len(self.image_templates)}")

    def all_texts(self) -> list[str]:
        return [self.region_template, *self.image_templates]


def default_instruction_set() -> InstructionSet:
    return InstructionSet()


# ---------------------------------------------------------------------------
# samples


@dataclass
class RegionSample:
    image_id: str
    bbox: BBox
    attribute: str
    features: np.ndarray | None = None
    grid_hw: tuple[int, int] | None = None
    image: np.ndarray | None = None


@dataclass
class CaptionSample:
    image_id: str
    image_w: float
    image_h: float
    caption: str
    features: np.ndarray | None = None
    grid_hw: tuple[int, int] | None = None
    image: np.ndarray | None = None


def _parse_features(record: dict, where: str):
    if "features" not in record:
        return None, None
    feats = np.asarray(record["features"], dtype=np.float32)
    if feats.ndim != 2:
        raise ValidationError(f"{where}: features must be a 2-d [tokens, dim] list")
    if "grid" in record:
        grid = record["grid"]
        gh, gw = int(grid["h"]), int(grid["w"])
    else:
        side = int(round(np.sqrt(feats.shape[0])))
        if side * side != feats.shape[0]:
            raise ValidationError(
                f"{where}: {feats.shape[0]} feature rows is not a square grid; add a 'grid' key")
        gh = gw = side
    if gh * gw != feats.shape[0]:
        raise ValidationError(f"{where}: grid {gh}x{gw} does not match {feats.shape[0]} rows")
    return feats, (gh, gw)


def _require(record: dict, keys: Sequence[str], where: str) -> None:
    missing = [k for k in keys if k not in record]
    if missing:
        raise ValidationError(f"{where}: missing keys {missing}")


def load_region_samples(path) -> list[RegionSample]:
    """Parse and validate region-attribute records, preserving file order."""
    samples = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        _require(record, ("image_id", "image", "bbox", "attribute"), where)
        box_vals = record["bbox"]
        if len(box_vals) != 4:
            raise ValidationError(f"{where}: bbox must be [x, y, w, h]")
        bbox = BBox(*(float(v) for v in box_vals),
                    image_w=float(record["image"]["w"]), image_h=float(record["image"]["h"]))
        problems = bbox.violations()
        if not str(record["attribute"]).strip():
            problems.append("attribute must be non-empty")
        if problems:
            raise ValidationError(f"{where}: " + "; ".join(problems))
        feats, grid_hw = _parse_features(record, where)
        samples.append(RegionSample(image_id=str(record["image_id"]), bbox=bbox,
                                    attribute=str(record["attribute"]),
                                    features=feats, grid_hw=grid_hw))
    if not samples:
        logger.warning("no records found in %s", path)
    return samples


def load_caption_samples(path) -> list[CaptionSample]:
    """Parse and validate image-description records, preserving file order."""
    samples = []
    for lineno, record in iter_jsonl(path):
        where = f"{path}:{lineno}"
        _require(record, ("image_id", "image", "caption"), where)
        if not str(record["caption"]).strip():
            raise ValidationError(f"{where}: caption must be non-empty")
        feats, grid_hw = _parse_features(record, where)
        samples.append(CaptionSample(image_id=str(record["image_id"]),
                                     image_w=float(record["image"]["w"]),
                                     image_h=float(record["image"]["h"]),
                                     caption=str(record["caption"]),
                                     features=feats, grid_hw=grid_hw))
    if not samples:
        logger.warning("no records found in %s", path)
    return samples


def validate_sample(sample) -> list[str]:
    """Collect contract violations without raising or mutating."""
    problems: list[str] = []
    if isinstance(sample, RegionSample):
        problems.extend(sample.bbox.violations())
        if not sample.attribute.strip():
            problems.append("attribute must be non-empty")
    elif isinstance(sample, CaptionSample):
        if not sample.caption.strip():
            problems.append("caption must be non-empty")
        if sample.image_w <= 0 or sample.image_h <= 0:
            problems.append("image dims must be positive")
    else:
        problems.append(f"unknown sample type {type(sample).__name__}")
    return problems


def write_region_jsonl(path, samples: Sequence[RegionSample]) -> None:
    records = []
    for s in samples:
        rec = {"image_id": s.image_id,
               "image": {"w": s.bbox.image_w, "h": s.bbox.image_h},
               "bbox": [s.bbox.x_min, s.bbox.y_min, s.bbox.width, s.bbox.height],
               "attribute": s.attribute}
        if s.features is not None:
            rec["features"] = [[round(float(v), 6) for v in row] for row in s.features]
            rec["grid"] = {"h": s.grid_hw[0], "w": s.grid_hw[1]}
        records.append(rec)
    write_jsonl(path, records)


def write_caption_jsonl(path, samples: Sequence[CaptionSample]) -> None:
    records = []
    for s in samples:
        rec = {"image_id": s.image_id, "image": {"w": s.image_w, "h": s.image_h},
               "caption": s.caption}
        if s.features is not None:
            rec["features"] = [[round(float(v), 6) for v in row] for row in s.features]
            rec["grid"] = {"h": s.grid_hw[0], "w": s.grid_hw[1]}
        records.append(rec)
    write_jsonl(path, records)


# ---------------------------------------------------------------------------
# instruction sampling


def prompt_from_template(template: str, mode: str, vocab: Vocab) -> InstructionPrompt:
    """`<bos>` + placeholder + tokenized instruction text."""
    ids = [vocab.bos_id, vocab.placeholder_id(mode)] + vocab.encode(template)
    return InstructionPrompt(token_ids=ids, placeholder_index=1, mode=mode).validate(vocab)


def sample_instruction(rng: np.random.Generator, instruction_set: InstructionSet,
                       mode: str, vocab: Vocab) -> InstructionPrompt:
    """Region mode always uses the fixed template; image mode draws one of the 15."""
    if mode == "region":
        template = instruction_set.region_template
    elif mode == "image":
        template = instruction_set.image_templates[int(rng.integers(0, 15))]
    else:
        raise ValidationError(f"unknown prompt mode {mode!r}")
    return prompt_from_template(template, mode, vocab)


# ---------------------------------------------------------------------------
# synthetic datasets (overfit/demo-sized, fully seeded)

_COLORS = ("red", "blue", "green", "white")
_OBJECTS = ("vehicle", "tank", "bridge", "harbor")
_SCENES = ("desert", "coastline", "forest", "runway", "river", "city", "field", "island")


def _word_signature(rng: np.random.Generator, words: Sequence[str]) -> dict[str, np.ndarray]:
    return {w: rng.normal(0.0, 1.0, size=3) for w in words}


def make_region_overfit_data(n: int, preset, seed: int = 0) -> list[RegionSample]:
    """`n` boxed images whose in-box pixels encode a color+object signature.

    Attributes are short phrases like "a red vehicle"; the signature is a
    constant per-channel shift inside the box, so a frozen random patch
    encoder preserves the information the region module must extract.
    """
    rng = np.random.default_rng(seed)
    color_sig = _word_signature(rng, _COLORS)
    object_sig = _word_signature(rng, _OBJECTS)
    side = preset.image_size
    patch = preset.patch_size
    grid_side = side // patch
    samples = []
    for i in range(n):
        color = _COLORS[i % len(_COLORS)]
        obj = _OBJECTS[(i // len(_COLORS)) % len(_OBJECTS)]
        image = rng.normal(0.0, 0.2, size=(side, side, preset.channels))
        # patch-aligned box spanning 1-3 grid cells per axis
        gx = int(rng.integers(0, grid_side - 1))
        gy = int(rng.integers(0, grid_side - 1))
        gw = int(rng.integers(1, min(3, grid_side - gx) + 1))
        gh = int(rng.integers(1, min(3, grid_side - gy) + 1))
        x, y, w, h = gx * patch, gy * patch, gw * patch, gh * patch
        image[y:y + h, x:x + w] += color_sig[color] + object_sig[obj]
        samples.append(RegionSample(
            image_id=f"synth-region-{i:03d}",
            bbox=BBox(float(x), float(y), float(w), float(h), float(side), float(side)),
            attribute=f"a {color} {obj}",
            image=image,
        ))
    return samples


def make_caption_overfit_data(n: int, preset, seed: int = 0) -> list[CaptionSample]:
    """`n` images with a global signature tied to a full-sentence caption."""
    rng = np.random.default_rng(seed)
    color_sig = _word_signature(rng, _COLORS)
    object_sig = _word_signature(rng, _OBJECTS)
    scene_sig = _word_signature(rng, _SCENES)
    side = preset.image_size
    samples = []
    for i in range(n):
        color = _COLORS[i % len(_COLORS)]
        obj = _OBJECTS[(i // len(_COLORS)) % len(_OBJECTS)]
        scene = _SCENES[i % len(_SCENES)]
        image = rng.normal(0.0, 0.2, size=(side, side, preset.channels))
        image += color_sig[color] + object_sig[obj] + scene_sig[scene]
        caption = f"the image shows a {color} {obj} near a {scene} ."
        samples.append(CaptionSample(
            image_id=f"synth-caption-{i:03d}",
            image_w=float(side), image_h=float(side),
            caption=caption, image=image,
        ))
    return samples


def corpus_texts(region_samples: Sequence[RegionSample] = (),
                 caption_samples: Sequence[CaptionSample] = (),
                 instruction_set: InstructionSet | None = None) -> list[str]:
    """Everything the vocabulary must cover for the given datasets."""
    iset = instruction_set or default_instruction_set()
    texts = iset.all_texts()
    texts.extend(s.attribute for s in region_samples)
    texts.extend(s.caption for s in caption_samples)
    return texts
