"""Corpus-built vocabulary with reserved special tokens, and prompt ids.

Tokenization is lowercased whitespace splitting with sentence punctuation
split off as separate tokens; `detokenize` reattaches punctuation, so
ids -> text -> ids round-trips for in-vocabulary sentences.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError

RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>", "<region>", "<image>")
_PUNCT = ".,!?;:"
_TOKEN_RE = re.compile(r"[^\s" + re.escape(_PUNCT) + r"]+|[" + re.escape(_PUNCT) + r"]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, with punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    """Inverse of `tokenize` up to whitespace normalization."""
    out: list[str] = []
    for tok in tokens:
        if tok in _PUNCT or not out:
            out.append(tok)
        else:
            out.append(" " + tok)
    return "".join(out)


class Vocab:
    """token <-> id mapping; ids 0..5 are the fixed reserved tokens."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValidationError(f"vocabulary must start with the reserved header {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary over a corpus, ordered by descending frequency then alphabetically."""
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text))
        body = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(list(RESERVED) + [tok for tok in body if tok not in RESERVED])

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    @property
    def region_id(self) -> int:
        return 4

    @property
    def image_id(self) -> int:
        return 5

    def placeholder_id(self, mode: str) -> int:
        if mode == "region":
            return self.region_id
        if mode == "image":
            return self.image_id
        raise ValidationError(f"unknown prompt mode {mode!r}")

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        return [self.id_of(tok) for tok in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize([self._tokens[i] for i in ids])

    def serialize(self) -> str:
        return "\n".join(self._tokens) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class InstructionPrompt:
    """Tokenized instruction with exactly one `<region>`/`<image>` placeholder."""

    token_ids: list[int]
    placeholder_index: int
    mode: str

    def validate(self, vocab: Vocab) -> "InstructionPrompt":
        ph = vocab.placeholder_id(self.mode)
        hits = [i for i, t in enumerate(self.token_ids) if t == ph]
        if len(hits) != 1:
            raise ValidationError(
                f"prompt must contain exactly one {vocab.token_of(ph)} token, found {len(hits)}")
        if hits[0] != self.placeholder_index:
            raise ValidationError(
                f"placeholder_index {self.placeholder_index} does not match token position {hits[0]}")
        return self
