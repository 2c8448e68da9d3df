"""Named-parameter registry and the binary checkpoint format.

Checkpoint layout (all little-endian):

    magic "RGNCKPT1"
    u32 header_length, then that many bytes of JSON
        (format_version, stage, config echo, seed, vocab hash)
    u32 tensor count, then per tensor:
        u16 name length, utf-8 name, u8 ndim, ndim * i64 dims,
        row-major float32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CheckpointError, ValidationError
from .fileio import atomic_write_bytes
from .tensor import Tensor

CHECKPOINT_MAGIC = b"RGNCKPT1"
FORMAT_VERSION = 1


class ModelParams:
    """Flat name -> Tensor registry with per-parameter trainable flags.

    Sections are derived from names: anything containing ".lora." belongs
    to the adapter section, otherwise the prefix before the first dot
    (encoder, rim, v2l, lm).
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def register(self, named: Iterable[tuple[str, Tensor]]) -> None:
        for name, t in named:
            if name in self._tensors:
                raise ValidationError(f"duplicate parameter name {name!r}")
            self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if t.requires_grad}

    @staticmethod
    def section_of(name: str) -> str:
        if ".lora." in name:
            return "lora"
        return name.split(".", 1)[0]

    def section(self, section: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self.section_of(n) == section}

    def state_bytes(self, section: str | None = None) -> bytes:
        """Concatenated float32 bytes in sorted-name order (for freeze contracts)."""
        blob = bytearray()
        for name in sorted(self._tensors):
            if section is not None and self.section_of(name) != section:
                continue
            blob += np.ascontiguousarray(self._tensors[name].data, dtype="<f4").tobytes()
        return bytes(blob)

    def load_values(self, arrays: Mapping[str, np.ndarray],
                    missing_ok=lambda name: False) -> None:
        """Copy checkpoint arrays into registered tensors, enforcing shapes."""
        for name, t in self._tensors.items():
            if name not in arrays:
                if missing_ok(name):
                    continue
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(
                    f"checkpoint tensor {name!r} has shape {tuple(arr.shape)}, expected {t.shape}")
            t.data[...] = arr.astype(t.data.dtype)


def save_checkpoint(path, header: dict, tensors: Mapping[str, Tensor] | ModelParams) -> None:
    if isinstance(tensors, ModelParams):
        tensors = tensors.as_dict()
    head = dict(header)
    head.setdefault("format_version", FORMAT_VERSION)
    head_json = json.dumps(head, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", len(head_json))
    payload += head_json
    payload += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].data, dtype="<f4")
        encoded = name.encode("utf-8")
        payload += struct.pack("<H", len(encoded))
        payload += encoded
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}q", *arr.shape)
        payload += arr.tobytes()
    atomic_write_bytes(path, bytes(payload))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (head_len,) = take("<I")
    header = json.loads(blob[off:off + head_len].decode("utf-8"))
    off += head_len
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {header.get('format_version')!r}")
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        dims = take(f"<{ndim}q") if ndim else ()
        n_items = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off).reshape(dims)
        off += n_items * 4
        tensors[name] = arr.astype(np.float32)
    return header, tensors
