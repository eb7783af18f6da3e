"""Binary ``CHMC1`` checkpoint container.

Layout: magic ``b"CHMC1"``, a little-endian uint32 byte length, a UTF-8
JSON header, then one record per tensor: uint32 name length, name, uint32
rank, ``rank`` uint32 dims, row-major little-endian float32 data.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError

MAGIC = b"CHMC1"


def dump_tensors(header: dict, tensors: dict) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_tensors(data: bytes) -> tuple[dict, dict]:
    if data[:5] != MAGIC:
        raise ValidationError("not a CHMC1 checkpoint (bad magic)")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValidationError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    tensors = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return header, tensors


@dataclass
class Checkpoint:
    """Encoder (and optionally head) parameters plus the bookkeeping needed to resume."""

    encoder_config: dict
    encoder_params: dict
    head_kind: str | None = None
    head_params: dict = field(default_factory=dict)
    step: int = 0
    metric_name: str | None = None
    metric_value: float | None = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "config": self.encoder_config,
            "head_kind": self.head_kind,
            "step": self.step,
            "metric": {"name": self.metric_name, "value": self.metric_value},
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        tensors = dict(self.encoder_params)
        tensors.update({"head." + k: v for k, v in self.head_params.items()})
        return dump_tensors(self.header(), tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header, tensors = parse_tensors(data)
        enc = {k: v for k, v in tensors.items() if not k.startswith("head.")}
        head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
        metric = header.get("metric") or {}
        return cls(
            encoder_config=header["config"],
            encoder_params=enc,
            head_kind=header.get("head_kind"),
            head_params=head,
            step=header.get("step", 0),
            metric_name=metric.get("name"),
            metric_value=metric.get("value"),
            extra=header.get("extra", {}),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
