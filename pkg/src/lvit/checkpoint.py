"""Bit-exact binary checkpoints: model config plus a named float64 tensor table.

Layout, all integers little-endian::

    b"LVITCKPT"                    magic
    u32                            format version (1)
    u64 + utf-8                    config text, ``key=value`` lines
    u64                            tensor count
    per tensor:
        u64 + utf-8                name
        u64                        rank
        rank * u64                 dims
        prod(dims) * f64           values, row-major

Config keys are :class:`ModelConfig` fields; training metadata travels as
``meta.<key>`` lines in the same text block.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ._io import atomic_write_bytes
from .errors import CompatibilityError, ConfigError, FormatError, TruncationError
from .kvconfig import build_dataclass, format_kv, parse_kv
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"LVITCKPT"
VERSION = 1
META_PREFIX = "meta."


def encode_checkpoint(params: ModelParams, metadata: Mapping[str, Any] | None = None) -> bytes:
    items: dict[str, Any] = dict(params.config.to_dict())
    for key, value in (metadata or {}).items():
        items[META_PREFIX + key] = value
    text = format_kv(items).encode("utf-8")

    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text,
             struct.pack("<Q", len(params))]
    for name, p in params.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<Q", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path, metadata: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, metadata))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncationError(
                f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def decode_checkpoint(buf: bytes) -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not an lvit checkpoint (bad magic)")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        text = r.take(r.u64("config length"), "config text").decode("utf-8")
        kv = parse_kv(text)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"unreadable checkpoint config: {exc}") from exc

    metadata = {k[len(META_PREFIX):]: v for k, v in kv.items() if k.startswith(META_PREFIX)}
    try:
        config = build_dataclass(
            ModelConfig, {k: v for k, v in kv.items() if not k.startswith(META_PREFIX)})
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"invalid model config in checkpoint: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    count = r.u64("tensor count")
    for i in range(count):
        try:
            name = r.take(r.u64("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {i}: name is not utf-8") from exc
        rank = r.u64(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(r.take(8 * n, f"values of {name}"), dtype="<f8")
        if name in arrays:
            raise FormatError(f"duplicate tensor {name!r}")
        arrays[name] = values.astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after tensor table")

    expected = param_shapes(config)
    problems = []
    for name, shape in expected.items():
        if name not in arrays:
            problems.append(f"{name}: missing (expected {shape})")
        elif arrays[name].shape != shape:
            problems.append(f"{name}: shape {arrays[name].shape}, config expects {shape}")
    problems += [f"{name}: not part of config" for name in arrays if name not in expected]
    if problems:
        raise CompatibilityError("checkpoint tensors disagree with its config: "
                                 + "; ".join(problems))
    params = ModelParams.from_arrays(config, {n: arrays[n] for n in expected})
    return params, config, metadata


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    """Read and validate a checkpoint; nothing is returned unless it is fully valid."""
    return decode_checkpoint(Path(path).read_bytes())
