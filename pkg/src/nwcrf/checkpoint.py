"""Binary checkpoint files.

Layout (all integers little-endian)::

    "NWCF" | version u32 | config length u32 | config UTF-8 "key = value" lines
    | tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
      extents u32 * rank, float64 payload

Optimizer moments are stored as ordinary tensors under ``adam.m/`` and
``adam.v/`` prefixes; the step counters live in the config block under the
reserved ``checkpoint.`` keys.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_config, parse_lines, to_lines
from .errors import CheckpointCorruptError, CheckpointFormatError, ConfigError
from .optim import OptimizerState

MAGIC = b"NWCF"
FORMAT_VERSION = 1
_M, _V = "adam.m/", "adam.v/"


@dataclass
class Checkpoint:
    config: ExperimentConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    optimizer: OptimizerState | None = None
    version: int = FORMAT_VERSION
    extra: dict[str, str] = field(default_factory=dict)


def _config_block(ckpt: Checkpoint) -> bytes:
    lines = to_lines(ckpt.config)
    lines.append(f"checkpoint.step = {ckpt.step}")
    if ckpt.optimizer is not None:
        lines.append(f"checkpoint.adam_step = {ckpt.optimizer.step}")
    lines += [f"checkpoint.{k} = {v}" for k, v in ckpt.extra.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _all_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(ckpt.tensors.items())
    if ckpt.optimizer is not None:
        items += [(_M + k, v) for k, v in ckpt.optimizer.m.items()]
        items += [(_V + k, v) for k, v in ckpt.optimizer.v.items()]
    return items


def dumps(ckpt: Checkpoint) -> bytes:
    cfg = _config_block(ckpt)
    tensors = _all_tensors(ckpt)
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
    r = _Reader(buf)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        raw_cfg = parse_lines(r.take(cfg_len).decode("utf-8").splitlines())
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointCorruptError(f"unreadable config block: {exc}") from None
    reserved = {k[len("checkpoint."):]: v for k, v in raw_cfg.items() if k.startswith("checkpoint.")}
    try:
        config = build_config({k: v for k, v in raw_cfg.items() if not k.startswith("checkpoint.")})
    except ConfigError as exc:
        raise CheckpointCorruptError(f"invalid config block: {exc}") from None

    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="strict")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{len(buf) - r.pos} trailing bytes after the last tensor")

    optimizer = None
    if "adam_step" in reserved:
        optimizer = OptimizerState(
            m={k[len(_M):]: v for k, v in tensors.items() if k.startswith(_M)},
            v={k[len(_V):]: v for k, v in tensors.items() if k.startswith(_V)},
            step=int(reserved.pop("adam_step")),
            beta1=config.adam.beta1, beta2=config.adam.beta2, eps=config.adam.eps,
        )
    params = {k: v for k, v in tensors.items() if not k.startswith((_M, _V))}
    step = int(reserved.pop("step", 0))
    return Checkpoint(config=config, tensors=params, step=step, optimizer=optimizer,
                      version=version, extra=reserved)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
