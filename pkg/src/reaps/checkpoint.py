"""Binary checkpoints.

Layout (little-endian)::

    b"REAPSCK1"
    u32 format_version
    u32 entry_count
    entry_count x { u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], f32 data }
    u32 config_len, config snapshot (utf-8, flat key = value text)

Parameters are stored under their model names, optimizer velocities under
``velocity/<name>``. The snapshot carries the run config plus
``checkpoint.*`` lines (epoch, class count, image size).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import ReapsModel, build_model
from .tensor_core import OptimizerState

MAGIC = b"REAPSCK1"
FORMAT_VERSION = 1
VELOCITY_PREFIX = "velocity/"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    format_version: int
    arrays: dict  # parameter name -> float32 array
    velocities: dict
    epoch: int
    config: RunConfig
    num_classes: int
    image_size: int
    class_names: list


def save_checkpoint(
    path,
    model: ReapsModel,
    config: RunConfig,
    epoch: int,
    optimizer: OptimizerState | None = None,
    class_names: list | None = None,
) -> None:
    entries = {name: p.data for name, p in model.named_parameters().items()}
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            entries[VELOCITY_PREFIX + name] = v
    meta = [
        f"checkpoint.epoch = {epoch}",
        f"checkpoint.num_classes = {model.num_classes}",
        f"checkpoint.image_size = {model.image_size}",
        f"checkpoint.class_names = {','.join(class_names or [])}",
    ]
    snapshot = (config.to_text() + "\n".join(meta) + "\n").encode("utf-8")
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", len(snapshot)) + snapshot
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def _take(buf: bytes, pos: int, fmt: str, path) -> tuple[tuple, int]:
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise CheckpointError(f"{path}: truncated checkpoint")
    return struct.unpack_from(fmt, buf, pos), pos + size


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a REAPS checkpoint (bad magic {buf[:8]!r})")
    pos = len(MAGIC)
    (version, count), pos = _take(buf, pos, "<II", path)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays, velocities = {}, {}
    for _ in range(count):
        (n,), pos = _take(buf, pos, "<I", path)
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,), pos = _take(buf, pos, "<I", path)
        dims, pos = _take(buf, pos, f"<{ndim}I", path)
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
        if name.startswith(VELOCITY_PREFIX):
            velocities[name[len(VELOCITY_PREFIX) :]] = arr
        else:
            arrays[name] = arr
    (n,), pos = _take(buf, pos, "<I", path)
    text = buf[pos : pos + n].decode("utf-8")
    cfg_lines, meta = [], {}
    for line in text.splitlines():
        if line.startswith("checkpoint."):
            key, _, value = line.partition("=")
            meta[key.strip()[len("checkpoint.") :]] = value.strip()
        else:
            cfg_lines.append(line)
    config = RunConfig.from_text("\n".join(cfg_lines))
    return Checkpoint(
        format_version=version,
        arrays=arrays,
        velocities=velocities,
        epoch=int(meta.get("epoch", 0)),
        config=config,
        num_classes=int(meta["num_classes"]),
        image_size=int(meta["image_size"]),
        class_names=[c for c in meta.get("class_names", "").split(",") if c],
    )


def load_model(path) -> tuple[ReapsModel, Checkpoint]:
    ck = read_checkpoint(path)
    model = build_model(ck.config.model, ck.num_classes, ck.image_size, seed=ck.config.train.seed)
    model.load_arrays(ck.arrays)
    return model, ck
