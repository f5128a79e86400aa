"""Binary checkpoint files.

Layout (all integers little-endian):

    magic "MRFC" | u32 format version
    u32 header length | header text (model config + epoch, key = value lines)
    u32 record count
    per record: u16 name length | name utf-8 | u8 dtype code (0 = float32)
                | u8 rank | rank x u32 extents | u64 payload offset
    u64 payload length | raw little-endian float32 payload
    u32 CRC-32 of the payload

A checkpoint stores every parameter and buffer of the model and, optionally,
the optimizer velocities under an ``opt.`` prefix.  Save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, model_config_to_text, model_config_from_items, parse_kv_text

MAGIC = b"MRFC"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def _model_state(model) -> dict:
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data
    for name, b in model.named_buffers():
        state[name] = b
    return state


def save_checkpoint(model, path, epoch: int = 0, optimizer=None):
    """Write the model (and optional optimizer velocities) to ``path``."""
    entries = dict(_model_state(model))
    if optimizer is not None:
        for name, v in optimizer.named_velocities():
            entries[f"opt.{name}"] = v

    header = model_config_to_text(model.config) + f"epoch = {epoch}\n"
    header_bytes = header.encode("utf-8")

    records = []
    payload_parts = []
    offset = 0
    for name, arr in entries.items():
        # Payloads are float32 by format; 64-bit models are narrowed on save.
        raw = np.ascontiguousarray(arr, dtype=np.float32).tobytes()
        records.append((name, arr.shape, offset))
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)

    out = [MAGIC, struct.pack("<I", FORMAT_VERSION),
           struct.pack("<I", len(header_bytes)), header_bytes,
           struct.pack("<I", len(records))]
    for name, shape, off in records:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", _DTYPE_F32, len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        out.append(struct.pack("<Q", off))
    out.append(struct.pack("<Q", len(payload)))
    out.append(payload)
    out.append(struct.pack("<I", zlib.crc32(payload)))

    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, state dict, epoch)."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", take(4))
    header = bytes(take(hlen)).decode("utf-8")
    items = parse_kv_text(header)
    epoch = int(items.pop("epoch", "0"))
    config = model_config_from_items(items)

    (count,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        (off,) = struct.unpack("<Q", take(8))
        records.append((name, shape, off))
    (plen,) = struct.unpack("<Q", take(8))
    payload = bytes(take(plen))
    (crc,) = struct.unpack("<I", take(4))
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")

    state = {}
    for name, shape, off in records:
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: record {name!r} overruns payload")
        state[name] = np.frombuffer(payload, dtype="<f4", count=n,
                                    offset=off).reshape(shape).copy()
    return config, state, epoch


def _describe_mismatch(a: ModelConfig, b: ModelConfig) -> Optional[str]:
    from dataclasses import fields
    for f in fields(ModelConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            return f"{f.name}: checkpoint has {va!r}, model expects {vb!r}"
    return None


def load_model_state(model, state: dict, strict_optimizer: bool = False):
    """Copy a state dict into a model, validating names and shapes."""
    expected = _model_state(model)
    extra = [k for k in state if k not in expected and not k.startswith("opt.")]
    missing = [k for k in expected if k not in state]
    if extra or missing:
        raise CheckpointError(
            f"state does not match model: missing {missing or 'none'}, "
            f"unexpected {extra or 'none'}")
    for name, target in expected.items():
        src = state[name]
        if src.shape != target.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {src.shape}, "
                f"model {target.shape}")
        target[...] = src.astype(target.dtype, copy=False)


def restore_model(path, expected_config: Optional[ModelConfig] = None,
                  dtype=np.float32):
    """Build a model from a checkpoint, optionally insisting on a config."""
    from .network import MRFNet

    config, state, epoch = load_checkpoint(path)
    if expected_config is not None:
        diff = _describe_mismatch(config, expected_config)
        if diff is not None:
            raise CheckpointError(f"{path}: config mismatch, {diff}")
    model = MRFNet(config, dtype=dtype)
    load_model_state(model, state)
    return model, epoch
