"""Versioned little-endian flat binary checkpoints.

Layout::

    magic      8 bytes   b"STLTCKPT"
    version    u32
    count      u32       number of blobs
    blob * count:
        name_len  u32
        name      utf-8 bytes
        rank      u32
        dims      u64 * rank
        data      f64 * prod(dims)

Everything is float64, so metadata (the JSON-encoded config) is stored as
a 1-d blob of byte values.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STLTCKPT"
VERSION = 1


class CorruptCheckpointError(ValueError):
    pass


def write_blobs(path, blobs: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blobs)))
    for name, value in blobs.items():
        arr = np.asarray(value, dtype="<f8").copy(order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_blobs(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptCheckpointError(f"{path}: truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    blobs = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{path}: undecodable blob name") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CorruptCheckpointError(f"{path}: implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(float)
        blobs[name] = arr
    if pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return blobs


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(float)


def decode_text(blob: np.ndarray) -> str:
    return bytes(np.asarray(blob, dtype=np.uint8)).decode("utf-8")


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, opt_m=None, opt_v=None, step: int = 0,
                    seed: int = 0, extra: dict | None = None) -> None:
    blobs = {"meta.config": encode_text(json.dumps(config, sort_keys=True))}
    blobs["state.step"] = np.asarray(float(step))
    blobs["state.seed"] = np.asarray(float(seed))
    for k, v in (extra or {}).items():
        blobs[f"state.{k}"] = np.asarray(v, dtype=float)
    blobs.update({f"param.{k}": v for k, v in params.items()})
    for tag, moments in (("adam_m", opt_m), ("adam_v", opt_v)):
        if moments:
            blobs.update({f"{tag}.{k}": v for k, v in moments.items()})
    write_blobs(path, blobs)


def load_checkpoint(path) -> dict:
    """Return ``{"config", "params", "adam_m", "adam_v", "step", "seed", "state"}``."""
    blobs = read_blobs(path)
    if "meta.config" not in blobs:
        raise CorruptCheckpointError(f"{path}: missing config blob")
    try:
        config = json.loads(decode_text(blobs.pop("meta.config")))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable config") from exc
    out = {"config": config, "params": {}, "adam_m": {}, "adam_v": {}, "state": {}}
    for name, arr in blobs.items():
        group, _, key = name.partition(".")
        if group == "param":
            out["params"][key] = arr
        elif group in ("adam_m", "adam_v"):
            out[group][key] = arr
        elif group == "state":
            out["state"][key] = arr
        else:
            raise CorruptCheckpointError(f"{path}: unknown blob group {group!r}")
    out["step"] = int(out["state"].pop("step", 0))
    out["seed"] = int(out["state"].pop("seed", 0))
    return out
