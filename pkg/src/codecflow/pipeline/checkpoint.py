"""Single-file checkpoints.

Layout (all integers little-endian)::

    b"CFLW"  u32 version
    u32 header length, header JSON  {"stage", "config", "meta"}
    u32 manifest length, manifest JSON  [{"name", "dtype", "shape", "offset"}, ...]
    raw float32 blocks, in manifest order, offsets relative to the block start

JSON is written with sorted keys and fixed separators so that a
save -> load -> save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from codecflow.errors import ConfigurationError, FormatError

MAGIC = b"CFLW"
VERSION = 1
STAGES = ("codec_pretrain", "fec", "finetune")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in STAGES:
        raise ConfigurationError(f"unknown stage tag {ckpt.stage!r}; expected one of {STAGES}")
    manifest = []
    blocks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError(f"tensor {name} has non-finite values")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset})
        blocks.append(raw)
        offset += len(raw)
    header = _dumps({"stage": ckpt.stage, "config": ckpt.config, "meta": ckpt.meta})
    man = _dumps(manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(header)))
        fh.write(header)
        fh.write(_U32.pack(len(man)))
        fh.write(man)
        for raw in blocks:
            fh.write(raw)
    tmp.replace(path)


def _read_u32(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    if pos + 4 > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}")
    return _U32.unpack_from(buf, pos)[0], pos + 4


def _read_json(buf: bytes, pos: int, what: str):
    n, pos = _read_u32(buf, pos, f"{what} length")
    if pos + n > len(buf):
        raise FormatError(f"truncated checkpoint {what}")
    try:
        return json.loads(buf[pos : pos + n].decode("utf-8")), pos + n
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint {what}: {exc}") from None


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, pos = _read_u32(buf, 4, "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header, pos = _read_json(buf, pos, "header")
    manifest, pos = _read_json(buf, pos, "manifest")
    if not isinstance(header, dict) or header.get("stage") not in STAGES:
        raise FormatError(f"{path}: header lacks a valid stage tag")
    data = memoryview(buf)[pos:]
    tensors = {}
    spans = []
    for entry in manifest:
        try:
            name, dtype, shape, offset = entry["name"], entry["dtype"], entry["shape"], entry["offset"]
        except (KeyError, TypeError):
            raise FormatError(f"{path}: malformed manifest entry {entry!r}") from None
        if dtype != "float32":
            raise FormatError(f"{path}: tensor {name} has unsupported dtype {dtype}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(data):
            raise FormatError(f"{path}: tensor {name} runs past the end of the file")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"{path}: tensors {a} and {b} overlap")
    return Checkpoint(
        stage=header["stage"],
        config=header.get("config", {}),
        tensors=tensors,
        meta=header.get("meta", {}),
        version=version,
    )
