"""Self-describing binary container for named float32 parameter sets.

Layout (all integers little-endian)::

    magic        4 bytes   b"YNET" or b"PNET"
    version      u16
    config_len   u32
    config       config_len bytes of UTF-8 JSON (sorted keys, compact)
    records      repeated until the trailer:
                   name_len u16, name bytes (UTF-8), rank u8,
                   rank x u32 extents, prod(extents) x float32
    crc32        u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(magic: bytes, config: dict, params: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [magic, struct.pack("<HI", version, len(cfg)), cfg]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 14:
        raise CheckpointError("truncated checkpoint: header incomplete")
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")
    version, cfg_len = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 10
    try:
        config = json.loads(body[pos:pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        params: dict[str, np.ndarray] = {}
        while pos < len(body):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CheckpointError(f"truncated record for {name!r}")
            params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return config, params


def audit_shapes(params: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names disagree with config (missing={missing}, unexpected={extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"shape audit failed for {name}: {params[name].shape} != {tuple(shape)}")


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
