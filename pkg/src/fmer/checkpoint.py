"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        5 bytes   b"FMER1"
    version      u32
    config_len   u32, then config text (utf-8, key = value lines)
    n_sections   u32
    section table, one entry per section:
        name_len u16, name (utf-8)
        dtype    u8    0 = float32, 1 = int64, 2 = raw bytes
        ndim     u8, then ndim x u64 shape
        offset   u64   from the start of the data block
        nbytes   u64
    data block   concatenated section payloads

Float state is stored as float32; callers that need an exact resume
quantize their live state to float32 at the same moment they save.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMER1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round-trip a float array through float32."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def _encode(value) -> tuple[int, np.ndarray]:
    if isinstance(value, (bytes, bytearray)):
        return 2, np.frombuffer(bytes(value), dtype=np.uint8)
    arr = np.asarray(value)
    if arr.dtype.kind in "iub":
        return 1, arr.astype("<i8")
    if arr.dtype.kind == "f":
        return 0, arr.astype("<f4")
    raise CheckpointError(f"cannot store array of dtype {arr.dtype}")


def save(path, config_text: str, sections: dict[str, object]) -> None:
    table = io.BytesIO()
    blob = io.BytesIO()
    for name, value in sections.items():
        code, arr = _encode(value)
        payload = np.ascontiguousarray(arr).tobytes()
        name_b = name.encode("utf-8")
        table.write(struct.pack("<H", len(name_b)))
        table.write(name_b)
        table.write(struct.pack("<BB", code, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        table.write(struct.pack("<QQ", blob.tell(), len(payload)))
        blob.write(payload)
    cfg = config_text.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(sections)))
        fh.write(table.getvalue())
        fh.write(blob.getvalue())
    tmp.replace(path)


def load(path) -> tuple[str, dict[str, object]]:
    """Returns (config_text, sections); floats come back as float64."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not an FMER checkpoint)")
    try:
        version, cfg_len = struct.unpack_from("<II", raw, 5)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 13
        config_text = raw[pos:pos + cfg_len].decode("utf-8")
        pos += cfg_len
        (n_sections,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        entries = []
        for _ in range(n_sections):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", raw, pos)
            pos += 16
            entries.append((name, code, shape, offset, nbytes))
        data_start = pos
        sections: dict[str, object] = {}
        for name, code, shape, offset, nbytes in entries:
            start = data_start + offset
            chunk = raw[start:start + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            if code == 2:
                sections[name] = bytes(chunk)
                continue
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} in {name!r}")
            arr = np.frombuffer(chunk, dtype=_DTYPES[code]).reshape(shape)
            sections[name] = arr.astype(np.float64) if code == 0 else arr.astype(np.int64)
        return config_text, sections
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
