"""Binary tensor container and line-oriented text manifests.

Container layout (little-endian)::

    b"MDTK" | version u16 | entry count u32
    per entry: name length u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 * ndim | payload
    sha256 of everything above (32 bytes)

dtype codes: 1 = float32, 2 = float64, 3 = uint8.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MDTK"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised when a container or manifest cannot be decoded."""


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32 or arr.dtype == np.float64 or arr.dtype == np.uint8:
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        elif arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"too many dims for entry {name!r}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 + 6 + 32 or data[:4] != MAGIC:
        raise FormatError("bad magic: not a tensor container")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise FormatError("checksum mismatch: container is corrupt")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            if code not in _CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code} in entry {name!r}")
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"payload of {name!r} runs past end of container")
            if name in out:
                raise FormatError(f"duplicate entry name {name!r}")
            out[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated container: {exc}") from None
    if pos != len(body):
        raise FormatError("trailing bytes after last entry")
    return out


def save_tensors(path, arrays: Mapping[str, np.ndarray]) -> str:
    """Write ``arrays`` atomically and return the SHA-256 hex digest of the file."""
    data = encode_tensors(arrays)
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- manifests


def format_value(value) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    text = str(value)
    if "\n" in text:
        raise ValueError("manifest values must be single-line")
    return text


def format_manifest(entries: Mapping[str, object]) -> str:
    lines = []
    for key, value in entries.items():
        if ":" in key or "\n" in key:
            raise ValueError(f"invalid manifest key {key!r}")
        lines.append(f"{key}: {format_value(value)}")
    return "\n".join(lines) + "\n"


def write_manifest(path, entries: Mapping[str, object]) -> None:
    _atomic_write(Path(path), format_manifest(entries).encode("utf-8"))


def parse_manifest(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"line {lineno}: expected 'key: value'")
        key = key.strip()
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_manifest(path) -> dict[str, str]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def write_text(path, text: str) -> None:
    """Atomically write UTF-8 text."""
    _atomic_write(Path(path), text.encode("utf-8"))
