"""Binary file formats: P5 graymaps and RCNF flow maps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Malformed, missing or inconsistent input data."""


RCNF_MAGIC = b"RCNF"
RCNF_VERSION = 1
_RCNF_HEADER = struct.Struct("<4sIIII")


def write_pgm(path, img: np.ndarray) -> None:
    """Write an 8-bit P5 graymap.  Float input in [0, 1] is scaled and rounded."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise DataError(f"graymap must be 2-D, got {a.shape}")
    if a.dtype != np.uint8:
        if not np.all(np.isfinite(a)):
            raise DataError("graymap contains non-finite values")
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise DataError("truncated graymap header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read graymap {path}: {exc}") from exc
    tokens, offset = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed graymap header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DataError(f"{path}: unsupported dimensions {w}x{h} or maxval {maxval}")
    raster = buf[offset:offset + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy(), maxval


def read_frame(path) -> np.ndarray:
    """Grayscale frame as float64 intensities ``value / maxval`` in [0, 1]."""
    raw, maxval = read_pgm_raw(path)
    if raw.max(initial=0) > maxval:
        raise DataError(f"{path}: pixel value exceeds maxval {maxval}")
    return raw.astype(np.float64) / maxval


def write_flow_map(path, data: np.ndarray) -> None:
    """Write a [3, H, W] map as RCNF (channel-interleaved float32, little-endian)."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim != 3 or a.shape[0] != 3:
        raise DataError(f"flow map must be [3, H, W], got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError("flow map contains non-finite values")
    _, h, w = a.shape
    body = np.ascontiguousarray(a.transpose(1, 2, 0)).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_RCNF_HEADER.pack(RCNF_MAGIC, RCNF_VERSION, h, w, 3))
        fh.write(body)


def read_flow_map(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read flow map {path}: {exc}") from exc
    if len(buf) < _RCNF_HEADER.size:
        raise DataError(f"{path}: corrupt flow map (header truncated)")
    magic, version, h, w, c = _RCNF_HEADER.unpack_from(buf)
    if magic != RCNF_MAGIC:
        raise DataError(f"{path}: corrupt flow map (bad magic {magic!r})")
    if version != RCNF_VERSION:
        raise DataError(f"{path}: unsupported flow map version {version}")
    if c != 3 or h < 1 or w < 1:
        raise DataError(f"{path}: corrupt flow map (dimensions {h}x{w}x{c})")
    expected = _RCNF_HEADER.size + h * w * c * 4
    if len(buf) != expected:
        raise DataError(f"{path}: corrupt flow map ({len(buf)} bytes, expected {expected})")
    a = np.frombuffer(buf, dtype="<f4", offset=_RCNF_HEADER.size).reshape(h, w, c)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{path}: flow map contains non-finite values")
    return a.transpose(2, 0, 1).astype(np.float32)
