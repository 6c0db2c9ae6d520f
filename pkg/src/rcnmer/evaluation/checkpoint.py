"""RCNM checkpoint files.

Layout (little-endian): magic ``RCNM``, u32 version, u32-length-prefixed UTF-8
descriptor string, u32-length-prefixed UTF-8 JSON of the training config,
u32 tensor count, then for each tensor a u16-length-prefixed name, u8 rank,
u32 dims and float32 values.  Normalization stats are stored as the tensors
``norm.mean`` and ``norm.std``; batch-norm running statistics are included.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..data.io import DataError
from ..models import ArchDescriptor, DescriptorError, RcnModel

MAGIC = b"RCNM"
VERSION = 1


def _named_arrays(model: RcnModel) -> list[tuple[str, np.ndarray]]:
    out = [(n, t.data) for n, t in model.named_parameters()]
    out += model.buffers()
    out += [("norm.mean", model.norm_mean), ("norm.std", model.norm_std)]
    return out


def checkpoint_bytes(model: RcnModel, train_config: dict | None = None) -> bytes:
    buf = io.BytesIO()
    desc = model.descriptor.to_string().encode("utf-8")
    cfg = json.dumps(train_config or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(desc)) + desc)
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    arrays = _named_arrays(model)
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays:
        nb = name.encode("utf-8")
        a = np.asarray(a)
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: RcnModel, path, train_config: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, train_config))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path) -> tuple[RcnModel, dict]:
    """Rebuild the model (float32) and return it with the stored training config."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not an RCNM checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        desc = ArchDescriptor.from_string(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, DescriptorError) as exc:
        raise DataError(f"{path}: bad descriptor: {exc}") from exc
    (n,) = r.unpack("<I")
    cfg = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise DataError(f"{path}: trailing bytes after checkpoint")
    model = RcnModel(desc, seed=0, dropout_ratio=float(cfg.get("dropout", 0.5)))
    expected = dict(_named_arrays(model))
    if set(expected) != set(arrays):
        raise DataError(f"{path}: tensor names do not match the descriptor")
    for name, t in model.named_parameters():
        if arrays[name].shape != t.data.shape:
            raise DataError(f"{path}: shape mismatch for {name}")
        t.data = arrays[name].copy()
    for bn in model._norms():
        base = bn.gamma.name.rsplit(".", 1)[0]
        bn.running_mean = arrays[f"{base}.running_mean"].copy()
        bn.running_var = arrays[f"{base}.running_var"].copy()
    model.norm_mean = arrays["norm.mean"].copy()
    model.norm_std = arrays["norm.std"].copy()
    return model, cfg
