"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IRAB" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    | u32 n_tensors | n_tensors x (u32 name_len | name | u32 ndim | ndim x u32 dim | f64 data)

Tensor names are prefixed ``param/``, ``teacher/``, ``adam_m/`` or ``adam_v/``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import CheckpointError
from .nn import ModelBundle, ModelConfig, OptimizerState

MAGIC = b"IRAB"
VERSION = 1


def _tensors(m: ModelBundle, opt: OptimizerState | None):
    for name, p in m.params.items():
        yield "param/" + name, p.data
    if m.teacher is not None:
        for name, p in m.teacher.items():
            yield "teacher/" + name, p.data
    if opt is not None:
        for name in m.params:
            if name in opt.m:
                yield "adam_m/" + name, opt.m[name]
                yield "adam_v/" + name, opt.v[name]


def dumps(m: ModelBundle, opt: OptimizerState | None = None, extra: dict | None = None) -> bytes:
    meta = {"model": m.config.to_dict(), "optimizer": None if opt is None else opt.hyper(),
            "param_order": list(m.params), "extra": extra or {}}
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    items = list(_tensors(m, opt))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(m: ModelBundle, opt: OptimizerState | None, path, extra: dict | None = None) -> Path:
    path = Path(path)
    data = dumps(m, opt, extra)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(data: bytes, source: str = "<bytes>"):
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt metadata: {e}") from e
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")

    cfg = ModelConfig.from_dict(meta["model"])
    order = meta["param_order"]
    try:
        params = {n: Tensor(tensors["param/" + n], requires_grad=True) for n in order}
    except KeyError as e:
        raise CheckpointError(f"{source}: missing tensor {e}") from None
    teacher = None
    if any(k.startswith("teacher/") for k in tensors):
        teacher = {n: Tensor(tensors["teacher/" + n]) for n in order}
    m = ModelBundle(cfg, params, teacher)
    opt = None
    if meta["optimizer"] is not None:
        opt = OptimizerState(**meta["optimizer"])
        for n in order:
            if "adam_m/" + n in tensors:
                opt.m[n] = tensors["adam_m/" + n]
                opt.v[n] = tensors["adam_v/" + n]
    return m, opt, meta.get("extra", {})


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, optimizer_state_or_None)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    m, opt, _ = loads(data, str(path))
    return m, opt
