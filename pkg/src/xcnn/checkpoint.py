"""Flat little-endian checkpoint container.

Layout::

    magic      8 bytes   b"XCNNCKPT"
    version    u32
    name       u16 length + UTF-8 (architecture name)
    classes    u32
    meta       u32 length + UTF-8 JSON (architecture config text, run info)
    count      u32
    records    count x { name: u16 length + UTF-8,
                         dtype: u8 (1 = float32, 2 = float64, 3 = int64),
                         ndim: u8, dims: ndim x u32,
                         values: raw little-endian }

Records hold trainable parameters under their graph names, batch-norm
running statistics as ``<layer>.running_mean`` / ``<layer>.running_var``,
and free-form extras (input normalization statistics) as ``extra.<key>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import NetworkGraph, build, spec_from_config, spec_to_config

MAGIC = b"XCNNCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    graph: NetworkGraph
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _records(graph: NetworkGraph, extras: dict[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in graph.params.items()]
    for lid, st in graph.bn_states().items():
        out.append((f"{lid}.running_mean", st.mean))
        out.append((f"{lid}.running_var", st.var))
    out.extend((f"extra.{k}", np.asarray(v)) for k, v in extras.items())
    return out


def _str(s: str, width: str = "<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def save_checkpoint(path, graph: NetworkGraph, extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    meta = dict(meta or {})
    meta["config"] = spec_to_config(graph.spec)
    recs = _records(graph, extras or {})
    parts = [MAGIC, struct.pack("<I", VERSION), _str(graph.spec.name),
             struct.pack("<I", graph.spec.num_classes), _str(json.dumps(meta, sort_keys=True), "<I"),
             struct.pack("<I", len(recs))]
    for name, arr in recs:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        parts.append(_str(name))
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def read_records(path) -> tuple[str, int, dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    name = r.string()
    (classes,) = r.unpack("<I")
    meta = json.loads(r.string("<I"))
    (count,) = r.unpack("<I")
    recs = {}
    for _ in range(count):
        rname = r.string()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"record {rname}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        recs[rname] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return name, classes, meta, recs


def load_checkpoint(path) -> Checkpoint:
    name, classes, meta, recs = read_records(path)
    spec = spec_from_config(meta["config"])
    if spec.name != name or spec.num_classes != classes:
        raise CheckpointError(f"{path}: header ({name}, {classes}) disagrees with stored config")
    dtype = next((a.dtype for k, a in recs.items() if not k.startswith("extra.")), np.float32)
    graph = build(spec, 0, dtype.newbyteorder("="))
    for pname, t in graph.params.items():
        if pname not in recs:
            raise CheckpointError(f"{path}: missing parameter {pname}")
        if recs[pname].shape != t.shape:
            raise CheckpointError(f"{path}: {pname} has shape {recs[pname].shape}, expected {t.shape}")
        t.data = recs[pname].astype(graph.dtype)
    for lid, st in graph.bn_states().items():
        for key, target in (("running_mean", st.mean), ("running_var", st.var)):
            rec = recs.get(f"{lid}.{key}")
            if rec is None or rec.shape != target.shape:
                raise CheckpointError(f"{path}: missing or misshapen {lid}.{key}")
            target[...] = rec
    extras = {k[len("extra."):]: v for k, v in recs.items() if k.startswith("extra.")}
    return Checkpoint(graph, extras, meta)
