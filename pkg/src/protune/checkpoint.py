"""Binary container for model checkpoints and cached datasets.

Layout (all integers little-endian):

    magic "PTNC" | u32 version | u32 meta_len | meta json (utf-8)
    u32 n_records
    per record:
        u16 name_len | name utf-8
        u8 dtype code (0 f32, 1 f64, 2 i64)
        u8 flags (bit0 frozen, bit1 buffer, bit2 decay)
        u8 ndim | u32 dims...
        u64 payload bytes | raw data

Writing the same tensors twice produces identical bytes; a save/load round
trip is bit-exact.  A trailing-length check catches truncated files.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .autograd import Tensor
from .backbones import BackboneSpec, StagedModel, build_backbone

MAGIC = b"PTNC"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

FLAG_FROZEN = 1
FLAG_BUFFER = 2
FLAG_DECAY = 4


class CheckpointError(ValueError):
    pass


def _write_record(buf, name: str, arr: np.ndarray, flags: int):
    nbytes = name.encode()
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    buf.write(struct.pack("<H", len(nbytes)))
    buf.write(nbytes)
    buf.write(struct.pack("<BBB", code, flags, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    payload = np.ascontiguousarray(arr).tobytes()
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated container: short read in {what}")
    return data


def _read_record(buf):
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2, "record header"))
    name = _read_exact(buf, name_len, "record name").decode()
    code, flags, ndim = struct.unpack("<BBB", _read_exact(buf, 3, f"header of {name!r}"))
    shape = tuple(
        struct.unpack("<I", _read_exact(buf, 4, f"shape of {name!r}"))[0]
        for _ in range(ndim)
    )
    (nbytes,) = struct.unpack("<Q", _read_exact(buf, 8, f"length of {name!r}"))
    payload = _read_exact(buf, nbytes, f"payload of {name!r}")
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise CheckpointError(f"unknown dtype code {code} for {name!r}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, arr, flags


def _serialize(records, meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta_blob)))
    buf.write(meta_blob)
    buf.write(struct.pack("<I", len(records)))
    for name, arr, flags in records:
        _write_record(buf, name, arr, flags)
    return buf.getvalue()


def _parse(blob: bytes):
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a protune container")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version field"))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (meta_len,) = struct.unpack("<I", _read_exact(buf, 4, "meta length"))
    meta = json.loads(_read_exact(buf, meta_len, "meta block").decode())
    (n_records,) = struct.unpack("<I", _read_exact(buf, 4, "record count"))
    records = [_read_record(buf) for _ in range(n_records)]
    if buf.read(1):
        raise CheckpointError("trailing bytes after last record")
    return meta, records


# ---------------------------------------------------------------------------
# model checkpoints


def save_checkpoint(model: StagedModel, path: str, extra_meta: dict | None = None):
    meta = {
        "kind": "checkpoint",
        "spec": model.spec.to_dict(),
        "spec_digest": model.spec.digest(),
    }
    if extra_meta:
        meta.update(extra_meta)
    records = []
    for name, tensor, info in model.named_entries():
        flags = 0
        if not tensor.requires_grad:
            flags |= FLAG_FROZEN
        if info.buffer:
            flags |= FLAG_BUFFER
        if info.decay:
            flags |= FLAG_DECAY
        records.append((name, tensor.data, flags))
    with open(path, "wb") as fh:
        fh.write(_serialize(records, meta))


def load_checkpoint(path: str, spec: BackboneSpec, dtype=np.float32) -> StagedModel:
    """Rebuild a model from `spec` and fill it with checkpoint data.

    Validates names and shapes record by record; the error names the first
    mismatched tensor.  Frozen flags from the file are applied to the
    rebuilt tensors.
    """
    with open(path, "rb") as fh:
        meta, records = _parse(fh.read())
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"container at {path} is not a model checkpoint")
    model = build_backbone(spec, seed=0, dtype=dtype)
    expected = {name: (t, info) for name, t, info in model.named_entries()}
    seen = set()
    for name, arr, flags in records:
        if name not in expected:
            raise CheckpointError(f"checkpoint tensor {name!r} not in model spec")
        tensor, _info = expected[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, spec {tensor.shape}"
            )
        tensor.data = arr.astype(dtype) if arr.dtype != dtype else arr
        tensor.requires_grad = not (flags & FLAG_FROZEN) and not (flags & FLAG_BUFFER)
        seen.add(name)
    for name in expected:
        if name not in seen:
            raise CheckpointError(f"model tensor {name!r} missing from checkpoint")
    return model


def read_meta(path: str) -> dict:
    with open(path, "rb") as fh:
        meta, _ = _parse(fh.read())
    return meta


# ---------------------------------------------------------------------------
# generic named-array containers (dataset caches)


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    records = [(name, arr, 0) for name, arr in arrays.items()]
    with open(path, "wb") as fh:
        fh.write(_serialize(records, {"kind": "arrays", **(meta or {})}))


def load_arrays(path: str):
    with open(path, "rb") as fh:
        meta, records = _parse(fh.read())
    return {name: arr for name, arr, _ in records}, meta
