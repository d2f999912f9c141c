"""Checkpoint container.

Layout (all integers little-endian)::

    b"CAST1"
    u32 header length, header as UTF-8 JSON
    u32 record count
    per record: u16 name length, name, u8 ndim, u32 * ndim shape, float32 data

The header always carries ``digest``, the parameter digest of the float32
payload, which is verified on load.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Optional

import numpy as np

from .backbone import StagedBackbone, param_digest
from .errors import BadMagicError, CheckpointError, DigestMismatchError, TruncatedCheckpointError
from .stream import CAStream

MAGIC = b"CAST1"
FORMAT_VERSION = 1


def _as_float32(params) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, p in params.items():
        arr = getattr(p, "data", p)
        out[name] = np.ascontiguousarray(arr, dtype="<f4")
    return out


def encode_checkpoint(params, meta: Optional[dict] = None) -> bytes:
    arrays = _as_float32(params)
    header = dict(meta or {})
    header["digest"] = param_digest(arrays)
    header.setdefault("format_version", FORMAT_VERSION)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> tuple:
    """Return ``(header, params)``; raises a :class:`CheckpointError` subclass on corruption."""
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a CAST1 checkpoint", 0)
    r = _Reader(data)
    r.pos = len(MAGIC)
    (hlen,) = r.unpack("<I", "header length")
    hstart = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", hstart) from None
    if not isinstance(header, dict) or "digest" not in header:
        raise CheckpointError("header lacks a digest", hstart)
    (count,) = r.unpack("<I", "record count")
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last record", r.pos)
    if param_digest(params) != header["digest"]:
        raise DigestMismatchError("parameter digest does not match header")
    return header, params


def write_checkpoint(path, params, meta: Optional[dict] = None) -> bytes:
    data = encode_checkpoint(params, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def read_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ----------------------------------------------------------------------------- models


def backbone_digest(backbone: StagedBackbone) -> str:
    return param_digest(_as_float32(backbone.params))


def save_model(path, backbone: StagedBackbone, stream: Optional[CAStream] = None,
               extra: Optional[dict] = None) -> bytes:
    params = OrderedDict(backbone.params)
    meta = {"kind": "backbone", "backbone": backbone.config(),
            "backbone_digest": backbone_digest(backbone)}
    if stream is not None:
        params.update(stream.params)
        meta["kind"] = "backbone+stream"
        meta["stream"] = stream.config_dict()
    meta.update(extra or {})
    return write_checkpoint(path, params, meta)


def load_model(path, dtype=np.float32) -> tuple:
    """Return ``(backbone, stream_or_None, header)`` from a checkpoint file."""
    header, params = read_checkpoint(path)
    if "backbone" not in header:
        raise CheckpointError("checkpoint has no backbone configuration")
    backbone = StagedBackbone.from_config(header["backbone"], dtype)
    stream = CAStream.from_config(header["stream"], dtype) if "stream" in header else None
    for owner in (backbone, stream):
        if owner is None:
            continue
        for name, p in owner.params.items():
            if name not in params:
                raise CheckpointError(f"missing parameter {name}")
            if params[name].shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {params[name].shape}, expected {p.shape}")
            p.data = params[name].astype(dtype)
    if "backbone_digest" in header and backbone_digest(backbone) != header["backbone_digest"]:
        raise DigestMismatchError("backbone digest does not match header")
    return backbone, stream, header
