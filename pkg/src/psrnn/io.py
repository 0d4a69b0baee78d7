"""Binary model files.

Layout (all integers little-endian)::

    b"PSRN"  u32 version  u32 n_arrays
    n_arrays x [u16 name_len, name (UTF-8), u8 rank, rank x u64 dims, f64 payload (row-major)]
    u64 json_len, JSON metadata (UTF-8, sorted keys)

The JSON block records everything that is not an array: model kind, cell
types, encoder kind and RFF bandwidth, plus the model's own metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError, ModelFormatError
from .features import RffMap
from .model import Encoder, FactorizedCell, PsrnnCell, PsrnnModel

__all__ = ["MAGIC", "VERSION", "write_arrays", "read_arrays", "model_to_bytes", "model_from_bytes",
           "save_model", "load_model"]

MAGIC = b"PSRN"
VERSION = 1


def write_arrays(arrays: dict, meta: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<Q", len(blob)) + blob)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated or corrupted file: {what} needs {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_arrays(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError("array name is not UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * size, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    (json_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(json_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"metadata block is not valid JSON: {exc}") from exc
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return arrays, meta


def model_to_bytes(model: PsrnnModel) -> bytes:
    arrays = dict(model.parameters())
    enc = model.encoder
    meta = {
        "kind": model.kind,
        "encoder": enc.kind,
        "cells": ["factorized" if isinstance(c, FactorizedCell) else "full" for c in model.layers],
        "dims": {
            "input": int(enc.weight.shape[1]),
            "observation": int(enc.out_dim),
            "states": [int(c.state_dim) for c in model.layers],
            "output": int(model.decoder_bias.shape[0]),
        },
        "metadata": model.metadata,
    }
    if enc.rff is not None:
        arrays["encoder.rff.frequencies"] = enc.rff.frequencies
        arrays["encoder.rff.phases"] = enc.rff.phases
        meta["rff_bandwidth"] = enc.rff.bandwidth
    return write_arrays(arrays, meta)


def model_from_bytes(buf: bytes) -> PsrnnModel:
    arrays, meta = read_arrays(buf)
    try:
        rff = None
        if "encoder.rff.frequencies" in arrays:
            rff = RffMap(arrays["encoder.rff.frequencies"], arrays["encoder.rff.phases"], float(meta["rff_bandwidth"]))
        enc = Encoder(meta["encoder"], arrays["encoder.weight"], arrays["encoder.bias"], rff)
        layers, q1 = [], []
        for i, kind in enumerate(meta["cells"]):
            p = f"layer{i}."
            if kind == "factorized":
                layers.append(FactorizedCell(arrays[p + "A"], arrays[p + "B"], arrays[p + "C"], arrays[p + "b"]))
            else:
                layers.append(PsrnnCell(arrays[p + "W"], arrays[p + "b"]))
            q1.append(arrays[p + "q1"])
        return PsrnnModel(meta["kind"], enc, layers, q1, arrays["decoder.weight"], arrays["decoder.bias"],
                          meta.get("metadata", {}))
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks {exc}") from exc
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model file: {exc}") from exc


def save_model(model: PsrnnModel, path) -> None:
    try:
        Path(path).write_bytes(model_to_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> PsrnnModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return model_from_bytes(buf)
