"""Binary checkpoint and dataset files.

Both formats share the same conventions: an 8-byte magic tag, a
little-endian header, a payload of little-endian float64 values in declared
order, and a trailing CRC32 of the payload bytes.

Checkpoint layout::

    b"EMLCKPT1"
    u32 version, u32 n_layers, u32 metadata_len, metadata (UTF-8 JSON)
    per layer: u8 kind (0 full, 1 factorized), u32 d_in, u32 d_out, u32 rank,
               u8 has_bias, u8 activation id, u8 has_lora, u32 lora_rank
    payload:   per layer: weight (full: d_in*d_out | factorized: w_u then w_v),
               bias (d_out), lora w_a (d_in*r), lora w_b (r*d_out)
    u32 crc32(payload)

Dataset layout::

    b"EMLDATA1"
    u32 version, u8 kind (0 regression, 1 classification),
    u32 rows, u32 input_dim, u32 target_dim
    payload:   x (rows*input_dim) then y (rows*target_dim)
    u32 crc32(payload)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..emulator import FactorizedWeight
from ..lora import LoraModule
from ..model import ACTIVATIONS, Layer, Network

__all__ = [
    "FormatError",
    "CRCError",
    "Dataset",
    "save_checkpoint",
    "load_checkpoint",
    "dumps_checkpoint",
    "loads_checkpoint",
    "save_dataset",
    "load_dataset",
    "dumps_dataset",
    "loads_dataset",
]

CKPT_MAGIC = b"EMLCKPT1"
DATA_MAGIC = b"EMLDATA1"
VERSION = 1
DATA_KINDS = ("regression", "classification")

_LAYER = struct.Struct("<BIIIBBBI")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed checkpoint or dataset file."""


class CRCError(FormatError):
    """Payload checksum mismatch."""


@dataclass
class Dataset:
    """Input rows ``x`` and targets ``y`` (class indices in one column for classification)."""

    x: np.ndarray
    y: np.ndarray
    kind: str = "regression"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise FormatError(f"inconsistent dataset shapes x={self.x.shape} y={self.y.shape}")
        if self.kind not in DATA_KINDS:
            raise FormatError(f"unknown dataset kind {self.kind!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def head(self, n: int) -> "Dataset":
        return Dataset(self.x[:n].copy(), self.y[:n].copy(), self.kind)


def _pack_floats(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("file is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _split_payload(reader: _Reader, n_floats: int) -> np.ndarray:
    payload = reader.take(8 * n_floats)
    (crc,) = reader.unpack("<I")
    if reader.pos != len(reader.blob):
        raise FormatError(f"{len(reader.blob) - reader.pos} trailing bytes after checksum")
    if zlib.crc32(payload) != crc:
        raise CRCError("payload CRC32 mismatch")
    return np.frombuffer(payload, dtype=_F64).astype(np.float64)


def dumps_checkpoint(net: Network, metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    head = [CKPT_MAGIC, struct.pack("<III", VERSION, len(net.layers), len(meta)), meta]
    arrays = []
    for layer in net.layers:
        d_in, d_out = layer.shape
        lora = layer.lora
        head.append(_LAYER.pack(
            1 if layer.factorized else 0, d_in, d_out,
            layer.weight.rank if layer.factorized else 0,
            layer.bias is not None, ACTIVATIONS.index(layer.activation),
            lora is not None, 0 if lora is None else lora.rank,
        ))
        arrays += [layer.weight.w_u, layer.weight.w_v] if layer.factorized else [layer.weight]
        if layer.bias is not None:
            arrays.append(layer.bias)
        if lora is not None:
            arrays += [lora.w_a, lora.w_b]
    payload = _pack_floats(arrays)
    return b"".join(head) + payload + struct.pack("<I", zlib.crc32(payload))


def loads_checkpoint(blob: bytes) -> tuple[Network, dict]:
    reader = _Reader(blob)
    if reader.take(8) != CKPT_MAGIC:
        raise FormatError("not an EMLCKPT1 checkpoint")
    version, n_layers, meta_len = reader.unpack("<III")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from exc
    descs = [_LAYER.unpack(reader.take(_LAYER.size)) for _ in range(n_layers)]
    sizes = []
    for kind, d_in, d_out, rank, has_bias, act, has_lora, lrank in descs:
        if kind not in (0, 1) or act >= len(ACTIVATIONS):
            raise FormatError("bad layer descriptor")
        parts = [(d_in, rank), (rank, d_out)] if kind == 1 else [(d_in, d_out)]
        if has_bias:
            parts.append((d_out,))
        if has_lora:
            parts += [(d_in, lrank), (lrank, d_out)]
        sizes.append(parts)
    total = sum(int(np.prod(s)) for parts in sizes for s in parts)
    flat = _split_payload(reader, total)

    pos = 0
    layers = []
    for (kind, _, _, _, has_bias, act, has_lora, _), parts in zip(descs, sizes):
        arrays = []
        for shape in parts:
            n = int(np.prod(shape))
            arrays.append(flat[pos : pos + n].reshape(shape).copy())
            pos += n
        weight = FactorizedWeight(arrays.pop(0), arrays.pop(0)) if kind == 1 else arrays.pop(0)
        bias = arrays.pop(0) if has_bias else None
        lora = LoraModule(arrays[0], arrays[1]) if has_lora else None
        layers.append(Layer(weight, bias, lora, ACTIVATIONS[act]))
    return Network(layers), metadata


def save_checkpoint(path, net: Network, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(net, metadata))


def load_checkpoint(path) -> tuple[Network, dict]:
    return loads_checkpoint(Path(path).read_bytes())


def dumps_dataset(data: Dataset) -> bytes:
    rows, d_in = data.x.shape
    header = DATA_MAGIC + struct.pack("<IBIII", VERSION, DATA_KINDS.index(data.kind), rows, d_in, data.y.shape[1])
    payload = _pack_floats([data.x, data.y])
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def loads_dataset(blob: bytes) -> Dataset:
    reader = _Reader(blob)
    if reader.take(8) != DATA_MAGIC:
        raise FormatError("not an EMLDATA1 dataset")
    version, kind, rows, d_in, d_out = reader.unpack("<IBIII")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if kind >= len(DATA_KINDS):
        raise FormatError(f"bad dataset kind {kind}")
    flat = _split_payload(reader, rows * (d_in + d_out))
    x = flat[: rows * d_in].reshape(rows, d_in)
    y = flat[rows * d_in :].reshape(rows, d_out)
    return Dataset(x, y, DATA_KINDS[kind])


def save_dataset(path, data: Dataset) -> None:
    Path(path).write_bytes(dumps_dataset(data))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
