"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic "LIGR" | u32 version | u64 config-json-length | config JSON (UTF-8)
    | u64 tensor count
    | per tensor: u32 name length, name UTF-8, u8 rank, rank x u64 dims,
                  u8 dtype tag (0=f32, 1=f64), raw row-major values
    | u32 CRC-32 of every preceding byte

Decoding is version-gated and refuses on any mismatch; there is no
best-effort path.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointError,
    TruncatedCheckpointError,
    VersionError,
)
from .model import Model, ModelSpec
from .rng import Rng
from .tensor import Tensor

MAGIC = b"LIGR"
FORMAT_VERSION = 1
_DTYPE_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


@dataclass
class Checkpoint:
    """Named-tensor container plus the config blob that reproduces the model."""

    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.tensors.values())


def checkpoint_from_model(model: Model, train_config: dict | None = None, extra: dict | None = None) -> Checkpoint:
    config = {"model_spec": model.spec.to_dict(), "train": train_config, "extra": extra or {}}
    tensors = {name: t.data.copy() for name, t in model.params.items()}
    return Checkpoint(config=config, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    spec = ModelSpec.from_dict(ckpt.config["model_spec"])
    model = Model.init(spec, Rng(0))
    if set(model.params) != set(ckpt.tensors):
        missing = set(model.params) ^ set(ckpt.tensors)
        raise CheckpointError(f"tensor table does not match the model spec: {sorted(missing)[:5]}")
    for name, arr in ckpt.tensors.items():
        if model.params[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape}")
        model.params[name] = Tensor(arr.copy(), requires_grad=True)
    return model


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    parts.append(struct.pack("<Q", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        if arr.dtype not in _DTYPE_TAG:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<B", _DTYPE_TAG[arr.dtype]))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(self.buf)}, needed {self.off + n}"
            )
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.read(8))[0]


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedCheckpointError(f"file too short ({len(raw)} bytes)")
    r = _Reader(raw)
    if r.read(4) != MAGIC:
        raise VersionError("bad magic; not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unknown format version {version} (expected {FORMAT_VERSION})")
    blob = r.read(r.u64())
    count = r.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.read(r.u32()).decode("utf-8")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}Q", r.read(8 * rank)) if rank else ()
        tag = r.u8()
        if tag not in _TAG_DTYPE:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name}")
        dtype = _TAG_DTYPE[tag]
        n_elem = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(r.read(n_elem * dtype.itemsize), dtype=dtype.newbyteorder("<"))
        tensors[name] = arr.astype(dtype).reshape(dims)
    stored_crc = struct.unpack("<I", r.read(4))[0]
    if r.off != len(raw):
        raise TruncatedCheckpointError(f"{len(raw) - r.off} trailing bytes after CRC")
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumError("CRC-32 mismatch; refusing to load")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config blob is not valid JSON: {e}") from e
    return Checkpoint(config=config, tensors=tensors)


def save_checkpoint(obj: Checkpoint | Model, path, train_config: dict | None = None) -> None:
    ckpt = obj if isinstance(obj, Checkpoint) else checkpoint_from_model(obj, train_config)
    data = encode_checkpoint(ckpt)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def load_model(path) -> tuple[Model, Checkpoint]:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt
