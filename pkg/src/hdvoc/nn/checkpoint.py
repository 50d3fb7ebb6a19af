"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"HDVOCKPT"
    8       4     u32 format version (currently 1)
    12      4     u32 length J of the config block
    16      J     UTF-8 JSON: {"net": <EpsilonNetConfig fields>, "meta": {...}}
    ...     8     u64 optimizer step counter
    ...     8     f64 learning rate
    ...     4     u32 tensor count
            per tensor:
                  2   u16 name length, then the UTF-8 name
                  1   u8 ndim, then ndim x u32 dims
                  .   prod(dims) x f32 values (C order)
    end-32  32    SHA-256 of every preceding byte

Tensor names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct

import numpy as np

from ..errors import CheckpointVersionError, ConfigMismatchError, CorruptCheckpointError
from .epsnet import EpsilonNet, EpsilonNetConfig
from .optim import TrainState

MAGIC = b"HDVOCKPT"
VERSION = 1
_DIGEST = 32


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(state: TrainState, meta: dict | None = None) -> bytes:
    header = json.dumps({"net": state.net.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<Qd", state.step, state.lr))
    names = list(state.net.params)
    buf.write(struct.pack("<I", 3 * len(names)))
    for prefix, store in (("param", state.net.params), ("adam_m", state.m), ("adam_v", state.v)):
        for name in names:
            _pack_tensor(buf, f"{prefix}/{name}", store[name])
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write atomically: the file appears only once fully written."""
    data = checkpoint_bytes(state, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("unexpected end of checkpoint data")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> tuple[TrainState, dict]:
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    header = json.loads(r.take(header_len).decode())
    step, lr = r.unpack("<Qd")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after tensor table")
    config = EpsilonNetConfig.from_dict(header["net"])
    names = EpsilonNet.parameter_shapes(config)
    try:
        net = EpsilonNet(config, {k: tensors[f"param/{k}"] for k in names})
        state = TrainState(
            net,
            lr=lr,
            step=step,
            m={k: tensors[f"adam_m/{k}"] for k in names},
            v={k: tensors[f"adam_v/{k}"] for k in names},
        )
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"tensor table inconsistent with config: {exc}") from exc
    return state, header.get("meta", {})


def load_checkpoint(
    path: str | os.PathLike,
    expected_config: EpsilonNetConfig | None = None,
    expected_meta: dict | None = None,
) -> tuple[TrainState, dict]:
    """Read a checkpoint, returning ``(state, meta)``.

    Raises :class:`ConfigMismatchError` when the stored net config (or any
    key of ``expected_meta``) differs from what the caller expects.
    """
    with open(path, "rb") as fh:
        state, meta = parse_checkpoint(fh.read())
    if expected_config is not None and state.net.config != expected_config:
        raise ConfigMismatchError(f"{path}: stored config {state.net.config} != expected {expected_config}")
    for key, value in (expected_meta or {}).items():
        if meta.get(key) != value:
            raise ConfigMismatchError(f"{path}: meta {key}={meta.get(key)!r}, expected {value!r}")
    return state, meta
