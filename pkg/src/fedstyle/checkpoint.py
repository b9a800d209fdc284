"""Bit-exact binary serialization of named parameter collections.

Layout (all integers little-endian):

    magic "MCSD" | u16 version=1 | u32 param count
    per parameter: u16 name length | UTF-8 name | u8 rank | u32 dims[rank]
                   | float32 little-endian payload

Parameters appear in canonical model order (see ``model.param_shapes``);
any subset, such as a head slice, serializes with the same container.
"""
from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, CheckpointError, CheckpointShapeError,
                     TruncatedPayloadError, VersionMismatchError)
from .model import BackboneConfig, Head, Model, param_shapes

MAGIC = b"MCSD"
VERSION = 1

_f32le = np.dtype("<f4")


class ModelCheckpoint:
    """Ordered (name, float32 array) pairs with bitwise round-trip bytes."""

    def __init__(self, entries: list[tuple[str, np.ndarray]]):
        self.entries = [(name, np.ascontiguousarray(arr, dtype=_f32le)) for name, arr in entries]

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def get(self, name: str) -> np.ndarray:
        for n, arr in self.entries:
            if n == name:
                return arr
        raise KeyError(name)

    def select(self, prefix: str) -> "ModelCheckpoint":
        return ModelCheckpoint([(n, a) for n, a in self.entries if n.startswith(prefix)])

    def nbytes(self) -> int:
        total = len(MAGIC) + 2 + 4
        for name, arr in self.entries:
            total += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
        return total

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HI", VERSION, len(self.entries))
        for name, arr in self.entries:
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded))
            out += encoded
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        view = memoryview(blob)
        if len(view) < len(MAGIC) or bytes(view[:4]) != MAGIC:
            raise BadMagicError(f"expected magic {MAGIC!r}")
        pos = 4

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise TruncatedPayloadError(
                    f"need {pos + n} bytes, buffer has {len(view)}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        version, count = struct.unpack("<HI", take(6))
        if version != VERSION:
            raise VersionMismatchError(f"version {version}, supported {VERSION}")
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            size = 1
            for s in shape:
                size *= s
            payload = np.frombuffer(take(4 * size), dtype=_f32le).reshape(shape)
            entries.append((name, payload.copy()))
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after payload")
        return cls(entries)

    # -- model adapters -------------------------------------------------
    @classmethod
    def from_model(cls, model: Model) -> "ModelCheckpoint":
        return cls([(name, p.data) for name, p in model.parameters()])

    def load_into(self, model: Model) -> Model:
        expected = param_shapes(model.config)
        got = [(n, a.shape) for n, a in self.entries]
        if got != expected:
            raise CheckpointShapeError(
                f"checkpoint entries {got} do not match model layout {expected}")
        for (name, arr) in self.entries:
            np.copyto(model.params[name].data, arr)
        return model


def save_checkpoint(model: Model) -> bytes:
    return ModelCheckpoint.from_model(model).to_bytes()


def load_checkpoint(blob: bytes, config: BackboneConfig) -> Model:
    from .model import init_model

    model = init_model(config, seed=0)
    ModelCheckpoint.from_bytes(blob).load_into(model)
    return model


def head_to_checkpoint(head: Head) -> ModelCheckpoint:
    return ModelCheckpoint([("head.weight", head.weight.data), ("head.bias", head.bias.data)])


def head_from_checkpoint(ckpt: ModelCheckpoint, config: BackboneConfig) -> Head:
    """Reconstruct a frozen head; shapes validated against the config."""
    expect = {
        "head.weight": (config.embedding_dim, config.num_classes),
        "head.bias": (config.num_classes,),
    }
    got = {n: a.shape for n, a in ckpt.entries}
    if got != expect:
        raise CheckpointShapeError(f"head entries {got} do not match {expect}")
    head = Head(T.Tensor(ckpt.get("head.weight").copy()),
                T.Tensor(ckpt.get("head.bias").copy()))
    return head.freeze()
