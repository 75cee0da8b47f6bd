"""Model checkpoint container shared by the graph model and the linear baselines.

Layout (little-endian)::

    magic       8 bytes  b"SSARCKPT"
    version     u32
    header_len  u32
    header      UTF-8 JSON: {version, kind, N, Q, K, M, measure, layout: [[name, shape], ...], extra}
    params      float64 arrays in ``layout`` order, C-contiguous
    crc32       u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SSARCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamSet:
    """Ordered collection of named float64 arrays."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> tuple[str, ...]:
        return tuple(self._arrays)

    def replace(self, **arrays) -> "ParamSet":
        new = dict(self._arrays)
        new.update(arrays)
        return type(self)(new)

    def map(self, fn, *others: "ParamSet") -> "ParamSet":
        return type(self)({k: fn(v, *(o[k] for o in others)) for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        out, pos = {}, 0
        for k, v in self._arrays.items():
            out[k] = np.asarray(vec[pos : pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, parameters need {pos}")
        return type(self)(out)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._arrays.values())

    def equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(np.array_equal(self[k], other[k]) for k in self)

    def __repr__(self):
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self._arrays.items())
        return f"{type(self).__name__}({shapes})"


def dumps(params: ParamSet, kind: str, *, N: int, Q: int = 0, K: int = 0, M: int = 0,
          measure: str | None = None, extra: dict | None = None) -> bytes:
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "N": N,
        "Q": Q,
        "K": K,
        "M": M,
        "measure": measure,
        "layout": [[k, list(v.shape)] for k, v in params.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in params.items())
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not an ssar checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    arrays = {}
    for name, shape in header["layout"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, "<f8", n, pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(data) - 4:
        raise CheckpointError("checkpoint payload length does not match its layout")
    return header, arrays


def save(path: str | Path, params: ParamSet, kind: str, **header) -> None:
    Path(path).write_bytes(dumps(params, kind, **header))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
