"""Flat binary checkpoint archive.

Layout (all integers little-endian)::

    u8      format version
    u32     header length, then that many bytes of UTF-8 JSON
            {"arch": {...}, "bins": {"edges": [...], "single_group": bool}, "extra": {...}}
    u32     tensor count
    per tensor:
        u16 name length, name bytes
        u8  rank, rank x u32 dims
        prod(dims) x f64

Floats in the JSON header are written with ``repr`` precision, so edges
round-trip exactly; tensors are stored as raw IEEE doubles.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .groundtruth import GroupBins
from .model import ArchConfig, ModelParams
from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    arch: ArchConfig
    bins: GroupBins
    extra: dict = field(default_factory=dict)


def dumps(params: ModelParams, arch: ArchConfig, bins: GroupBins, extra: dict | None = None) -> bytes:
    header = {
        "arch": arch.to_dict(),
        "bins": {"edges": [float(e) for e in bins.edges], "single_group": bool(bins.single_group)},
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [struct.pack("<BI", FORMAT_VERSION, len(hb)), hb, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        shape = t.data.shape
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def loads(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version = take(1)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
        arch = ArchConfig(**header["arch"])
        bins = GroupBins(np.array(header["bins"]["edges"], dtype=np.float64), header["bins"]["single_group"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: bad header: {e}") from None
    (n,) = struct.unpack("<I", take(4))
    params = ModelParams()
    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        rank = take(1)[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data)
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after the last tensor")
    return Checkpoint(params, arch, bins, header.get("extra", {}))


def save(path, params: ModelParams, arch: ArchConfig, bins: GroupBins, extra: dict | None = None) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(dumps(params, arch, bins, extra))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return loads(buf, str(path))
