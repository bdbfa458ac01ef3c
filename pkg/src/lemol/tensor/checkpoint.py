"""``LMOL`` parameter checkpoints.

Layout (little-endian): magic ``b"LMOL"``, u16 version, u32 tensor count, then
per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, f64 payload,
and finally a u32 CRC32 of every preceding byte.
Adam state is stored alongside each parameter as ``<name>.adam_m``,
``<name>.adam_v`` and a rank-0 ``<name>.adam_t``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .params import ParamStore

MAGIC = b"LMOL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _flatten(stores: Mapping[str, ParamStore], with_adam: bool) -> list[tuple[str, np.ndarray]]:
    out = []
    for store_name, store in stores.items():
        for name, t in store.items():
            full = f"{store_name}/{name}" if store_name else name
            out.append((full, t.data))
            if with_adam:
                st = store.adam_state(name)
                out.append((f"{full}.adam_m", st.m))
                out.append((f"{full}.adam_v", st.v))
                out.append((f"{full}.adam_t", np.array(float(st.t))))
    return out


def write_tensors(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<HI", VERSION, len(tensors))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 14:
        raise CheckpointError(f"{path}: truncated header")
    data, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} unexpected trailing bytes")
    if zlib.crc32(data) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    return out


def save_checkpoint(path, stores: Mapping[str, ParamStore], with_adam: bool = True) -> None:
    write_tensors(path, _flatten(stores, with_adam))


def load_checkpoint(path, stores: Mapping[str, ParamStore]) -> None:
    """Restore values (and Adam state, when present) into existing stores."""
    tensors = read_tensors(path)
    for store_name, store in stores.items():
        for name in store:
            full = f"{store_name}/{name}" if store_name else name
            if full not in tensors:
                raise CheckpointError(f"{path}: missing tensor {full!r}")
            store.load_values({name: tensors[full]})
            if f"{full}.adam_m" in tensors:
                st = store.adam_state(name)
                st.m = tensors[f"{full}.adam_m"].copy()
                st.v = tensors[f"{full}.adam_v"].copy()
                st.t = int(tensors[f"{full}.adam_t"])
