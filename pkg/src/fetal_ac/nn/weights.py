"""Binary weight files.

Layout (all integers little-endian)::

    b"ACNN"            magic
    u32  version       (1)
    u32  flags         bit 0: Adam state appended
    32B  digest        SHA-256 of the architecture JSON
    u32  len, bytes    architecture JSON (UTF-8, sorted keys)
    u32  n_arrays
    n_arrays x { u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[] }
    [ u64 t, then m arrays, then v arrays, same order and shapes ]
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .network import AdamState

MAGIC = b"ACNN"
VERSION = 1
FLAG_ADAM = 1


def arch_digest(arch: dict) -> bytes:
    return hashlib.sha256(_arch_bytes(arch)).digest()


def _arch_bytes(arch: dict) -> bytes:
    return json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_weights(path, arch: dict, arrays: dict[str, np.ndarray], adam: AdamState | None = None) -> None:
    ab = _arch_bytes(arch)
    flags = FLAG_ADAM if adam is not None and adam.t > 0 else 0
    parts = [MAGIC, struct.pack("<II", VERSION, flags), hashlib.sha256(ab).digest()]
    parts += [struct.pack("<I", len(ab)), ab, struct.pack("<I", len(arrays))]
    parts += [_pack_array(k, v) for k, v in arrays.items()]
    if flags & FLAG_ADAM:
        parts.append(struct.pack("<Q", adam.t))
        for moments in (adam.m, adam.v):
            for k, v in arrays.items():
                parts.append(_pack_array(k, moments.get(k, np.zeros_like(v))))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("weight file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)
        return name, data.reshape(shape)


def load_weights(path) -> tuple[dict, "OrderedDict[str, np.ndarray]", AdamState | None]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an ACNN weight file")
    version, flags = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    digest = r.take(32)
    (alen,) = r.unpack("<I")
    ab = r.take(alen)
    if hashlib.sha256(ab).digest() != digest:
        raise FormatError(f"{path}: architecture digest mismatch")
    arch = json.loads(ab)
    (n,) = r.unpack("<I")
    arrays = OrderedDict(r.array() for _ in range(n))
    adam = None
    if flags & FLAG_ADAM:
        (t,) = r.unpack("<Q")
        m = OrderedDict(r.array() for _ in range(n))
        v = OrderedDict(r.array() for _ in range(n))
        adam = AdamState(m=dict(m), v=dict(v), t=t)
    return arch, arrays, adam
