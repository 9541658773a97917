"""Binary named-tensor table: the shared payload of checkpoint/basis files.

Layout (all integers little-endian): count u32, then per tensor
name_len u32, name utf-8, rank u32, dims u64 * rank, float64 payload.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import TruncatedFileError


def pack_tensor_table(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.off = offset

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"expected {n} more bytes at offset {self.off}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def unpack_tensor_table(buf: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    r = _Reader(buf, offset)
    count = r.u32()
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        numel = 1
        for d in dims:
            numel *= d
        payload = r.take(8 * numel)
        table[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return table, r.off


def digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def pack_model_config(cfg) -> bytes:
    fields = (cfg.image_size, cfg.in_channels, cfg.base_width, *cfg.channel_mult,
              cfg.num_concepts, cfg.num_styles, cfg.time_dim, cfg.token_dim,
              cfg.norm_groups)
    return struct.pack(f"<{len(fields)}I", *fields)


def unpack_model_config(buf: bytes, offset: int):
    from .model import ModelConfig  # deferred to keep this module dependency-light
    r = _Reader(buf, offset)
    vals = struct.unpack("<11I", r.take(44))
    cfg = ModelConfig(image_size=vals[0], in_channels=vals[1], base_width=vals[2],
                      channel_mult=(vals[3], vals[4], vals[5]), num_concepts=vals[6],
                      num_styles=vals[7], time_dim=vals[8], token_dim=vals[9],
                      norm_groups=vals[10])
    return cfg, r.off


def model_fingerprint(model) -> bytes:
    """32-byte digest of a model's config and serialized parameters."""
    table = pack_tensor_table({k: t.data for k, t in model.params.items()})
    return digest(pack_model_config(model.config) + table)
