"""Self-contained model checkpoints in the NOBL-CKPT v1 binary format.

Layout (little-endian)::

    "NOBL" | u16 version | u16 kind=2
    config:    u32 n_layers, hidden, modes, in_channels, projection
               | str activation | f64 out_scale, out_shift
    embedding: u32 k_current, k_feature | u8 include_raw_current
               | f64 time_scale_ms | u16 count, count x str feature
    bounds:    u16 count, count x (str name | f64 lo | f64 hi)
    metadata:  u32 length | UTF-8 JSON
    params:    u32 count, count x (str name | u8 complex | u8 ndim
               | ndim x u32 shape | f32 data)
    u32 CRC32 of everything before it

``str`` is a u16 byte length followed by UTF-8 bytes.  Complex blocks store
real and imaginary parts interleaved along a trailing axis of length 2.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingConfig, LatentBounds
from .errors import FormatError, TruncatedFileError
from .fno import FnoConfig, FnoParameters, is_spectral
from .signal import MAGIC

CKPT_VERSION = 1
KIND_CHECKPOINT = 2


@dataclass
class Checkpoint:
    params: FnoParameters
    embedding: EmbeddingConfig
    bounds: LatentBounds
    metadata: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    @property
    def config(self) -> FnoConfig:
        return self.params.config

    def digest(self) -> str:
        """SHA-256 over the parameter bytes (float32)."""
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(_as_f32_block(arr)).tobytes())
        return h.hexdigest()[:16]


def _as_f32_block(arr: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(arr):
        return np.stack([arr.real, arr.imag], axis=-1).astype("<f4")
    return arr.astype("<f4")


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.parts.append(b)

    def raw(self, b: bytes):
        self.parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: checkpoint truncated at byte {len(self.data)}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: invalid string in checkpoint") from exc


def encode_checkpoint(cp: Checkpoint) -> bytes:
    cfg, emb = cp.config, cp.embedding
    w = _Writer()
    w.raw(MAGIC)
    w.pack("HH", CKPT_VERSION, KIND_CHECKPOINT)
    w.pack("5I", cfg.n_layers, cfg.hidden, cfg.modes, cfg.in_channels, cfg.projection)
    w.string(cfg.activation)
    w.pack("dd", cfg.out_scale, cfg.out_shift)
    w.pack("IIB", emb.k_current, emb.k_feature, int(emb.include_raw_current))
    w.pack("d", emb.time_scale_ms)
    w.pack("H", len(emb.features))
    for name in emb.features:
        w.string(name)
    w.pack("H", len(cp.bounds.ranges))
    for name, (lo, hi) in cp.bounds.ranges.items():
        w.string(name)
        w.pack("dd", lo, hi)
    meta = json.dumps(cp.metadata, sort_keys=True).encode("utf-8")
    w.pack("I", len(meta))
    w.raw(meta)
    w.pack("I", len(cp.params.arrays))
    for name, arr in cp.params.items():
        w.string(name)
        w.pack("BB", int(np.iscomplexobj(arr)), arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
        w.raw(np.ascontiguousarray(_as_f32_block(arr)).tobytes())
    body = w.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: checkpoint truncated in header")
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version, kind = r.unpack("HH")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if kind != KIND_CHECKPOINT:
        raise FormatError(f"{path}: file kind {kind} is not a checkpoint")
    n_layers, hidden, modes, in_ch, proj = r.unpack("5I")
    act = r.string()
    out_scale, out_shift = r.unpack("dd")
    cfg = FnoConfig(n_layers, hidden, modes, in_ch, proj, act, out_scale, out_shift)
    kc, kf, raw = r.unpack("IIB")
    (tscale,) = r.unpack("d")
    (nf,) = r.unpack("H")
    emb = EmbeddingConfig(kc, kf, bool(raw), tuple(r.string() for _ in range(nf)), tscale)
    (nb,) = r.unpack("H")
    ranges = OrderedDict()
    for _ in range(nb):
        name = r.string()
        ranges[name] = r.unpack("dd")
    (nmeta,) = r.unpack("I")
    try:
        meta = json.loads(r.take(nmeta).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    (nparams,) = r.unpack("I")
    arrays = OrderedDict()
    for _ in range(nparams):
        name = r.string()
        is_complex, ndim = r.unpack("BB")
        shape = r.unpack(f"{ndim}I")
        full = shape + ((2,) if is_complex else ())
        count = int(np.prod(full)) if full else 1
        block = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(full).astype(np.float32)
        if is_complex:
            arr = (block[..., 0] + 1j * block[..., 1]).astype(np.complex64)
        else:
            arr = block
        if bool(is_complex) != is_spectral(name):
            raise FormatError(f"{path}: parameter {name} has the wrong value type")
        arrays[name] = arr
    (crc,) = r.unpack("I")
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:r.pos - 4]) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    try:
        params = FnoParameters(cfg, arrays)
        bounds = LatentBounds(dict(ranges))
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent checkpoint: {exc}") from exc
    return Checkpoint(params, emb, bounds, meta, version)


def save_checkpoint(cp: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(cp))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)
