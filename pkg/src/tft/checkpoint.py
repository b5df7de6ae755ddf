"""Binary checkpoint container shared by TFT and backbone models.

Layout (all integers little-endian)::

    b"TFTC"                 magic
    u32   version           currently 1
    u32   tensor count
    per tensor:
        u32   name length, then UTF-8 name bytes
        u8    rank
        u32   dims[rank]
        f32   values (row-major, little-endian IEEE-754)
    u32   CRC32 of every preceding byte

Values are stored in 32-bit precision and loaded as 64-bit arrays.
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncationError, VersionMismatchError

MAGIC = b"TFTC"
VERSION = 1


def encode_tensors(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_tensors(buf):
    r = _Reader(buf)
    if len(buf) < 4:
        raise TruncationError("checkpoint shorter than its magic number")
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a TFTC checkpoint (bad magic)")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", r.take(4, "name length"))
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float64)
    (stored,) = struct.unpack("<I", r.take(4, "checksum"))
    if zlib.crc32(buf[: r.pos - 4]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return tensors


def save_tensors(tensors, path):
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(model, path):
    """Write any model exposing ``state_dict()``."""
    save_tensors(model.state_dict(), path)


def load_checkpoint(path):
    """Rebuild a :class:`~tft.core.Tft` or :class:`~tft.backbone.Backbone` from ``path``."""
    from .backbone import Backbone
    from .core import Tft

    state = load_tensors(path)
    if "tft.config" in state:
        return Tft.from_state_dict(state)
    if "backbone.config" in state:
        return Backbone.from_state_dict(state)
    raise FormatError("checkpoint holds neither a TFT nor a backbone")
