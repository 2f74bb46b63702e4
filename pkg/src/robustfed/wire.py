"""Binary protocol for federation rounds.

Every message travels in a self-delimiting frame:

    u32  body length (little endian, body only)
    ...  body
    u32  CRC-32 of the body (little endian)

and every body starts with the same header:

    4s   magic  b"FGVI"
    u16  version (currently 1)
    u8   message type

followed by a type-specific payload.  All integers are little endian,
all floats IEEE-754 binary64 little endian, matrices row-major.

    type 1  broadcast   u32 round | u32 dim | u8 flags |
                        f64[dim*dim or dim] precision | f64[dim] shift |
                        f64 log_offset
    type 2  update      u32 client_id | u32 round | u32 dim | u8 flags |
                        f64[dim*dim or dim] delta_precision |
                        f64[dim] delta_shift
    type 3  ack         (empty payload)
    type 4  abort       u32 byte length | UTF-8 reason

``flags`` bit 0 marks diagonal (mean-field) storage, in which case the
precision array carries dim entries instead of dim*dim.  dim is capped at
2^20.  Encoding is canonical: a message has exactly one wire form, and
decode(encode(m)) == m bit-for-bit.  The CRC trailer makes every single
byte flip a detectable decode error rather than a silently altered message.

Worked example -- an Ack frame is 15 bytes:

    07 00 00 00   frame length (7)
    46 47 56 49   "FGVI"
    01 00         version 1
    03            type ack
    b8 b3 6e 61   crc32 of the 7 body bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import RobustFedError
from .gaussians import NatGaussian

__all__ = [
    "MAGIC",
    "VERSION",
    "Broadcast",
    "Update",
    "Ack",
    "Abort",
    "encode",
    "decode",
    "frame",
    "read_frame",
    "decode_stream",
    "DecodeError",
    "TruncatedFrame",
    "BadMagic",
    "VersionMismatch",
    "UnknownMessageType",
    "LengthMismatch",
    "ChecksumMismatch",
]

MAGIC = b"FGVI"
VERSION = 1
MAX_DIM = 1 << 20

_T_BROADCAST, _T_UPDATE, _T_ACK, _T_ABORT = 1, 2, 3, 4
_FLAG_DIAGONAL = 0x01


class DecodeError(RobustFedError, ValueError):
    """Base class for every wire decoding failure."""


class TruncatedFrame(DecodeError):
    pass


class BadMagic(DecodeError):
    pass


class VersionMismatch(DecodeError):
    pass


class UnknownMessageType(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class ChecksumMismatch(DecodeError):
    pass


def _np_eq(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class Broadcast:
    """Server posterior pushed to the clients at the start of a round."""

    round_no: int
    precision: np.ndarray
    shift: np.ndarray
    log_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "precision", np.asarray(self.precision, dtype=np.float64))
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64))

    @classmethod
    def from_factor(cls, round_no: int, q: NatGaussian) -> "Broadcast":
        return cls(round_no, q.precision, q.shift, q.log_offset)

    def factor(self) -> NatGaussian:
        return NatGaussian(self.precision, self.shift, self.log_offset)

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Broadcast)
            and self.round_no == other.round_no
            and self.log_offset == other.log_offset
            and _np_eq(self.precision, other.precision)
            and _np_eq(self.shift, other.shift)
        )


@dataclass(frozen=True)
class Update:
    """A client's damped site delta for one round."""

    client_id: int
    round_no: int
    delta_precision: np.ndarray
    delta_shift: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "delta_precision", np.asarray(self.delta_precision, dtype=np.float64)
        )
        object.__setattr__(self, "delta_shift", np.asarray(self.delta_shift, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.delta_shift.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Update)
            and self.client_id == other.client_id
            and self.round_no == other.round_no
            and _np_eq(self.delta_precision, other.delta_precision)
            and _np_eq(self.delta_shift, other.delta_shift)
        )


@dataclass(frozen=True)
class Ack:
    def __eq__(self, other):
        return isinstance(other, Ack)


@dataclass(frozen=True)
class Abort:
    reason: str

    def __eq__(self, other):
        return isinstance(other, Abort) and self.reason == other.reason


Message = Broadcast | Update | Ack | Abort


def _pack_arrays(precision: np.ndarray, shift: np.ndarray) -> tuple[int, int, bytes]:
    dim = shift.shape[0]
    if dim > MAX_DIM:
        raise ValueError(f"dim {dim} exceeds the wire limit {MAX_DIM}")
    diagonal = precision.ndim == 1
    expect = dim if diagonal else dim * dim
    if precision.size != expect:
        raise ValueError("precision array size inconsistent with dim/flags")
    flags = _FLAG_DIAGONAL if diagonal else 0
    payload = (
        np.ascontiguousarray(precision, dtype="<f8").tobytes()
        + np.ascontiguousarray(shift, dtype="<f8").tobytes()
    )
    return dim, flags, payload


def encode(m: Message) -> bytes:
    """Canonical body bytes of a message (header + payload, no framing)."""
    head = MAGIC + struct.pack("<H", VERSION)
    if isinstance(m, Broadcast):
        dim, flags, arrays = _pack_arrays(m.precision, m.shift)
        return (
            head
            + struct.pack("<BIIB", _T_BROADCAST, m.round_no, dim, flags)
            + arrays
            + struct.pack("<d", m.log_offset)
        )
    if isinstance(m, Update):
        dim, flags, arrays = _pack_arrays(m.delta_precision, m.delta_shift)
        return head + struct.pack("<BIIIB", _T_UPDATE, m.client_id, m.round_no, dim, flags) + arrays
    if isinstance(m, Ack):
        return head + struct.pack("<B", _T_ACK)
    if isinstance(m, Abort):
        reason = m.reason.encode("utf-8")
        return head + struct.pack("<BI", _T_ABORT, len(reason)) + reason
    raise TypeError(f"not a wire message: {type(m).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthMismatch("payload shorter than its declared contents")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.pos != len(self.data):
            raise LengthMismatch(f"{len(self.data) - self.pos} trailing byte(s) in payload")


def _read_arrays(r: _Reader):
    (dim, flags) = r.unpack("<IB")
    if dim > MAX_DIM:
        raise LengthMismatch(f"dim {dim} exceeds the wire limit")
    if flags & ~_FLAG_DIAGONAL:
        raise LengthMismatch(f"unknown flag bits 0x{flags:02x}")
    diagonal = bool(flags & _FLAG_DIAGONAL)
    n_prec = dim if diagonal else dim * dim
    prec = np.frombuffer(r.take(8 * n_prec), dtype="<f8").copy()
    if not diagonal:
        prec = prec.reshape(dim, dim)
    shift = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
    return prec, shift


def decode(body: bytes) -> Message:
    """Decode one message body; every malformation raises a distinct error."""
    r = _Reader(body)
    if len(body) < 7:
        raise TruncatedFrame("body shorter than the fixed header")
    if r.take(4) != MAGIC:
        raise BadMagic("magic bytes are not FGVI")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatch(f"wire version {version}, expected {VERSION}")
    (mtype,) = r.unpack("<B")
    if mtype == _T_BROADCAST:
        (round_no,) = r.unpack("<I")
        prec, shift = _read_arrays(r)
        (log_offset,) = r.unpack("<d")
        r.done()
        return Broadcast(round_no, prec, shift, log_offset)
    if mtype == _T_UPDATE:
        (client_id, round_no) = r.unpack("<II")
        prec, shift = _read_arrays(r)
        r.done()
        return Update(client_id, round_no, prec, shift)
    if mtype == _T_ACK:
        r.done()
        return Ack()
    if mtype == _T_ABORT:
        (length,) = r.unpack("<I")
        reason = r.take(length).decode("utf-8", errors="strict")
        r.done()
        return Abort(reason)
    raise UnknownMessageType(f"message type {mtype}")


def frame(m: Message) -> bytes:
    """Full wire frame: length prefix, body, CRC-32 trailer."""
    body = encode(m)
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def read_frame(read_exact) -> Message:
    """Decode one frame from a ``read_exact(n) -> bytes`` callable."""
    header = read_exact(4)
    if len(header) != 4:
        raise TruncatedFrame("missing or short length prefix")
    (length,) = struct.unpack("<I", header)
    body = read_exact(length)
    if len(body) != length:
        raise TruncatedFrame("frame body shorter than its length prefix")
    trailer = read_exact(4)
    if len(trailer) != 4:
        raise TruncatedFrame("missing CRC trailer")
    (crc,) = struct.unpack("<I", trailer)
    if crc != zlib.crc32(body):
        raise ChecksumMismatch("CRC-32 mismatch")
    return decode(body)


def decode_stream(data: bytes) -> list[Message]:
    """Decode a concatenation of frames; chunking cannot change the result."""
    out = []
    pos = 0

    def read_exact(n):
        nonlocal pos
        chunk = data[pos : pos + n]
        pos += len(chunk)
        return chunk

    while pos < len(data):
        out.append(read_frame(read_exact))
    return out
