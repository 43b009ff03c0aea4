"""Public-channel message framing.

Frame layout (big-endian)::

    uint32 payload length
    uint8  kind
    uint16 version
    uint64 session id
    uint32 sequence number
    payload

Slot lists are delta-encoded unsigned LEB128 varints. Bit vectors (bases,
parities, key-check bits) are packed MSB-first after a varint length.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

import numpy as np

VERSION = 1
HEADER = struct.Struct(">IBHQI")


class WireError(ValueError):
    pass


class Kind(enum.IntEnum):
    DETECTED_SLOTS = 1
    BASES = 2
    MATCHED_SLOTS = 3
    PARITY_REQUEST = 4
    PARITY_REPLY = 5
    SHUFFLE_SEED = 6
    ROUND_DONE = 7
    PA_SPEC = 8
    KEYCHECK = 9
    ABORT = 10


@dataclass
class Message:
    kind: Kind
    payload: dict[str, Any] = field(default_factory=dict)
    session_id: int = 0
    seq: int = 0


# -- primitives --------------------------------------------------------------

def _put_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise WireError("varints are unsigned")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def varint(self) -> int:
        result = shift = 0
        while True:
            if self.pos >= len(self.data):
                raise WireError("truncated varint")
            byte = self.data[self.pos]
            self.pos += 1
            result |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return result
            shift += 7
            if shift > 63:
                raise WireError("varint too long")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError("trailing bytes in payload")


def _put_slots(out: bytearray, slots: Iterable[int]) -> None:
    slots = [int(s) for s in slots]
    _put_varint(out, len(slots))
    prev = -1
    for s in slots:
        if s <= prev:
            raise WireError("slot lists must be strictly increasing")
        _put_varint(out, s - prev - 1)
        prev = s


def _get_slots(r: _Reader) -> np.ndarray:
    count = r.varint()
    slots = np.empty(count, dtype=np.int64)
    prev = -1
    for i in range(count):
        prev = prev + 1 + r.varint()
        slots[i] = prev
    return slots


def _put_bits(out: bytearray, bits) -> None:
    bits = np.asarray(bits, dtype=np.uint8)
    _put_varint(out, len(bits))
    out += np.packbits(bits).tobytes()


def _get_bits(r: _Reader) -> np.ndarray:
    count = r.varint()
    raw = r.take((count + 7) // 8)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count)


def _put_ranges(out: bytearray, ranges) -> None:
    _put_varint(out, len(ranges))
    for start, end in ranges:
        _put_varint(out, start)
        _put_varint(out, end - start)


def _get_ranges(r: _Reader) -> list[tuple[int, int]]:
    ranges = []
    for _ in range(r.varint()):
        start = r.varint()
        ranges.append((start, start + r.varint()))
    return ranges


BUDGET_FIELDS = ("n", "multi_photon_bits", "breidbart_bits", "bias_bits", "ec_leak_bits", "safety_bits")


# -- payload codecs ----------------------------------------------------------

def encode_payload(kind: Kind, p: dict[str, Any]) -> bytes:
    out = bytearray()
    if kind in (Kind.DETECTED_SLOTS, Kind.MATCHED_SLOTS):
        _put_slots(out, p["slots"])
    elif kind == Kind.BASES:
        _put_bits(out, p["bases"])
    elif kind == Kind.SHUFFLE_SEED:
        out += struct.pack(">HIQ", p["round"], p["word_length"], p["seed"])
    elif kind == Kind.PARITY_REQUEST:
        out += struct.pack(">H", p["round"])
        _put_ranges(out, p["blocks"])
    elif kind == Kind.PARITY_REPLY:
        out += struct.pack(">H", p["round"])
        _put_ranges(out, p["blocks"])
        _put_bits(out, p["parities"])
    elif kind == Kind.ROUND_DONE:
        out += struct.pack(">HIB", p["round"], p["corrected"], int(p["finished"]))
    elif kind == Kind.PA_SPEC:
        out += struct.pack(">I", p["f_secret"])
        out += int(p["pa_seed"]).to_bytes(16, "big")
        out += struct.pack(">Q", int(p["budget"]["n"]))
        out += struct.pack(">5d", *(float(p["budget"][k]) for k in BUDGET_FIELDS[1:]))
    elif kind == Kind.KEYCHECK:
        _put_bits(out, p["bits"])
    elif kind == Kind.ABORT:
        out += p.get("reason", "").encode()
    else:  # pragma: no cover
        raise WireError(f"unknown kind {kind}")
    return bytes(out)


def decode_payload(kind: Kind, data: bytes) -> dict[str, Any]:
    r = _Reader(data)
    if kind in (Kind.DETECTED_SLOTS, Kind.MATCHED_SLOTS):
        p = {"slots": _get_slots(r)}
    elif kind == Kind.BASES:
        p = {"bases": _get_bits(r)}
    elif kind == Kind.SHUFFLE_SEED:
        rnd, w, seed = r.unpack(">HIQ")
        p = {"round": rnd, "word_length": w, "seed": seed}
    elif kind == Kind.PARITY_REQUEST:
        (rnd,) = r.unpack(">H")
        p = {"round": rnd, "blocks": _get_ranges(r)}
    elif kind == Kind.PARITY_REPLY:
        (rnd,) = r.unpack(">H")
        blocks = _get_ranges(r)
        parities = _get_bits(r)
        if len(parities) != len(blocks):
            raise WireError("parity count does not match block count")
        p = {"round": rnd, "blocks": blocks, "parities": parities}
    elif kind == Kind.ROUND_DONE:
        rnd, corrected, finished = r.unpack(">HIB")
        p = {"round": rnd, "corrected": corrected, "finished": bool(finished)}
    elif kind == Kind.PA_SPEC:
        (f_secret,) = r.unpack(">I")
        pa_seed = int.from_bytes(r.take(16), "big")
        (n,) = r.unpack(">Q")
        rest = r.unpack(">5d")
        budget = dict(zip(BUDGET_FIELDS, (n, *rest)))
        p = {"f_secret": f_secret, "pa_seed": pa_seed, "budget": budget}
    elif kind == Kind.KEYCHECK:
        p = {"bits": _get_bits(r)}
    elif kind == Kind.ABORT:
        p = {"reason": r.take(len(data)).decode(errors="replace")}
    else:
        raise WireError(f"unknown kind {kind}")
    r.done()
    return p


# -- framing -----------------------------------------------------------------

def encode(msg: Message) -> bytes:
    body = encode_payload(msg.kind, msg.payload)
    return HEADER.pack(len(body), int(msg.kind), VERSION, msg.session_id, msg.seq) + body


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise WireError("short frame")
    length, kind, version, session_id, seq = HEADER.unpack_from(frame)
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if len(frame) != HEADER.size + length:
        raise WireError("frame length mismatch")
    try:
        kind = Kind(kind)
    except ValueError:
        raise WireError(f"unknown message kind {kind}") from None
    payload = decode_payload(kind, frame[HEADER.size:])
    return Message(kind, payload, session_id, seq)


def iter_frames(stream: bytes) -> Iterator[bytes]:
    """Split a concatenation of frames (e.g. a transcript file)."""
    pos = 0
    while pos < len(stream):
        if pos + HEADER.size > len(stream):
            raise WireError("truncated frame header")
        (length,) = struct.unpack_from(">I", stream, pos)
        end = pos + HEADER.size + length
        if end > len(stream):
            raise WireError("truncated frame body")
        yield stream[pos:end]
        pos = end
