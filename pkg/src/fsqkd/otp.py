"""One-time-pad encryption with a persistent ledger of spent key bits.

Each key file gets a JSON sidecar (``<key>.ledger.json``) listing the bit
ranges already used. Encryption takes the lowest unused range and refuses
if the pad is too short; a range is never handed out twice. Decryption reads
the range from the ciphertext header and refuses to decrypt the same range
twice with one pad.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .keys import read_key_file


class PadError(RuntimeError):
    """Insufficient key, reuse of spent key, or a mismatched ledger."""


def ledger_path(key_path: str | Path) -> Path:
    return Path(str(key_path) + ".ledger.json")


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


@dataclass
class Pad:
    """A key file plus its spent-range ledger."""

    key_path: Path
    bits: np.ndarray
    digest: str
    entries: list[dict]

    @classmethod
    def open(cls, key_path: str | Path) -> "Pad":
        key_path = Path(key_path)
        _, bits = read_key_file(key_path)
        digest = hashlib.sha256(np.packbits(bits).tobytes()).hexdigest()
        lp = ledger_path(key_path)
        entries: list[dict] = []
        if lp.exists():
            data = json.loads(lp.read_text())
            if data["key_sha256"] != digest:
                raise PadError(f"{lp} belongs to a different key")
            entries = data["spent"]
        return cls(key_path, bits, digest, entries)

    def save(self) -> None:
        data = {"key_sha256": self.digest, "key_bits": len(self.bits), "spent": self.entries}
        tmp = ledger_path(self.key_path).with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=1))
        tmp.replace(ledger_path(self.key_path))

    def spent(self, op: str) -> list[tuple[int, int]]:
        return sorted((e["start"], e["end"]) for e in self.entries if e["op"] == op)

    @property
    def remaining(self) -> int:
        used = sum(e - s for s, e in self.spent("encrypt"))
        return len(self.bits) - used

    def allocate(self, nbits: int) -> int:
        """Offset of the lowest unused run of ``nbits`` bits."""
        pos = 0
        for s, e in self.spent("encrypt"):
            if s - pos >= nbits:
                break
            pos = max(pos, e)
        if pos + nbits > len(self.bits):
            raise PadError(f"need {nbits} key bits, only {len(self.bits) - pos} unused at the end of the pad")
        return pos

    def mark(self, op: str, start: int, end: int) -> None:
        for s, e in self.spent(op):
            if _overlaps((start, end), (s, e)):
                raise PadError(f"key bits [{start}, {end}) overlap already spent range [{s}, {e})")
        if end > start:
            self.entries.append({"op": op, "start": start, "end": end})


def _xor(message: bytes, key_bits: np.ndarray) -> bytes:
    m = np.unpackbits(np.frombuffer(message, dtype=np.uint8))
    return np.packbits(m ^ key_bits).tobytes()


def _cipher_header(offset: int, nbits: int, digest: str) -> bytes:
    return f"offset = {offset}\nbits = {nbits}\nkey_sha256 = {digest}\n\n".encode()


def encrypt(message: bytes, key_path: str | Path) -> bytes:
    """Encrypt and mark the used key range spent. Returns header + ciphertext."""
    pad = Pad.open(key_path)
    nbits = 8 * len(message)
    offset = pad.allocate(nbits) if nbits else 0
    pad.mark("encrypt", offset, offset + nbits)
    body = _xor(message, pad.bits[offset:offset + nbits])
    pad.save()
    return _cipher_header(offset, nbits, pad.digest) + body


def decrypt(ciphertext: bytes, key_path: str | Path) -> bytes:
    head, sep, body = ciphertext.partition(b"\n\n")
    if not sep:
        raise PadError("ciphertext has no header")
    h = dict(line.split(" = ", 1) for line in head.decode().splitlines())
    offset, nbits = int(h["offset"]), int(h["bits"])
    if nbits != 8 * len(body):
        raise PadError("ciphertext length does not match its header")
    pad = Pad.open(key_path)
    if h["key_sha256"] != pad.digest:
        raise PadError("ciphertext was made with a different key")
    if offset + nbits > len(pad.bits):
        raise PadError("ciphertext range lies beyond the end of the pad")
    pad.mark("decrypt", offset, offset + nbits)
    out = _xor(body, pad.bits[offset:offset + nbits])
    pad.save()
    return out
