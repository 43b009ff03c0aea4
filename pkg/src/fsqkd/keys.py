"""Bit-sequence containers for each distillation stage, plus key-file I/O.

Key files hold a text provenance header (``key = value`` lines) terminated by
a blank line, followed by the bits packed 8 per byte, most significant first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.ndim != 1 or (arr > 1).any():
        raise ValueError("expected a 1-D sequence of 0/1 values")
    return arr


@dataclass(eq=False)
class SiftedKey:
    bits: np.ndarray
    slots: np.ndarray
    side: str

    def __post_init__(self) -> None:
        self.bits = as_bits(self.bits)
        self.slots = np.asarray(self.slots, dtype=np.int64)
        if len(self.bits) != len(self.slots):
            raise ValueError("bits and slots differ in length")
        if len(self.slots) > 1 and (np.diff(self.slots) <= 0).any():
            raise ValueError("sifted slots must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.bits)


@dataclass(eq=False)
class ReconciledKey:
    bits: np.ndarray
    epsilon_measured: float
    leak_bits: int
    rounds: int

    @property
    def n(self) -> int:
        return len(self.bits)


@dataclass(eq=False)
class SecretKey:
    bits: np.ndarray
    session_id: int = 0
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.bits)


def write_key_file(path: str | Path, bits, header: dict[str, str] | None = None) -> None:
    bits = as_bits(bits)
    lines = [f"{k} = {v}" for k, v in (header or {}).items()]
    lines.append(f"bits = {len(bits)}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode())
        fh.write(np.packbits(bits).tobytes())


def read_key_file(path: str | Path) -> tuple[dict[str, str], np.ndarray]:
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n\n")
    if not sep:
        raise ValueError(f"{path}: missing provenance header")
    header = {}
    for line in head.decode().splitlines():
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    count = int(header["bits"])
    if len(body) * 8 < count:
        raise ValueError(f"{path}: header claims {count} bits, file holds {len(body) * 8}")
    return header, np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=count)
