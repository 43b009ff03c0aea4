"""Monte Carlo model of one 1-s quantum transmission.

Alice's record is kept as two uint8 arrays (bit, basis) indexed by slot; Bob's
record is the sparse list of slots in which at least one detector fired. All
randomness comes from a PCG64 generator seeded by the caller, so an outcome
can be regenerated from ``(link, seed)`` alone.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import ChannelParams, LinkParams, ReceiverParams, TransmitterParams


class Basis(enum.IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1


class Detector(enum.IntEnum):
    """Detector index is ``2 * basis + bit``."""

    H = 0
    V = 1
    P45 = 2
    M45 = 3

    @property
    def basis(self) -> Basis:
        return Basis(self.value >> 1)

    @property
    def bit(self) -> int:
        return self.value & 1


@dataclass(frozen=True)
class PulseRecord:
    slot: int
    bit: int
    basis: Basis


@dataclass(frozen=True)
class DetectionRecord:
    slot: int
    detector: Detector
    multi: bool


@dataclass(frozen=True, eq=False)
class TransmissionOutcome:
    link: LinkParams
    seed: int
    alice_bits: np.ndarray  # uint8, one per slot
    alice_bases: np.ndarray  # uint8, one per slot
    det_slots: np.ndarray  # uint32, strictly increasing
    det_masks: np.ndarray  # uint8, bit d set when detector d fired

    @property
    def n_slots(self) -> int:
        return len(self.alice_bits)

    @property
    def multi(self) -> np.ndarray:
        return _popcount4(self.det_masks) > 1

    @property
    def det_detectors(self) -> np.ndarray:
        # Lowest fired detector; only meaningful for single detections.
        return _lowest_bit(self.det_masks)

    def single_detections(self) -> tuple[np.ndarray, np.ndarray]:
        """Slots and detector indices of the usable (single-fire) detections."""
        keep = ~self.multi
        return self.det_slots[keep], self.det_detectors[keep]

    @property
    def pulses(self) -> Iterator[PulseRecord]:
        for slot, (b, bs) in enumerate(zip(self.alice_bits, self.alice_bases)):
            yield PulseRecord(slot, int(b), Basis(int(bs)))

    @property
    def detections(self) -> Iterator[DetectionRecord]:
        for slot, det, multi in zip(self.det_slots, self.det_detectors, self.multi):
            yield DetectionRecord(int(slot), Detector(int(det)), bool(multi))

    def same_as(self, other: "TransmissionOutcome") -> bool:
        return (
            self.link == other.link
            and self.seed == other.seed
            and np.array_equal(self.alice_bits, other.alice_bits)
            and np.array_equal(self.alice_bases, other.alice_bases)
            and np.array_equal(self.det_slots, other.det_slots)
            and np.array_equal(self.det_masks, other.det_masks)
        )


_POP4 = np.array([bin(i).count("1") for i in range(16)], dtype=np.uint8)
_LOW4 = np.array([0] + [(i & -i).bit_length() - 1 for i in range(1, 16)], dtype=np.uint8)


def _popcount4(masks: np.ndarray) -> np.ndarray:
    return _POP4[masks & 0xF]


def _lowest_bit(masks: np.ndarray) -> np.ndarray:
    return _LOW4[masks & 0xF]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def background_probability(lp: LinkParams) -> float:
    """Per-slot firing probability of one detector from background and dark counts.

    C sifted errors per detector correspond to 2C sifted background bits and
    4C raw firings per second, half of which are lost to basis sifting.
    """
    p = 4.0 * lp.ch.background_c / lp.tx.clock_rate_hz
    if p > 1:
        raise ValueError("background rate exceeds one firing per slot")
    return p


def photon_arrival_probability(lp: LinkParams) -> float:
    """Chance that one emitted photon reaches a detector (basis split excluded)."""
    rx, ch = lp.rx, lp.ch
    return ch.eta_trans * ch.eta_geo * rx.eta_rec * rx.eta_fil * rx.eta_det


def simulate_transmission(lp: LinkParams, seed: int) -> TransmissionOutcome:
    rng = make_rng(seed)
    n = int(lp.tx.clock_rate_hz)
    bits = rng.integers(0, 2, n, dtype=np.uint8)
    bases = rng.integers(0, 2, n, dtype=np.uint8)

    event_slots = []
    event_dets = []

    if lp.tx.mu > 0:
        k = rng.poisson(lp.tx.mu, n)
        emitted = np.flatnonzero(k)
        survived = rng.binomial(k[emitted], photon_arrival_probability(lp))
        hit = survived > 0
        photon_slots = np.repeat(emitted[hit], survived[hit])
        n_ph = len(photon_slots)
        # Reflected path (prob eta_bb84) analyses rectilinear.
        bob_basis = (rng.random(n_ph) >= lp.rx.eta_bb84).astype(np.uint8)
        matched = bob_basis == bases[photon_slots]
        flip = rng.random(n_ph) < lp.tx.misalignment_error
        coin = rng.integers(0, 2, n_ph, dtype=np.uint8)
        out_bit = np.where(matched, bits[photon_slots] ^ flip, coin).astype(np.uint8)
        event_slots.append(photon_slots)
        event_dets.append(2 * bob_basis + out_bit)

    p_bg = background_probability(lp)
    if p_bg > 0:
        for det in range(4):
            count = rng.binomial(n, p_bg)
            slots = rng.choice(n, size=count, replace=False)
            event_slots.append(slots)
            event_dets.append(np.full(count, det, dtype=np.uint8))

    if event_slots:
        slots = np.concatenate(event_slots).astype(np.int64)
        dets = np.concatenate(event_dets).astype(np.uint8)
    else:
        slots = np.empty(0, dtype=np.int64)
        dets = np.empty(0, dtype=np.uint8)

    masks_all = (np.uint8(1) << dets).astype(np.uint8)
    order = np.argsort(slots, kind="stable")
    slots, masks_all = slots[order], masks_all[order]
    if len(slots):
        starts = np.flatnonzero(np.r_[True, slots[1:] != slots[:-1]])
        det_slots = slots[starts]
        det_masks = np.bitwise_or.reduceat(masks_all, starts).astype(np.uint8)
    else:
        det_slots, det_masks = slots, masks_all

    return TransmissionOutcome(
        link=lp,
        seed=seed,
        alice_bits=bits,
        alice_bases=bases,
        det_slots=det_slots.astype(np.uint32),
        det_masks=det_masks,
    )


def background_error_counts(outcome: TransmissionOutcome) -> np.ndarray:
    """Sifted-key errors attributed to each of Bob's four detectors."""
    slots, dets = outcome.single_detections()
    bob_basis = dets >> 1
    bob_bit = dets & 1
    sifted = bob_basis == outcome.alice_bases[slots]
    wrong = sifted & (bob_bit != outcome.alice_bits[slots])
    return np.bincount(dets[wrong], minlength=4)


def empirical_background_c(outcome: TransmissionOutcome) -> float:
    """Estimate C from a mu = 0 run: sifted errors per detector, averaged."""
    if outcome.link.tx.mu != 0:
        raise ValueError("background calibration needs an outcome generated with mu = 0")
    return float(background_error_counts(outcome).mean())


def jittered_link(
    lp: LinkParams,
    rng: np.random.Generator,
    eta_geo_sigma: float = 0.0,
    mu_sigma: float = 0.0,
    c_sigma: float = 0.0,
) -> LinkParams:
    """Per-run drift: log-normal eta_geo (mean preserved), normal mu, log-normal C.

    The C draw preserves the mean of 1/C, so the mean channel parameter
    eta_opt / C stays at its preset value.
    """
    eta_geo = lp.ch.eta_geo
    if eta_geo_sigma > 0:
        z = rng.standard_normal()
        eta_geo = eta_geo * float(np.exp(eta_geo_sigma * z - eta_geo_sigma**2 / 2))
        eta_geo = min(eta_geo, 1.0)
    mu = lp.tx.mu
    if mu_sigma > 0:
        mu = float(np.clip(mu + mu_sigma * rng.standard_normal(), 0.01, 0.99))
    c = lp.ch.background_c
    if c_sigma > 0:
        c = c * float(np.exp(c_sigma * rng.standard_normal() + c_sigma**2 / 2))
    return replace(lp, tx=replace(lp.tx, mu=mu), ch=replace(lp.ch, eta_geo=eta_geo, background_c=c))


# ---------------------------------------------------------------------------
# outcome dump: text header, blank line, then (uint32 slot, uint8 flags) records

_RECORD = struct.Struct(">IB")
_MULTI_FLAG = 0x10


def _link_header(lp: LinkParams) -> dict[str, str]:
    return {
        "mu": repr(lp.tx.mu),
        "clock_rate_hz": str(lp.tx.clock_rate_hz),
        "misalignment_error": repr(lp.tx.misalignment_error),
        "eta_rec": repr(lp.rx.eta_rec),
        "eta_fil": repr(lp.rx.eta_fil),
        "eta_bb84": repr(lp.rx.eta_bb84),
        "eta_det": repr(lp.rx.eta_det),
        "eta_trans": repr(lp.ch.eta_trans),
        "eta_geo": repr(lp.ch.eta_geo),
        "background_c": repr(lp.ch.background_c),
    }


def _link_from_header(h: dict[str, str]) -> LinkParams:
    return LinkParams(
        TransmitterParams(float(h["mu"]), int(h["clock_rate_hz"]), float(h["misalignment_error"])),
        ReceiverParams(float(h["eta_rec"]), float(h["eta_fil"]), float(h["eta_bb84"]), float(h["eta_det"])),
        ChannelParams(float(h["eta_trans"]), float(h["eta_geo"]), float(h["background_c"])),
    )


def dump_outcome(outcome: TransmissionOutcome, path: str | Path) -> None:
    header = {"format": "fsqkd-outcome/1", "seed": str(outcome.seed)}
    header.update(_link_header(outcome.link))
    header["records"] = str(len(outcome.det_slots))
    flags = (outcome.det_masks & 0xF) | np.where(outcome.multi, _MULTI_FLAG, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        for key, value in header.items():
            fh.write(f"{key} = {value}\n".encode())
        fh.write(b"\n")
        fh.write(b"".join(_RECORD.pack(int(s), int(f)) for s, f in zip(outcome.det_slots, flags)))


def load_outcome_dump(path: str | Path) -> tuple[dict[str, str], LinkParams, list[tuple[int, int]]]:
    """Return ``(header, link, [(slot, flags), ...])`` from a dump file."""
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n\n")
    if not sep:
        raise ValueError("outcome dump has no header terminator")
    header = {}
    for line in head.decode().splitlines():
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    if len(body) % _RECORD.size:
        raise ValueError("truncated record stream")
    records = [r for r in _RECORD.iter_unpack(body)]
    if len(records) != int(header["records"]):
        raise ValueError("record count does not match header")
    return header, _link_from_header(header), records


def replay_dump(path: str | Path) -> TransmissionOutcome:
    """Regenerate the full outcome from a dump header and check it against the records."""
    header, link, records = load_outcome_dump(path)
    outcome = simulate_transmission(link, int(header["seed"]))
    flags = (outcome.det_masks & 0xF) | np.where(outcome.multi, _MULTI_FLAG, 0)
    if [(int(s), int(f)) for s, f in zip(outcome.det_slots, flags)] != records:
        raise ValueError("replayed outcome differs from the recorded stream")
    return outcome
