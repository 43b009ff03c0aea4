"""FIPS 140-2 single-sample tests and Maurer's universal statistical test.

The FIPS bounds live in ``data/fips_140_2_bounds.json``. Maurer blocks are
read most-significant-bit first.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .keys import as_bits

FIPS_SAMPLE_BITS = 20_000
RUN_LABELS = ("1", "2", "3", "4", "5", "6+")

# Expected value and variance of the per-block log2 gap for an ideal source,
# from Maurer's table, indexed by L.
MAURER_TABLE = {
    1: (0.7326495, 0.690),
    2: (1.5374383, 1.338),
    3: (2.4016068, 1.901),
    4: (3.3112247, 2.358),
    5: (4.2534266, 2.705),
    6: (5.2177052, 2.954),
    7: (6.1962507, 3.125),
    8: (7.1836656, 3.238),
}
MAURER_Z = 3.30  # two-sided, about 0.001
# Maurer recommends K >= 1000 * 2**L test blocks; the c(L, K) correction keeps
# the interval honest down to this many, which lets 160,000 bits (K = 990 * 2**5)
# be tested at L = 5.
MAURER_MIN_K_PER_SYMBOL = 100


@lru_cache(maxsize=1)
def fips_bounds() -> dict:
    return json.loads(resources.files("fsqkd").joinpath("data/fips_140_2_bounds.json").read_text())


# ---------------------------------------------------------------------------
# FIPS 140-2

@dataclass(frozen=True)
class FipsResult:
    monobit: tuple[int, bool]
    poker: tuple[float, bool]
    runs: dict = field(default_factory=dict)  # label -> (zero_runs, one_runs, pass)
    long_run: tuple[int, bool] = (0, True)

    @property
    def runs_pass(self) -> bool:
        return all(ok for _, _, ok in self.runs.values())

    @property
    def overall(self) -> bool:
        return self.monobit[1] and self.poker[1] and self.runs_pass and self.long_run[1]

    def failed_tests(self) -> list[str]:
        out = []
        for name, ok in (("monobit", self.monobit[1]), ("poker", self.poker[1]),
                         ("runs", self.runs_pass), ("long_run", self.long_run[1])):
            if not ok:
                out.append(name)
        return out


def _run_lengths(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(run values, run lengths) of a bit array."""
    edges = np.flatnonzero(np.diff(bits)) + 1
    starts = np.concatenate(([0], edges))
    lengths = np.diff(np.concatenate((starts, [len(bits)])))
    return bits[starts], lengths


def fips_140_2(bits) -> FipsResult:
    bits = as_bits(bits)
    if len(bits) != FIPS_SAMPLE_BITS:
        raise ValueError(f"FIPS 140-2 tests need exactly {FIPS_SAMPLE_BITS} bits, got {len(bits)}")
    b = fips_bounds()

    ones = int(bits.sum())
    lo, hi = b["monobit"]["ones_exclusive"]
    monobit = (ones, lo < ones < hi)

    nibbles = bits.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    counts = np.bincount(nibbles, minlength=16)
    x = 16 / 5000 * float(np.sum(counts.astype(np.float64) ** 2)) - 5000
    lo, hi = b["poker"]["statistic_exclusive"]
    poker = (x, lo < x < hi)

    values, lengths = _run_lengths(bits)
    capped = np.minimum(lengths, 6)
    runs = {}
    for i, label in enumerate(RUN_LABELS, start=1):
        z = int(np.count_nonzero((capped == i) & (values == 0)))
        o = int(np.count_nonzero((capped == i) & (values == 1)))
        lo, hi = b["runs"]["inclusive"][label]
        runs[label] = (z, o, lo <= z <= hi and lo <= o <= hi)

    longest = int(lengths.max())
    long_run = (longest, longest < b["long_run"]["fail_at_or_above"])
    return FipsResult(monobit, poker, runs, long_run)


# ---------------------------------------------------------------------------
# Maurer

@dataclass(frozen=True)
class MaurerResult:
    L: int
    Q: int
    K: int
    statistic: float
    expected: float
    sigma: float
    threshold: tuple[float, float]

    @property
    def passed(self) -> bool:
        lo, hi = self.threshold
        return lo <= self.statistic <= hi


def _blocks(bits: np.ndarray, L: int, count: int) -> np.ndarray:
    weights = 1 << np.arange(L - 1, -1, -1)
    return bits[: count * L].reshape(count, L).astype(np.int64) @ weights


def maurer_universal(bits, L: int = 5, Q: int | None = None, K: int | None = None,
                     z: float = MAURER_Z) -> MaurerResult:
    """Mean log2 distance between repeated L-bit blocks.

    Blocks not seen before measure their distance from the start of the
    sequence. Q defaults to 10 * 2**L and K to every remaining whole block.
    """
    bits = as_bits(bits)
    if L not in MAURER_TABLE:
        raise ValueError(f"L must be one of {sorted(MAURER_TABLE)}")
    if Q is None:
        Q = 10 * 2 ** L
    total = len(bits) // L
    if K is None:
        K = total - Q
    if Q < 1 or K < 1 or (Q + K) > total:
        raise ValueError(f"need at least (Q + K) * L = {(Q + max(K, 1)) * L} bits, got {len(bits)}")

    blocks = _blocks(bits, L, Q + K)
    idx = np.arange(1, Q + K + 1)
    # Last earlier occurrence of each block (0 if none), via a stable sort by value.
    order = np.argsort(blocks, kind="stable")
    sorted_vals = blocks[order]
    prev = np.zeros(Q + K, dtype=np.int64)
    same = sorted_vals[1:] == sorted_vals[:-1]
    prev[order[1:][same]] = idx[order[:-1][same]]
    gaps = (idx - prev)[Q:]
    stat = float(np.mean(np.log2(gaps)))

    expected, variance = MAURER_TABLE[L]
    c = 0.7 - 0.8 / L + (4 + 32 / L) * K ** (-3 / L) / 15
    sigma = c * math.sqrt(variance / K)
    return MaurerResult(L, Q, K, stat, expected, sigma, (expected - z * sigma, expected + z * sigma))


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class BatteryReport:
    chunks: list[FipsResult]
    maurer: MaurerResult | None
    n_bits: int

    @property
    def failed_chunks(self) -> int:
        return sum(not r.overall for r in self.chunks)

    def passed(self, allowed_chunk_failures: int = 0) -> bool:
        ok = bool(self.chunks) and self.failed_chunks <= allowed_chunk_failures
        return ok and self.maurer is not None and self.maurer.passed


def minimum_bits(L: int = 5) -> dict[str, int]:
    return {"fips": FIPS_SAMPLE_BITS, "maurer": (10 + MAURER_MIN_K_PER_SYMBOL) * 2 ** L * L}


def run_battery(bits, L: int = 5) -> BatteryReport:
    """FIPS on each whole 20,000-bit chunk, Maurer on the full stream."""
    bits = as_bits(bits)
    need = minimum_bits(L)
    if len(bits) < need["fips"]:
        raise ValueError(f"{len(bits)} bits is too short: FIPS needs {need['fips']}, "
                         f"Maurer L={L} needs {need['maurer']}")
    chunks = [fips_140_2(bits[i:i + FIPS_SAMPLE_BITS])
              for i in range(0, len(bits) - FIPS_SAMPLE_BITS + 1, FIPS_SAMPLE_BITS)]
    maurer = maurer_universal(bits, L) if len(bits) >= need["maurer"] else None
    return BatteryReport(chunks, maurer, len(bits))


def format_fips(r: FipsResult) -> str:
    b = fips_bounds()
    lines = [
        f"monobit ones = {r.monobit[0]} bounds = {tuple(b['monobit']['ones_exclusive'])} "
        f"{'pass' if r.monobit[1] else 'FAIL'}",
        f"poker X = {r.poker[0]:.4f} bounds = {tuple(b['poker']['statistic_exclusive'])} "
        f"{'pass' if r.poker[1] else 'FAIL'}",
    ]
    for label, (zr, orun, ok) in r.runs.items():
        bnd = tuple(b["runs"]["inclusive"][label])
        lines.append(f"runs[{label}] zeros = {zr} ones = {orun} bounds = {bnd} {'pass' if ok else 'FAIL'}")
    lines.append(f"long_run max = {r.long_run[0]} limit = {b['long_run']['fail_at_or_above']} "
                 f"{'pass' if r.long_run[1] else 'FAIL'}")
    return "\n".join(lines)


def format_report(rep: BatteryReport, allowed_chunk_failures: int = 0) -> str:
    out = [f"bits = {rep.n_bits}", f"fips_chunks = {len(rep.chunks)}", f"fips_failed_chunks = {rep.failed_chunks}"]
    for i, r in enumerate(rep.chunks):
        out.append(f"[chunk {i}] {'pass' if r.overall else 'FAIL ' + ','.join(r.failed_tests())}")
        out.extend("  " + line for line in format_fips(r).splitlines())
    m = rep.maurer
    if m is None:
        out.append(f"maurer = skipped (needs {minimum_bits()['maurer']} bits)")
    else:
        out.append(f"maurer L = {m.L} Q = {m.Q} K = {m.K} statistic = {m.statistic:.6f} "
                   f"expected = {m.expected} interval = ({m.threshold[0]:.6f}, {m.threshold[1]:.6f}) "
                   f"{'pass' if m.passed else 'FAIL'}")
    out.append(f"overall = {'pass' if rep.passed(allowed_chunk_failures) else 'FAIL'}")
    return "\n".join(out) + "\n"
