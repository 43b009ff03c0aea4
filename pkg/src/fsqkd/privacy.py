"""Secrecy budgeting, privacy amplification and the final key check."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .keys import SecretKey, as_bits
from .model import binary_entropy
from .sim import make_rng

LOG2_1_5 = math.log2(1.5)


@dataclass(frozen=True)
class SecrecyPolicy:
    safety_s: float = 20
    ec_overhead: float = 1.19
    keycheck_bits: int = 16

    def __post_init__(self) -> None:
        if self.safety_s < 0:
            raise ValueError("safety_s must be >= 0")
        if self.ec_overhead < 1:
            raise ValueError("ec_overhead must be >= 1")
        if self.keycheck_bits < 0:
            raise ValueError("keycheck_bits must be >= 0")


@dataclass(frozen=True)
class SecrecyBudget:
    """Itemized deductions from n sifted bits down to the final length.

    ``floor_remainder`` is whatever the final floor discarded: in [0, 1) for a
    positive yield, and the (non-positive) overdraft when the yield is zero.
    """

    n: int
    multi_photon_bits: float
    breidbart_bits: float
    bias_bits: float
    ec_leak_bits: float
    safety_bits: float
    f_secret: int

    DEDUCTIONS = ("multi_photon_bits", "breidbart_bits", "bias_bits", "ec_leak_bits", "safety_bits")

    @property
    def deductions(self) -> float:
        return math.fsum(getattr(self, k) for k in self.DEDUCTIONS)

    @property
    def floor_remainder(self) -> Fraction:
        total = sum((Fraction(getattr(self, k)) for k in self.DEDUCTIONS), Fraction(0))
        return Fraction(self.n) - total - self.f_secret

    def is_conserved(self) -> bool:
        """Exact check that f_secret + deductions + remainder == n with a legal remainder."""
        rem = self.floor_remainder
        total = sum((Fraction(getattr(self, k)) for k in self.DEDUCTIONS), Fraction(0))
        if Fraction(self.f_secret) + total + rem != self.n:
            return False
        if self.f_secret > 0:
            return 0 <= rem < 1
        return rem < 1

    def as_dict(self) -> dict:
        return asdict(self)


def collision_entropy_rate(mu: float, eps: float) -> float:
    """Eve's collision entropy per sifted bit; may be negative."""
    return 1.0 - mu - 4.0 * eps * LOG2_1_5


def bias_deduction(n: int, p0: float) -> float:
    """Collision-entropy shortfall of a key with zero-fraction p0."""
    p1 = 1.0 - p0
    return max(0.0, n * (1.0 + math.log2(p0 * p0 + p1 * p1)))


def secret_fraction(n: int, mu: float, eps: float, policy: SecrecyPolicy = SecrecyPolicy(),
                    bias: tuple[float, float] | None = None,
                    ec_leak_actual: int | None = None) -> SecrecyBudget:
    if n <= 0:
        return SecrecyBudget(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0)
    multi = n * mu
    breidbart = n * 4.0 * eps * LOG2_1_5
    bias_bits = 0.0 if bias is None else bias_deduction(n, bias[0])
    if ec_leak_actual is not None:
        leak = float(ec_leak_actual)
    else:
        leak = policy.ec_overhead * binary_entropy(eps) * n
    safety = float(policy.safety_s)
    remaining = n - math.fsum((multi, breidbart, bias_bits, leak, safety))
    f = max(0, math.floor(remaining))
    return SecrecyBudget(n, multi, breidbart, bias_bits, leak, safety, f)


# ---------------------------------------------------------------------------
# privacy amplification

_CHUNK_ROWS = 512


def _packed_rows(pa_seed: int, f_secret: int, n: int):
    """Yield (start, packed subset rows) chunks; bit j of row i (MSB first) marks j in S_i."""
    rng = make_rng(pa_seed)
    nbytes = (n + 7) // 8
    for start in range(0, f_secret, _CHUNK_ROWS):
        rows = min(_CHUNK_ROWS, f_secret - start)
        yield start, rng.integers(0, 256, size=(rows, nbytes), dtype=np.uint8)


def pa_subsets(pa_seed: int, f_secret: int, n: int) -> np.ndarray:
    """Boolean (f_secret, n) matrix; row i is subset S_i, each index in with prob 1/2."""
    out = np.zeros((max(f_secret, 0), n), dtype=bool)
    for start, raw in _packed_rows(pa_seed, f_secret, n):
        out[start:start + len(raw)] = np.unpackbits(raw, axis=1, count=n).astype(bool)
    return out


def subset_parities(bits, subsets: np.ndarray) -> np.ndarray:
    """Output bit i = XOR of the key bits selected by row i of ``subsets``."""
    bits = as_bits(bits)
    subsets = np.asarray(subsets, dtype=bool)
    return (subsets.astype(np.uint8) @ bits.astype(np.int64) & 1).astype(np.uint8)


def amplify(bits, pa_seed: int, f_secret: int) -> np.ndarray:
    """Parities of f_secret seeded random subsets, computed in chunks.

    Equivalent to ``subset_parities(bits, pa_subsets(pa_seed, f_secret, n))``
    without materializing the whole matrix.
    """
    bits = as_bits(bits)
    n = len(bits)
    if f_secret <= 0 or n == 0:
        return np.zeros(0, dtype=np.uint8)
    key = np.packbits(bits)
    out = np.empty(f_secret, dtype=np.uint8)
    for start, raw in _packed_rows(pa_seed, f_secret, n):
        rows = len(raw)
        # Padding bits of the last byte are zero in ``key``, so they drop out.
        out[start:start + rows] = np.bitwise_count(raw & key).sum(axis=1, dtype=np.int64) & 1
    return out


def extract(alice_bits, bob_bits, budget: SecrecyBudget, pa_seed: int,
            session_id: int = 0) -> tuple[SecretKey, SecretKey]:
    """Both sides apply the same publicly seeded subsets to their reconciled keys."""
    f = budget.f_secret
    prov = {"session": str(session_id), "f_secret": str(f), "n": str(budget.n)}
    return (
        SecretKey(amplify(alice_bits, pa_seed, f), session_id, dict(prov, side="alice")),
        SecretKey(amplify(bob_bits, pa_seed, f), session_id, dict(prov, side="bob")),
    )


def key_check(alice: SecretKey, bob: SecretKey,
              policy: SecrecyPolicy = SecrecyPolicy()) -> tuple[SecretKey, SecretKey, bool]:
    """Compare and drop the first keycheck_bits bits; on mismatch both keys are destroyed."""
    k = policy.keycheck_bits
    if alice.length != bob.length:
        raise ValueError("key check needs keys of equal length")
    if alice.length < k:
        raise ValueError(f"key of {alice.length} bits is shorter than the {k}-bit check")
    ok = bool(np.array_equal(alice.bits[:k], bob.bits[:k]))
    empty = np.zeros(0, dtype=np.uint8)
    if ok:
        return (SecretKey(alice.bits[k:].copy(), alice.session_id, alice.provenance),
                SecretKey(bob.bits[k:].copy(), bob.session_id, bob.provenance), True)
    return (SecretKey(empty, alice.session_id, alice.provenance),
            SecretKey(empty.copy(), bob.session_id, bob.provenance), False)
