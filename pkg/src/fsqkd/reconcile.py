"""Interactive bisective-search reconciliation with shuffling rounds.

Each round shuffles the key with a publicly announced seed, splits it into
words, and compares word parities. Bob bisects every mismatching word,
asking Alice for the parity of the left half at each level, and flips the bit
he lands on. A flip also changes the parity of the word containing that bit
in every earlier round; words that now disagree are bisected again (the
Cascade back-tracking step). Only Alice's parities cross the wire, and each
distinct one is asked for at most once, so the leak is exactly the number of
parities she sends.

Rounds stop after two consecutive rounds in which Bob flips nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keys import ReconciledKey, SiftedKey
from .protocol.endpoint import CoroutineEndpoint, ProtocolError, Script
from .protocol.transport import Transcript, run_loopback
from .protocol.wire import Kind, Message
from .sim import make_rng

MIN_WORD = 8
SMALL_KEY = 16
CLEAN_ROUNDS_TO_STOP = 2
MAX_ROUNDS = 40
# Later rounds keep at least this many words, so a clean round still has a
# fair chance of exposing an even number of leftover errors.
MIN_WORDS_PER_ROUND = 16

Block = tuple[int, int, int]  # (round, start, end) in that round's shuffled order


def initial_word_length(epsilon_estimate: float, n: int | None = None) -> int:
    """First-round word length, about 0.73 / eps, clamped to [8, n]."""
    if not (0 < epsilon_estimate <= 0.5):
        raise ValueError(f"epsilon_estimate must lie in (0, 0.5], got {epsilon_estimate}")
    w = max(MIN_WORD, int(round(0.73 / epsilon_estimate)))
    if n is not None:
        w = min(w, max(n, 1))
    return w


def word_schedule(w0: int, n: int, rnd: int) -> int:
    """Word length for round ``rnd``: doubled each round, never fewer than MIN_WORDS_PER_ROUND words."""
    if n < SMALL_KEY:
        return max(n, 1)
    cap = max(w0, n // MIN_WORDS_PER_ROUND)
    return min(w0 << min(rnd, 30), cap)


def shuffle_permutation(seed: int, n: int) -> np.ndarray:
    return make_rng(seed).permutation(n)


class CascadeState:
    """Bob's side of the search: his key, the shuffles and Alice's known parities.

    ``start_round`` and ``feed`` return the blocks whose Alice-parity Bob still
    needs; an empty list means the round is finished.
    """

    def __init__(self, bits):
        self.bits = np.array(bits, dtype=np.uint8)
        self.n = len(self.bits)
        self.perms: list[np.ndarray] = []
        self.positions: list[np.ndarray] = []
        self.shuffled: list[np.ndarray] = []
        self.words: list[int] = []
        self.known: dict[Block, int] = {}
        self.leak = 0
        self.corrected = 0
        self.round_flips = 0
        self._active: list[Block] = []
        self._top: list[Block] = []

    def parity(self, block: Block) -> int:
        r, s, e = block
        return int(self.shuffled[r][s:e].sum() & 1)

    def start_round(self, seed: int, word: int) -> list[Block]:
        perm = shuffle_permutation(seed, self.n)
        pos = np.empty(self.n, dtype=np.int64)
        pos[perm] = np.arange(self.n)
        self.perms.append(perm)
        self.positions.append(pos)
        self.shuffled.append(self.bits[perm])
        self.words.append(word)
        r = len(self.perms) - 1
        self.round_flips = 0
        self._top = [(r, s, min(s + word, self.n)) for s in range(0, self.n, word)]
        return list(self._top)

    def _flip(self, i: int) -> None:
        self.bits[i] ^= 1
        self.corrected += 1
        self.round_flips += 1
        for r, pos in enumerate(self.positions):
            p = int(pos[i])
            self.shuffled[r][p] ^= 1
            w = self.words[r]
            top = (r, p - p % w, min(p - p % w + w, self.n))
            if top in self.known and self.parity(top) != self.known[top]:
                self._active.append(top)

    def feed(self, answers: dict[Block, int]) -> list[Block]:
        for block, par in answers.items():
            if block in self.known:
                raise ProtocolError(f"parity for {block} disclosed twice")
            self.known[block] = int(par)
            self.leak += 1
        if self._top:
            missing = [b for b in self._top if b not in self.known]
            if missing:
                raise ProtocolError("reply is missing word parities")
            self._active.extend(b for b in self._top if self.parity(b) != self.known[b])
            self._top = []

        waiting: list[Block] = []
        requests: list[Block] = []
        while self._active:
            block = self._active.pop()
            if block in waiting or self.parity(block) == self.known[block]:
                continue
            r, s, e = block
            if e - s == 1:
                self._flip(int(self.perms[r][s]))
                continue
            mid = (s + e) // 2
            left = (r, s, mid)
            if left in self.known:
                if self.parity(left) != self.known[left]:
                    self._active.append(left)
                else:
                    right = (r, mid, e)
                    # Implied by the parent and the left half; never disclosed.
                    self.known.setdefault(right, self.known[block] ^ self.known[left])
                    self._active.append(right)
            else:
                waiting.append(block)
                if left not in requests:
                    requests.append(left)
        self._active = waiting
        return requests


def alice_parities(bits: np.ndarray, perm: np.ndarray, blocks) -> np.ndarray:
    shuffled = bits[perm]
    return np.array([int(shuffled[s:e].sum() & 1) for s, e in blocks], dtype=np.uint8)


# ---------------------------------------------------------------------------
# protocol scripts, used by the session endpoints and by ``correct``

@dataclass
class ReconcileOutcome:
    key: ReconciledKey
    corrected: int


def alice_script(ep: CoroutineEndpoint, bits: np.ndarray, eps_estimate: float,
                 rng: np.random.Generator) -> Script:
    """Alice announces shuffle seeds and answers parity requests."""
    n = len(bits)
    if n == 0:
        return ReconcileOutcome(ReconciledKey(bits.copy(), 0.0, 0, 0), 0)
    w0 = initial_word_length(min(max(eps_estimate, 1e-4), 0.5), n)
    if n < SMALL_KEY:
        w0 = n
    perms: dict[int, np.ndarray] = {}
    leak = corrected = 0
    rnd = 0
    while True:
        seed = int(rng.integers(0, 2**63))
        perms[rnd] = shuffle_permutation(seed, n)
        msg = yield [ep.msg(Kind.SHUFFLE_SEED, round=rnd, word_length=word_schedule(w0, n, rnd), seed=seed)]
        while msg.kind == Kind.PARITY_REQUEST:
            r = msg.payload["round"]
            if r not in perms:
                raise ProtocolError(f"parity request for unknown round {r}")
            blocks = msg.payload["blocks"]
            if any(not (0 <= s < e <= n) for s, e in blocks):
                raise ProtocolError("parity request block out of range")
            par = alice_parities(bits, perms[r], blocks)
            leak += len(par)
            msg = yield [ep.msg(Kind.PARITY_REPLY, round=r, blocks=blocks, parities=par)]
        ep.expect(msg, Kind.ROUND_DONE)
        if msg.payload["round"] != rnd:
            raise ProtocolError("ROUND_DONE for the wrong round")
        corrected += msg.payload["corrected"]
        rnd += 1
        if msg.payload["finished"]:
            break
    eps = corrected / n
    return ReconcileOutcome(ReconciledKey(bits.copy(), eps, leak, rnd), corrected)


def bob_script(ep: CoroutineEndpoint, bits: np.ndarray, first: Message | None) -> Script:
    """Bob drives the bisection. ``first`` is the opening SHUFFLE_SEED.

    Returns ``(outcome, pending)``: the final ROUND_DONE is not sent here but
    handed back, so the caller can send it and wait for the next phase.
    """
    n = len(bits)
    if n == 0:
        return ReconcileOutcome(ReconciledKey(bits.copy(), 0.0, 0, 0), 0), []
    state = CascadeState(bits)
    msg = first
    clean = 0
    rnd = 0
    while True:
        ep.expect(msg, Kind.SHUFFLE_SEED)
        p = msg.payload
        if p["round"] != rnd or not (1 <= p["word_length"] <= n):
            raise ProtocolError("bad SHUFFLE_SEED")
        needed = state.start_round(p["seed"], p["word_length"])
        while needed:
            by_round: dict[int, list[tuple[int, int]]] = {}
            for r, s, e in needed:
                by_round.setdefault(r, []).append((s, e))
            out = [ep.msg(Kind.PARITY_REQUEST, round=r, blocks=bl) for r, bl in sorted(by_round.items())]
            answers: dict[Block, int] = {}
            for i, (r, blocks) in enumerate(sorted(by_round.items())):
                reply = yield (out if i == 0 else [])
                ep.expect(reply, Kind.PARITY_REPLY)
                if reply.payload["round"] != r or list(map(tuple, reply.payload["blocks"])) != blocks:
                    raise ProtocolError("PARITY_REPLY does not answer the request")
                for (s, e), par in zip(blocks, reply.payload["parities"]):
                    answers[(r, s, e)] = int(par)
            needed = state.feed(answers)
        flips = state.round_flips
        clean = clean + 1 if flips == 0 else 0
        finished = clean >= CLEAN_ROUNDS_TO_STOP or rnd + 1 >= MAX_ROUNDS
        done = ep.msg(Kind.ROUND_DONE, round=rnd, corrected=flips, finished=finished)
        rnd += 1
        if finished:
            break
        msg = yield [done]
    key = ReconciledKey(state.bits, state.corrected / n, state.leak, rnd)
    return ReconcileOutcome(key, state.corrected), [done]


class _AliceOnly(CoroutineEndpoint):
    role = "alice"

    def __init__(self, session_id, bits, eps_estimate, seed):
        self.args = (bits, eps_estimate, make_rng(seed))
        super().__init__(session_id)

    def script(self) -> Script:
        return (yield from alice_script(self, *self.args))


class _BobOnly(CoroutineEndpoint):
    role = "bob"

    def __init__(self, session_id, bits):
        self.bits = bits
        super().__init__(session_id)

    def script(self) -> Script:
        first = (yield []) if len(self.bits) else None
        outcome, pending = yield from bob_script(self, self.bits, first)
        self.send_last(*pending)
        return outcome


def correct(alice: SiftedKey, bob: SiftedKey, eps_estimate: float = 0.05, seed: int = 0,
            transcript: Transcript | None = None, session_id: int = 1) -> tuple[ReconciledKey, ReconciledKey]:
    """Reconcile two sifted keys over an in-process public channel.

    Alice's bits are returned unchanged; Bob's are corrected in a copy.
    """
    if alice.n != bob.n:
        raise ValueError("sifted keys differ in length")
    a = _AliceOnly(session_id, alice.bits.copy(), eps_estimate, seed)
    b = _BobOnly(session_id, bob.bits.copy())
    run_loopback(a, b, transcript)
    for ep in (a, b):
        if ep.error is not None:
            raise ep.error
    alice_out: ReconcileOutcome = a.result
    bob_out: ReconcileOutcome = b.result
    return alice_out.key, bob_out.key
