"""BB84 session: sifting, reconciliation, privacy amplification, key check.

Both endpoints are ``CoroutineEndpoint`` scripts. Each one keeps a copy of the
public facts of the session (counts, leak, budget, key-check outcome) and
builds its ``SessionReport`` from those alone, so Alice's and Bob's reports
are identical and a passive listener could rebuild them from the transcript.
"""
from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import reconcile
from ..keys import SecretKey, SiftedKey
from ..model import LinkParams, channel_parameter, eta_opt, expected_ber
from ..privacy import SecrecyBudget, SecrecyPolicy, amplify, secret_fraction
from ..security import attack_flags
from ..sim import TransmissionOutcome, make_rng, simulate_transmission
from .endpoint import CoroutineEndpoint, ProtocolError, Script
from .transport import SocketTransport, Transcript, TransportError, run_endpoint, run_loopback
from .wire import BUDGET_FIELDS, Kind, decode, iter_frames

FALLBACK_EPS = 0.05


class SessionError(RuntimeError):
    pass


def session_id_for(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 0x51D]).generate_state(1, np.uint64)[0])


def _alice_rng(seed: int) -> np.random.Generator:
    return make_rng([seed, 0xA11CE])


# ---------------------------------------------------------------------------
# sifting

def alice_sift(ep: CoroutineEndpoint, bits: np.ndarray, bases: np.ndarray) -> Script:
    msg = ep.expect((yield []), Kind.DETECTED_SLOTS)
    detected = msg.payload["slots"]
    if len(detected) and (detected[0] < 0 or detected[-1] >= len(bits)):
        raise ProtocolError("detected slot out of range")
    msg = ep.expect((yield [ep.msg(Kind.BASES, bases=bases[detected])]), Kind.MATCHED_SLOTS)
    matched = msg.payload["slots"]
    if not np.isin(matched, detected).all():
        raise ProtocolError("matched slots are not a subset of the detected slots")
    key = SiftedKey(bits[matched], matched, "alice")
    return key, len(detected), int(np.count_nonzero(bases[matched] == 0))


def bob_sift(ep: CoroutineEndpoint, slots: np.ndarray, detectors: np.ndarray) -> Script:
    msg = ep.expect((yield [ep.msg(Kind.DETECTED_SLOTS, slots=slots)]), Kind.BASES)
    alice_bases = msg.payload["bases"]
    if len(alice_bases) != len(slots):
        raise ProtocolError("BASES length does not match DETECTED_SLOTS")
    keep = (detectors >> 1) == alice_bases
    matched = slots[keep]
    key = SiftedKey(detectors[keep] & 1, matched, "bob")
    return key, ep.msg(Kind.MATCHED_SLOTS, slots=matched), int(np.count_nonzero(alice_bases[keep] == 0))


class _SiftAlice(CoroutineEndpoint):
    role = "alice"

    def __init__(self, session_id, bits, bases):
        self.view = (bits, bases)
        super().__init__(session_id)

    def script(self) -> Script:
        key, _, _ = yield from alice_sift(self, *self.view)
        return key


class _SiftBob(CoroutineEndpoint):
    role = "bob"

    def __init__(self, session_id, slots, detectors):
        self.view = (slots, detectors)
        super().__init__(session_id)

    def script(self) -> Script:
        key, matched_msg, _ = yield from bob_sift(self, *self.view)
        self.send_last(matched_msg)
        return key


def run_sift(outcome: TransmissionOutcome, transcript: Transcript | None = None,
             session_id: int = 1) -> tuple[SiftedKey, SiftedKey]:
    """Sift one transmission over an in-process public channel."""
    slots, dets = outcome.single_detections()
    a = _SiftAlice(session_id, outcome.alice_bits, outcome.alice_bases)
    b = _SiftBob(session_id, slots.astype(np.int64), dets)
    run_loopback(a, b, transcript)
    for ep in (a, b):
        if ep.error is not None:
            raise ep.error
    return a.result, b.result


# ---------------------------------------------------------------------------
# report

@dataclass(frozen=True)
class SessionReport:
    session_id: int
    seed: int
    mu: float
    eta_opt: float
    channel_parameter: float
    n_pulses: int
    n_raw: int
    n_sifted: int
    n_rectilinear: int
    n_diagonal: int
    errors_corrected: int
    epsilon: float
    leak_bits: int
    rounds: int
    multi_photon_bits: float
    breidbart_bits: float
    bias_bits: float
    ec_leak_bits: float
    safety_bits: float
    f_secret: int
    keycheck_bits: int
    keycheck: str  # "ok", "failed", "skipped" (nothing left to check)
    final_length: int
    p_sif: float
    p_sif_to_secret: float
    p_secret: float
    zero_yield: bool
    usd_safe: bool
    pns_safe: bool

    def budget(self) -> SecrecyBudget:
        return SecrecyBudget(self.n_sifted, self.multi_photon_bits, self.breidbart_bits, self.bias_bits,
                             self.ec_leak_bits, self.safety_bits, self.f_secret)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SessionReport":
        raw = {}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            raw[k.strip()] = v.strip()
        kw = {}
        for f in fields(cls):
            v = raw[f.name]
            if f.type == "bool":
                kw[f.name] = v == "true"
            elif f.type == "int":
                kw[f.name] = int(v)
            elif f.type == "float":
                kw[f.name] = float(v)
            else:
                kw[f.name] = v
        return cls(**kw)

    def as_dict(self) -> dict:
        return asdict(self)


def _build_report(session_id: int, seed: int, lp: LinkParams, policy: SecrecyPolicy, pub: dict) -> SessionReport:
    budget: SecrecyBudget = pub["budget"]
    n = budget.n
    f = budget.f_secret
    n_pulses = lp.tx.clock_rate_hz
    p_sif = n / n_pulses
    p_sif_to_secret = f / n if f > 0 else 0.0
    e_opt = eta_opt(lp.ch)
    if lp.tx.mu > 0 and 0 < e_opt <= 1:
        flags = attack_flags(lp.tx.mu, e_opt)
        usd_safe, pns_safe = flags.usd_safe, flags.pns_safe
    else:
        usd_safe = pns_safe = True
    return SessionReport(
        session_id=session_id,
        seed=seed,
        mu=lp.tx.mu,
        eta_opt=e_opt,
        channel_parameter=channel_parameter(lp.ch),
        n_pulses=n_pulses,
        n_raw=pub["n_raw"],
        n_sifted=n,
        n_rectilinear=pub["n_rect"],
        n_diagonal=n - pub["n_rect"],
        errors_corrected=pub["corrected"],
        epsilon=pub["corrected"] / n if n else 0.0,
        leak_bits=pub["leak"],
        rounds=pub["rounds"],
        multi_photon_bits=budget.multi_photon_bits,
        breidbart_bits=budget.breidbart_bits,
        bias_bits=budget.bias_bits,
        ec_leak_bits=budget.ec_leak_bits,
        safety_bits=budget.safety_bits,
        f_secret=f,
        keycheck_bits=pub["keycheck_bits"],
        keycheck=pub["keycheck"],
        final_length=pub["final_length"],
        p_sif=p_sif,
        p_sif_to_secret=p_sif_to_secret,
        p_secret=p_sif * p_sif_to_secret,
        zero_yield=f <= 0,
        usd_safe=usd_safe,
        pns_safe=pns_safe,
    )


def initial_ber_estimate(lp: LinkParams) -> float:
    if lp.tx.mu > 0 and eta_opt(lp.ch) > 0:
        est = expected_ber(lp).value
        return est if est > 0 else 1e-4
    return FALLBACK_EPS


def _budget_for(n: int, lp: LinkParams, policy: SecrecyPolicy, corrected: int, leak: int, p0: float) -> SecrecyBudget:
    eps = corrected / n if n else 0.0
    return secret_fraction(n, lp.tx.mu, eps, policy, bias=(p0, 1 - p0), ec_leak_actual=leak)


# ---------------------------------------------------------------------------
# endpoints

class _SessionEndpoint(CoroutineEndpoint):
    def __init__(self, lp: LinkParams, seed: int, policy: SecrecyPolicy, session_id: int | None = None):
        self.lp = lp
        self.seed = seed
        self.policy = policy
        self.public: dict = {}
        self.secret = SecretKey(np.zeros(0, dtype=np.uint8))
        super().__init__(session_id_for(seed) if session_id is None else session_id)

    def report(self) -> SessionReport:
        return _build_report(self.session_id, self.seed, self.lp, self.policy, self.public)

    def _finish_key(self, bits: np.ndarray, side: str) -> None:
        prov = {"session": str(self.session_id), "seed": str(self.seed), "side": side,
                "f_secret": str(self.public["budget"].f_secret)}
        self.secret = SecretKey(bits, self.session_id, prov)
        self.public["final_length"] = len(bits)


class AliceEndpoint(_SessionEndpoint):
    role = "alice"

    def __init__(self, lp, seed, policy=SecrecyPolicy(), bits=None, bases=None, session_id=None):
        if bits is None:
            outcome = simulate_transmission(lp, seed)
            bits, bases = outcome.alice_bits, outcome.alice_bases
        self.bits, self.bases = bits, bases
        super().__init__(lp, seed, policy, session_id)

    def script(self) -> Script:
        rng = _alice_rng(self.seed)
        pub = self.public
        sifted, pub["n_raw"], pub["n_rect"] = yield from alice_sift(self, self.bits, self.bases)
        rec = yield from reconcile.alice_script(self, sifted.bits, initial_ber_estimate(self.lp), rng)
        n = sifted.n
        pub.update(corrected=rec.corrected, leak=rec.key.leak_bits, rounds=rec.key.rounds)
        p0 = float(np.mean(rec.key.bits == 0)) if n else 0.5
        budget = _budget_for(n, self.lp, self.policy, rec.corrected, rec.key.leak_bits, p0)
        pub["budget"] = budget
        pa_seed = int.from_bytes(rng.bytes(16), "big")
        spec = self.msg(Kind.PA_SPEC, f_secret=budget.f_secret, pa_seed=pa_seed, budget=_budget_echo(budget))
        k = self.policy.keycheck_bits
        pub["keycheck_bits"] = k
        if budget.f_secret <= k:
            pub["keycheck"] = "skipped"
            self._finish_key(np.zeros(0, dtype=np.uint8), "alice")
            self.send_last(spec)
            return self.secret
        key = amplify(rec.key.bits, pa_seed, budget.f_secret)
        msg = self.expect((yield [spec]), Kind.KEYCHECK)
        bob_check = msg.payload["bits"]
        if len(bob_check) != k:
            raise ProtocolError("KEYCHECK has the wrong length")
        ok = bool(np.array_equal(bob_check, key[:k]))
        pub["keycheck"] = "ok" if ok else "failed"
        self._finish_key(key[k:] if ok else np.zeros(0, dtype=np.uint8), "alice")
        self.send_last(self.msg(Kind.KEYCHECK, bits=key[:k]))
        return self.secret


class BobEndpoint(_SessionEndpoint):
    role = "bob"

    def __init__(self, lp, seed, policy=SecrecyPolicy(), slots=None, detectors=None, session_id=None):
        if slots is None:
            outcome = simulate_transmission(lp, seed)
            slots, detectors = outcome.single_detections()
        self.slots = np.asarray(slots, dtype=np.int64)
        self.detectors = np.asarray(detectors, dtype=np.uint8)
        super().__init__(lp, seed, policy, session_id)

    def script(self) -> Script:
        pub = self.public
        pub["n_raw"] = len(self.slots)
        sifted, matched_msg, pub["n_rect"] = yield from bob_sift(self, self.slots, self.detectors)
        msg = yield [matched_msg]
        rec, pending = yield from reconcile.bob_script(self, sifted.bits, msg if sifted.n else None)
        if pending:
            msg = yield pending
        n = sifted.n
        pub.update(corrected=rec.corrected, leak=rec.key.leak_bits, rounds=rec.key.rounds)
        spec = self.expect(msg, Kind.PA_SPEC).payload
        budget = self._check_budget(n, rec, spec)
        pub["budget"] = budget
        k = self.policy.keycheck_bits
        pub["keycheck_bits"] = k
        if budget.f_secret <= k:
            pub["keycheck"] = "skipped"
            self._finish_key(np.zeros(0, dtype=np.uint8), "bob")
            return self.secret
        key = amplify(rec.key.bits, spec["pa_seed"], budget.f_secret)
        msg = self.expect((yield [self.msg(Kind.KEYCHECK, bits=key[:k])]), Kind.KEYCHECK)
        ok = bool(np.array_equal(msg.payload["bits"], key[:k]))
        pub["keycheck"] = "ok" if ok else "failed"
        self._finish_key(key[k:] if ok else np.zeros(0, dtype=np.uint8), "bob")
        return self.secret

    def _check_budget(self, n: int, rec, spec: dict) -> SecrecyBudget:
        """Recompute Alice's budget from public facts; only the bias figure is taken on trust."""
        echo = spec["budget"]
        if echo["n"] != n:
            raise ProtocolError("PA_SPEC budget disagrees on n")
        mine = _budget_echo(_budget_for(n, self.lp, self.policy, rec.corrected, rec.key.leak_bits, 0.5))
        for key in BUDGET_FIELDS:
            if key != "bias_bits" and not math.isclose(mine[key], echo[key], rel_tol=1e-12, abs_tol=1e-9):
                raise ProtocolError(f"PA_SPEC budget disagrees on {key}")
        if not (0 <= echo["bias_bits"] <= n):
            raise ProtocolError("PA_SPEC bias deduction out of range")
        budget = SecrecyBudget(n, echo["multi_photon_bits"], echo["breidbart_bits"], echo["bias_bits"],
                               echo["ec_leak_bits"], echo["safety_bits"], spec["f_secret"])
        expected = max(0, math.floor(n - budget.deductions)) if n else 0
        if budget.f_secret != expected:
            raise ProtocolError("PA_SPEC f_secret does not follow from the budget")
        return budget


def _budget_echo(b: SecrecyBudget) -> dict:
    return {k: getattr(b, k) for k in BUDGET_FIELDS}


# ---------------------------------------------------------------------------
# drivers

def _collect(alice: AliceEndpoint, bob: BobEndpoint):
    for ep in (alice, bob):
        if ep.error is not None:
            raise SessionError(f"{ep.role}: {ep.error}") from ep.error
        if not ep.finished:
            raise SessionError(f"{ep.role} did not finish")
    return alice.secret, bob.secret, alice.report()


def run_session(lp: LinkParams, seed: int, policy: SecrecyPolicy = SecrecyPolicy(),
                transcript: Transcript | None = None, throttle_s: float = 0.0):
    """Simulate one transmission and distil it over a loopback public channel.

    Returns ``(alice_key, bob_key, report)``.
    """
    outcome = simulate_transmission(lp, seed)
    slots, dets = outcome.single_detections()
    alice = AliceEndpoint(lp, seed, policy, outcome.alice_bits, outcome.alice_bases)
    bob = BobEndpoint(lp, seed, policy, slots, dets)
    run_loopback(alice, bob, transcript, throttle_s)
    result = _collect(alice, bob)
    if alice.report() != bob.report():
        raise SessionError("Alice and Bob disagree on the session report")
    return result


def run_tcp_endpoint(role: str, lp: LinkParams, seed: int, policy: SecrecyPolicy, host: str, port: int,
                     listen: bool, transcript: Transcript | None = None, timeout: float = 30.0):
    """Run one side of a session over TCP. Returns ``(secret_key, report)``."""
    if role == "alice":
        ep: _SessionEndpoint = AliceEndpoint(lp, seed, policy)
    elif role == "bob":
        ep = BobEndpoint(lp, seed, policy)
    else:
        raise ValueError(f"role must be alice or bob, got {role!r}")
    opener = SocketTransport.listen if listen else SocketTransport.connect
    transport = opener(host, port, timeout=timeout, transcript=transcript, name=role)
    try:
        run_endpoint(ep, transport)
    finally:
        transport.close()
    if ep.error is not None:
        raise SessionError(f"{role}: {ep.error}") from ep.error
    return ep.secret, ep.report()


def run_session_tcp(lp: LinkParams, seed: int, policy: SecrecyPolicy = SecrecyPolicy(),
                    host: str = "127.0.0.1", port: int = 0, timeout: float = 30.0):
    """Both sides in one process: Alice listens in a thread, Bob connects."""
    import socket

    if port == 0:
        with socket.socket() as probe:
            probe.bind((host, 0))
            port = probe.getsockname()[1]
    box: dict = {}

    def alice_side():
        try:
            box["alice"] = run_tcp_endpoint("alice", lp, seed, policy, host, port, listen=True, timeout=timeout)
        except Exception as exc:  # surfaced below
            box["alice_error"] = exc

    t = threading.Thread(target=alice_side, daemon=True)
    t.start()
    try:
        bob_key, bob_report = run_tcp_endpoint("bob", lp, seed, policy, host, port, listen=False, timeout=timeout)
    finally:
        t.join(timeout)
    if "alice_error" in box:
        raise box["alice_error"]
    if "alice" not in box:
        raise TransportError("alice side did not complete")
    alice_key, alice_report = box["alice"]
    if alice_report != bob_report:
        raise SessionError("Alice and Bob disagree on the session report")
    return alice_key, bob_key, alice_report


# ---------------------------------------------------------------------------
# transcript audit

# Payload fields allowed per kind. Only PARITY_REPLY and KEYCHECK may carry
# values derived from key bits.
_ALLOWED_FIELDS = {
    Kind.DETECTED_SLOTS: {"slots"},
    Kind.BASES: {"bases"},
    Kind.MATCHED_SLOTS: {"slots"},
    Kind.SHUFFLE_SEED: {"round", "word_length", "seed"},
    Kind.PARITY_REQUEST: {"round", "blocks"},
    Kind.PARITY_REPLY: {"round", "blocks", "parities"},
    Kind.ROUND_DONE: {"round", "corrected", "finished"},
    Kind.PA_SPEC: {"f_secret", "pa_seed", "budget"},
    Kind.KEYCHECK: {"bits"},
    Kind.ABORT: {"reason"},
}


@dataclass
class TranscriptLedger:
    parity_bits: int = 0
    keycheck_bits: int = 0
    messages: int = 0
    violations: list[str] | None = None

    @property
    def disclosed_bits(self) -> int:
        return self.parity_bits + self.keycheck_bits


def scan_transcript(frames) -> TranscriptLedger:
    """Passive-monitor view: count disclosed key-derived bits and flag anything else.

    ``frames`` is a ``Transcript``, an iterable of frames, or the raw bytes of a
    transcript file.
    """
    if isinstance(frames, Transcript):
        frames = [f for _, f in frames.frames]
    elif isinstance(frames, (bytes, bytearray)):
        frames = list(iter_frames(bytes(frames)))
    ledger = TranscriptLedger(violations=[])
    seen_parities: set[tuple] = set()
    for frame in frames:
        msg = decode(frame)
        ledger.messages += 1
        extra = set(msg.payload) - _ALLOWED_FIELDS[msg.kind]
        if extra:
            ledger.violations.append(f"{msg.kind.name} carries unexpected fields {sorted(extra)}")
        if msg.kind == Kind.PARITY_REPLY:
            for block in msg.payload["blocks"]:
                key = (msg.payload["round"], *block)
                if key in seen_parities:
                    ledger.violations.append(f"parity {key} disclosed twice")
                seen_parities.add(key)
            ledger.parity_bits += len(msg.payload["parities"])
        elif msg.kind == Kind.KEYCHECK:
            ledger.keycheck_bits += len(msg.payload["bits"])
    return ledger
