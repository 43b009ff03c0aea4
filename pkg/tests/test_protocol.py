import math
from collections import deque
from dataclasses import replace

import numpy as np
import pytest

from fsqkd.model import binary_entropy
from fsqkd.privacy import SecrecyPolicy
from fsqkd.protocol.endpoint import ProtocolAbort, ProtocolError
from fsqkd.protocol.session import (
    AliceEndpoint,
    BobEndpoint,
    SessionError,
    SessionReport,
    run_session,
    run_session_tcp,
    run_sift,
    scan_transcript,
)
from fsqkd.protocol.transport import Transcript
from fsqkd.protocol.wire import Kind, Message, decode, encode
from fsqkd.sim import TransmissionOutcome, simulate_transmission

from conftest import link


def fixture_outcome():
    """8 detected slots; Bob's basis agrees with Alice's on slots 0, 2, 5, 7."""
    alice_bits = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], dtype=np.uint8)
    alice_bases = np.array([0, 1, 1, 0, 0, 1, 0, 1, 0, 0], dtype=np.uint8)
    det_slots = np.array([0, 1, 2, 3, 5, 6, 7, 8], dtype=np.uint32)
    bob_basis = np.array([0, 0, 1, 1, 1, 1, 1, 1], dtype=np.uint8)
    bob_bit = np.array([1, 1, 1, 0, 1, 1, 0, 1], dtype=np.uint8)
    masks = (1 << (2 * bob_basis + bob_bit)).astype(np.uint8)
    return TransmissionOutcome(link(clock=10), 0, alice_bits, alice_bases, det_slots, masks)


def test_sift_hand_built_fixture():
    a, b = run_sift(fixture_outcome())
    assert a.n == b.n == 4
    assert a.slots.tolist() == b.slots.tolist() == [0, 2, 5, 7]
    assert a.bits.tolist() == [1, 1, 0, 0]
    assert b.bits.tolist() == [1, 1, 1, 0]  # slot 5 is a sifted error


def test_sift_empty():
    out = simulate_transmission(link(mu=0.0, c=0.0, clock=1000), 0)
    a, b = run_sift(out)
    assert a.n == b.n == 0


def test_sift_transcript_order_and_content():
    tr = Transcript()
    out = simulate_transmission(link(), 1)
    a, b = run_sift(out, tr)
    msgs = tr.messages()
    assert [(s, m.kind) for s, m in msgs] == [
        ("bob", Kind.DETECTED_SLOTS), ("alice", Kind.BASES), ("bob", Kind.MATCHED_SLOTS)]
    single_slots, _ = out.single_detections()
    assert msgs[0][1].payload["slots"].tolist() == single_slots.tolist()
    assert len(msgs[1][1].payload["bases"]) == len(single_slots)
    assert np.array_equal(a.slots, b.slots)


def test_sifted_fraction_about_half_without_background():
    lp = link(mu=0.4, eta_opt=0.1, c=0.0, clock=200_000)
    raw = sifted = 0
    for seed in range(100):
        out = simulate_transmission(lp, seed)
        a, _ = run_sift(out)
        raw += len(out.single_detections()[0])
        sifted += a.n
    assert abs(sifted - raw / 2) < 3 * math.sqrt(raw / 4)


def test_table1_session_report_consistent():
    alice, bob, rep = run_session(link(), 11)
    assert np.array_equal(alice.bits, bob.bits)
    assert rep.keycheck == "ok"
    assert rep.final_length == alice.length == rep.f_secret - 16
    assert rep.n_rectilinear + rep.n_diagonal == rep.n_sifted
    assert rep.p_secret == pytest.approx(rep.p_sif * rep.p_sif_to_secret)
    assert rep.budget().is_conserved()
    assert rep.eta_opt == pytest.approx(0.024)


def test_session_deterministic():
    a1, b1, r1 = run_session(link(), 5)
    a2, b2, r2 = run_session(link(), 5)
    assert r1.to_text() == r2.to_text()
    assert np.array_equal(a1.bits, a2.bits)
    _, _, r3 = run_session(link(), 6)
    assert r3 != r1


def test_zero_yield_full_daylight_at_threshold():
    # mu = 0.49 and eta_opt / C = 0.0008
    alice, bob, rep = run_session(link(mu=0.49, eta_opt=0.04, c=50.0), 3)
    assert rep.zero_yield and rep.f_secret == 0
    assert alice.length == bob.length == 0
    assert rep.p_secret == 0 and rep.p_sif_to_secret == 0
    assert rep.keycheck == "skipped"


def test_error_free_channel_budget():
    alice, bob, rep = run_session(link(mu=0.1, eta_opt=0.3, c=0.0), 2)
    n = rep.n_sifted
    assert rep.epsilon == 0 and rep.errors_corrected == 0
    assert rep.leak_bits < 0.05 * n
    expected = math.floor(n - n * 0.1 - rep.bias_bits - rep.leak_bits - 20)
    assert rep.f_secret == expected
    assert alice.length == expected - 16


def test_no_detections_session():
    alice, bob, rep = run_session(link(mu=0.0, c=0.0, clock=1000), 0)
    assert rep.n_sifted == 0 and rep.zero_yield and alice.length == 0


def test_report_text_round_trip():
    _, _, rep = run_session(link(), 8)
    text = rep.to_text()
    assert SessionReport.from_text(text) == rep
    assert "keycheck = ok" in text and "zero_yield = false" in text


def test_transcript_audit_and_leak_ledger(tmp_path):
    path = tmp_path / "t.bin"
    tr = Transcript(path)
    _, _, rep = run_session(link(), 4, transcript=tr)
    tr.close()
    ledger = scan_transcript(path.read_bytes())
    assert ledger.violations == []
    assert ledger.parity_bits == rep.leak_bits == rep.ec_leak_bits
    assert ledger.keycheck_bits == 2 * rep.keycheck_bits
    assert ledger.messages == len(tr.frames)


def test_public_messages_independent_of_key_values():
    """Flip every key bit on both sides: only parity and check-bit values may change."""
    out = simulate_transmission(link(), 9)
    slots, dets = out.single_detections()
    flipped_bits = out.alice_bits ^ 1
    flipped_dets = dets ^ 1
    transcripts = []
    for bits, d in ((out.alice_bits, dets), (flipped_bits, flipped_dets)):
        tr = Transcript()
        a = AliceEndpoint(out.link, 9, bits=bits, bases=out.alice_bases)
        b = BobEndpoint(out.link, 9, slots=slots, detectors=d)
        from fsqkd.protocol.transport import run_loopback
        run_loopback(a, b, tr)
        assert a.error is None and b.error is None
        transcripts.append(tr.messages())
    assert len(transcripts[0]) == len(transcripts[1])
    for (s1, m1), (s2, m2) in zip(*transcripts):
        assert (s1, m1.kind) == (s2, m2.kind)
        if m1.kind in (Kind.PARITY_REPLY, Kind.KEYCHECK):
            continue
        assert encode(m1) == encode(m2)


def pump(alice, bob, tamper):
    """Loopback pump that lets a test rewrite messages in flight."""
    queue = deque([("alice", m) for m in alice.start()] + [("bob", m) for m in bob.start()])
    while queue:
        sender, msg = queue.popleft()
        msg = tamper(sender, decode(encode(msg)))
        target, name = (bob, "bob") if sender == "alice" else (alice, "alice")
        if not target.finished:
            queue.extend((name, m) for m in target.handle(msg))


def endpoints(seed=4):
    out = simulate_transmission(link(), seed)
    slots, dets = out.single_detections()
    return (AliceEndpoint(out.link, seed, bits=out.alice_bits, bases=out.alice_bases),
            BobEndpoint(out.link, seed, slots=slots, detectors=dets))


def test_budget_tamper_aborts():
    alice, bob = endpoints()

    def tamper(sender, msg):
        if msg.kind == Kind.PA_SPEC:
            msg.payload["f_secret"] += 5
        return msg

    pump(alice, bob, tamper)
    assert isinstance(bob.error, ProtocolError) and "f_secret" in str(bob.error)
    assert isinstance(alice.error, ProtocolAbort)


def test_leak_tamper_aborts():
    alice, bob = endpoints()

    def tamper(sender, msg):
        if msg.kind == Kind.PA_SPEC:
            msg.payload["budget"]["ec_leak_bits"] -= 10
        return msg

    pump(alice, bob, tamper)
    assert isinstance(bob.error, ProtocolError)


def test_keycheck_mismatch_destroys_keys():
    alice, bob = endpoints()

    def tamper(sender, msg):
        if msg.kind == Kind.PA_SPEC:
            msg.payload["pa_seed"] ^= 1  # Bob amplifies with different subsets
        return msg

    pump(alice, bob, tamper)
    assert alice.error is None and bob.error is None
    assert alice.public["keycheck"] == bob.public["keycheck"] == "failed"
    assert alice.secret.length == bob.secret.length == 0
    assert alice.report() == bob.report()


def test_out_of_order_and_wrong_session_abort():
    alice, bob = endpoints()
    alice.start()
    reply = alice.handle(Message(Kind.DETECTED_SLOTS, {"slots": np.array([1, 2])}, alice.session_id, seq=2))
    assert reply[0].kind == Kind.ABORT and "sequence" in reply[0].payload["reason"]

    alice, bob = endpoints()
    alice.start()
    reply = alice.handle(Message(Kind.DETECTED_SLOTS, {"slots": np.array([1])}, alice.session_id + 1, seq=1))
    assert reply[0].kind == Kind.ABORT and alice.finished


def test_unexpected_kind_aborts():
    alice, _ = endpoints()
    alice.start()
    reply = alice.handle(Message(Kind.KEYCHECK, {"bits": np.zeros(16, np.uint8)}, alice.session_id, seq=1))
    assert reply[0].kind == Kind.ABORT
    assert "expected DETECTED_SLOTS" in str(alice.error)


def test_bad_bases_length_aborts():
    _, bob = endpoints()
    bob.start()
    reply = bob.handle(Message(Kind.BASES, {"bases": np.zeros(3, np.uint8)}, bob.session_id, seq=1))
    assert reply[0].kind == Kind.ABORT


def test_tcp_matches_loopback():
    lp = link()
    a1, b1, r1 = run_session(lp, 21)
    a2, b2, r2 = run_session_tcp(lp, 21)
    assert r1.to_text() == r2.to_text()
    assert np.array_equal(a1.bits, a2.bits) and np.array_equal(b1.bits, b2.bits)


def test_policy_changes_budget():
    _, _, r20 = run_session(link(), 13)
    _, _, r0 = run_session(link(), 13, SecrecyPolicy(safety_s=0))
    assert r0.f_secret == r20.f_secret + 20
