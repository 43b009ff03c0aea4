"""Acceptance criteria, one test each.

Every test prints one ``[criterion N] PASS|FAIL`` line with the measured
values; the lines are also collected and repeated in the pytest terminal
summary. Run ``python3 tests/test_acceptance.py`` to get just the lines.
"""
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fsqkd.keys import SiftedKey, SecretKey, write_key_file
from fsqkd.model import (
    binary_entropy,
    channel_parameter,
    expected_ber,
    get_preset,
    load_presets,
    receiver_factor_d,
    ReceiverParams,
    sift_probability,
)
from fsqkd.otp import PadError, decrypt, encrypt
from fsqkd.privacy import amplify, key_check
from fsqkd.protocol.session import run_session, run_session_tcp, scan_transcript
from fsqkd.protocol.transport import Transcript
from fsqkd.randcheck import fips_140_2, maurer_universal, run_battery
from fsqkd.reconcile import correct
from fsqkd.security import (
    BASE_RANGE_KM,
    attack_flags,
    max_range_km,
    min_channel_parameter,
    scaled_secrecy_surface,
    usd_loss_tolerance_db,
)

RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)


def within(value, target, rel):
    return abs(value - target) <= rel * target


# ---------------------------------------------------------------------------

def criterion_1():
    lp = get_preset("table1").link
    t0 = time.perf_counter()
    reports = [run_session(lp, seed)[2] for seed in range(100)]
    elapsed = time.perf_counter() - t0
    raw = np.mean([r.n_raw for r in reports])
    sifted = np.mean([r.n_sifted for r in reports])
    errors = np.mean([r.errors_corrected for r in reports])
    final = np.mean([r.final_length for r in reports])
    checks = {
        "raw": within(raw, 1349, 0.05),
        "sifted": within(sifted, 651, 0.05),
        "errors": within(errors, 21, 0.20),
        "final": 225 <= final <= 275,
        "runtime": elapsed < 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"raw {raw:.1f} (1349 +-5%), sifted {sifted:.1f} (651 +-5%), errors {errors:.2f} (21 +-20%), "
              f"final {final:.1f} in [225, 275], {elapsed:.1f} s for 100 sessions"
              + (f"; out of tolerance: {', '.join(failed)}" if failed else ""))
    return not failed, detail


def criterion_2():
    d = receiver_factor_d(ReceiverParams())
    day = get_preset("day_4oct").link
    night = get_preset("night_4oct").link
    p_day, p_night = sift_probability(day), sift_probability(night)
    ber = expected_ber(night).value
    ok = (within(d, 4.65e-5, 0.005)
          and abs(p_day - 1.9e-3) <= 0.8e-3
          and abs(p_night - 0.82e-3) <= 0.21e-3
          and abs(ber - 0.020) <= 0.005)
    return ok, (f"D {d:.4e} (4.65e-5 +-0.5%), P_sif day {p_day:.3e} ((1.9+-0.8)e-3), "
                f"night {p_night:.3e} ((0.82+-0.21)e-3), night BER {100 * ber:.2f}% (2.0 +-0.5%)")


def _grid_oracle_threshold():
    d = receiver_factor_d(ReceiverParams())
    mus = np.arange(1, 1000) * 1e-3
    xs = np.arange(1000, 3000) * 1e-6  # 1e-3 relative resolution around the threshold
    eps = np.minimum(d / (mus[None, :] * xs[:, None]), 0.5)
    h = -eps * np.log2(eps) - (1 - eps) * np.log2(1 - eps)
    rate = 1 - mus[None, :] - 4 * eps * np.log2(1.5) - 1.19 * h
    i = int(np.argmax(rate.max(axis=1) > 0))
    return xs[i], mus[int(np.argmax(rate[i]))]


def criterion_3():
    t = min_channel_parameter()
    x_oracle, mu_oracle = _grid_oracle_threshold()
    ok = (within(t.channel_parameter_min, 0.0016, 0.10)
          and abs(t.mu_star - 0.45) <= 0.05
          and 0.05 <= t.eps_star <= 0.07
          and abs(t.channel_parameter_min - x_oracle) <= 2e-6
          and abs(t.mu_star - mu_oracle) <= 2e-3)
    return ok, (f"(eta_opt/C)_min {t.channel_parameter_min:.6f} (oracle {x_oracle:.6f}), "
                f"mu* {t.mu_star:.4f} (oracle {mu_oracle:.3f}), eps* {100 * t.eps_star:.2f}%")


def criterion_4():
    rng = np.random.default_rng(2024)
    n = 10_000
    parts, ok = [], True
    for eps in (0.01, 0.03, 0.05):
        ratios, equal, caught = [], 0, 0
        for trial in range(50):
            a = rng.integers(0, 2, n, dtype=np.uint8)
            b = a ^ (rng.random(n) < eps).astype(np.uint8)
            slots = np.arange(n)
            ka, kb = correct(SiftedKey(a, slots, "alice"), SiftedKey(b, slots, "bob"),
                             eps_estimate=eps, seed=trial)
            ratios.append(kb.leak_bits / (n * binary_entropy(kb.epsilon_measured)))
            if np.array_equal(ka.bits, kb.bits):
                equal += 1
            else:
                sa, sb = (SecretKey(amplify(k.bits, trial, 1000)) for k in (ka, kb))
                caught += not key_check(sa, sb)[2]
        mean = float(np.mean(ratios))
        good = 1.05 <= mean <= 1.35 and equal >= 49 and equal + caught == 50
        ok &= good
        parts.append(f"eps {eps:.0%}: leak/nf {mean:.3f}, equal {equal}/50, residual caught {caught}")
    return ok, "; ".join(parts) + " (ratio in [1.05, 1.35], >= 49/50 equal)"


def criterion_5():
    presets = load_presets()
    cases = [(presets[name].link, seed) for name in ("table1", "night_4oct", "reduced_daylight")
             for seed in range(20)]
    cases += [(presets["full_daylight"].link, s) for s in range(5)]
    conserved = leak_match = 0
    for lp, seed in cases:
        tr = Transcript()
        _, _, rep = run_session(lp, seed, transcript=tr)
        conserved += rep.budget().is_conserved()
        ledger = scan_transcript(tr)
        leak_match += ledger.parity_bits == rep.ec_leak_bits and not ledger.violations
    ok = conserved == leak_match == len(cases)
    return ok, (f"{conserved}/{len(cases)} sessions with f_secret + deductions = n exactly, "
                f"{leak_match}/{len(cases)} with transcript parity bits = ec_leak_bits")


def criterion_6():
    usd_05, usd_015 = usd_loss_tolerance_db(0.5), usd_loss_tolerance_db(0.15)
    rng = np.random.default_rng(6)
    mu = rng.uniform(1e-6, 1.0, 10**6)
    e = rng.uniform(1e-9, 1.0, 10**6)
    pns_safe = ~(mu > 2 * e)
    usd_safe = ~(mu * mu / 32 > e)
    violations = int(np.sum(pns_safe & ~usd_safe))
    # The same sample through the library function, on a 10^4 subset for speed.
    lib_violations = 0
    for m, x in zip(mu[:10_000], e[:10_000]):
        f = attack_flags(float(m), float(x))
        lib_violations += f.pns_safe and not f.usd_safe
    ok = abs(usd_05 - 21.1) <= 0.5 and abs(usd_015 - 31.5) <= 0.5 and violations == lib_violations == 0
    return ok, (f"USD tolerance {usd_05:.2f} dB at mu 0.5 (21.1 +-0.5), {usd_015:.2f} dB at mu 0.15 "
                f"(31.5 +-0.5), pns_safe and not usd_safe: {violations} of 10^6")


def criterion_7():
    mus = np.round(np.arange(1, 1000) * 1e-3, 6)
    xs = [1e-4, 5e-4, 1e-3, 0.0015, 0.0016, 0.01, 0.05, 0.1]
    pts = scaled_secrecy_surface(mus, xs)
    zero_ok, argmax = True, {}
    for x in xs:
        vals = np.array([p.p_secret_over_eta_opt for p in pts if p.channel_parameter == x])
        if x < 0.0016 or x == 0.0016:
            zero_ok &= bool(np.all(vals == 0))
        else:
            argmax[x] = float(mus[int(np.argmax(vals))])
    (night,) = scaled_secrecy_surface([0.14], [0.017])
    p_secret = night.p_secret_over_eta_opt * 0.066
    ok = zero_ok and all(0.4 <= m <= 0.6 for m in argmax.values()) and abs(p_secret - 4.2e-4) <= 1.4e-4
    peaks = ", ".join(f"{m:.3f} at {x}" for x, m in argmax.items())
    return ok, (f"rows below 0.0016 all zero: {zero_ok}; mu maximizer {peaks} (in [0.4, 0.6]); "
                f"night P_secret {p_secret:.3e} ((4.2 +-1.4)e-4)")


_KEY_CACHE: dict = {}


def simulated_secret_key(nbits: int = 160_000) -> np.ndarray:
    """Concatenated verified secret keys from reduced-daylight sessions."""
    if nbits not in _KEY_CACHE:
        lp = get_preset("reduced_daylight").link
        chunks, total, seed = [], 0, 0
        while total < nbits:
            a, _, _ = run_session(lp, 10_000 + seed)
            chunks.append(a.bits)
            total += a.length
            seed += 1
        _KEY_CACHE[nbits] = (np.concatenate(chunks)[:nbits], seed)
    return _KEY_CACHE[nbits]


def criterion_8():
    bits, sessions = simulated_secret_key(160_000)
    rep = run_battery(bits)
    zeros = fips_140_2(np.zeros(20_000, np.uint8))
    alt = fips_140_2(np.tile(np.array([0, 1], np.uint8), 10_000))
    controls = (set(zeros.failed_tests()) == {"monobit", "poker", "runs", "long_run"}
                and {"poker", "runs"} <= set(alt.failed_tests())
                and not maurer_universal(np.zeros(160_000, np.uint8)).passed
                and not maurer_universal(np.tile(np.array([0, 1], np.uint8), 80_000)).passed)
    m = rep.maurer
    ok = rep.passed(1) and controls
    return ok, (f"{len(bits)} key bits from {sessions} sessions: FIPS chunk failures {rep.failed_chunks}/"
                f"{len(rep.chunks)} (<= 1), Maurer L=5 statistic {m.statistic:.5f} in "
                f"[{m.threshold[0]:.5f}, {m.threshold[1]:.5f}]: {m.passed}; controls fail as documented: {controls}")


def criterion_9(tmp_dir: Path):
    bits, _ = simulated_secret_key(160_000)
    key = tmp_dir / "pad.key"
    write_key_file(key, bits, {"source": "simulated sessions"})
    message = np.random.default_rng(9).integers(0, 256, 157_920 // 8, dtype=np.uint8).tobytes()
    ct = encrypt(message, key)
    round_trip = decrypt(ct, key) == message
    refused = 0
    for attempt in (lambda: decrypt(ct, key), lambda: encrypt(b"x" * 1000, key)):
        try:
            attempt()
        except PadError:
            refused += 1
    ok = round_trip and refused == 2
    return ok, f"157920-bit message round trip exact: {round_trip}; reuse attempts refused: {refused}/2"


def criterion_10():
    presets = load_presets()
    thr = min_channel_parameter().channel_parameter_min
    ranges, agree = {}, True
    grid = np.arange(1, 200_000) * 1e-3  # 1 m steps out to 200 km
    for name in ("full_daylight", "reduced_daylight", "night"):
        ch = presets[name].link.ch
        r = max_range_km(ch, thr)
        x = (ch.eta_trans ** (grid / BASE_RANGE_KM)
             * np.minimum(1.0, ch.eta_geo * (BASE_RANGE_KM / grid) ** 2) / ch.background_c)
        r_oracle = float(grid[np.argmax(x < thr)])
        agree &= abs(r - r_oracle) <= 0.01 * r_oracle
        ranges[name] = r
    order = ranges["night"] > ranges["reduced_daylight"] > ranges["full_daylight"]
    listing = ", ".join(f"{k} {v:.2f} km" for k, v in ranges.items())
    return order and agree, f"{listing}; ordering holds: {order}; solver within 1% of scan oracle: {agree}"


def criterion_11():
    presets = load_presets()
    cases = [(presets["table1"].link, 1), (presets["night_4oct"].link, 2), (presets["full_daylight"].link, 3)]
    same = 0
    for lp, seed in cases:
        a1, b1, r1 = run_session(lp, seed)
        a2, b2, r2 = run_session_tcp(lp, seed)
        same += (r1.to_text().encode() == r2.to_text().encode()
                 and np.array_equal(a1.bits, a2.bits) and np.array_equal(b1.bits, b2.bits))
    return same == len(cases), f"{same}/{len(cases)} sessions byte-identical over loopback and TCP"


# ---------------------------------------------------------------------------

CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 10: criterion_10, 11: criterion_11}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = CRITERIA[n]()
    record(n, ok, detail)
    assert ok, detail


def test_criterion_9(tmp_path):
    ok, detail = criterion_9(tmp_path)
    record(9, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failures = 0
    for n in range(1, 12):
        if n == 9:
            with tempfile.TemporaryDirectory() as d:
                ok, detail = criterion_9(Path(d))
        else:
            ok, detail = CRITERIA[n]()
        record(n, ok, detail)
        failures += not ok
    sys.exit(1 if failures else 0)
