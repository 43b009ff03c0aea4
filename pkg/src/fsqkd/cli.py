"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 transport failure, 3 protocol abort,
4 key-check failure, 5 randomness test failed or one-time pad refused.
"""
from __future__ import annotations

import argparse
import configparser
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .keys import read_key_file, write_key_file
from .model import LinkParams, Preset, get_preset, load_presets
from .privacy import SecrecyPolicy
from .protocol.endpoint import ProtocolAbort, ProtocolError
from .protocol.session import SessionError, SessionReport, run_session, run_tcp_endpoint
from .protocol.transport import Transcript, TransportError
from .randcheck import format_report, minimum_bits, run_battery
from .security import min_channel_parameter, scaled_secrecy_surface, write_surface_csv, yield_region
from .sim import background_error_counts, jittered_link, make_rng, simulate_transmission

EXIT_OK, EXIT_USAGE, EXIT_TRANSPORT, EXIT_ABORT, EXIT_KEYCHECK, EXIT_FAILED = range(6)

# Config keys that mirror the session flags.
_CONFIG_KEYS = {
    "preset": str, "mu": float, "eta_geo": float, "c": float, "runs": int, "seed": int,
    "transport": str, "listen": str, "connect": str, "role": str, "policy_s": float,
    "out_dir": str, "jitter": str,
}
_DEFAULTS = {"preset": "table1", "runs": 1, "seed": 0, "transport": "loopback", "policy_s": 20.0,
             "out_dir": "fsqkd_out", "jitter": "on"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_link_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [session] section mirroring the flags")
    p.add_argument("--preset", help="channel preset name (see `fsqkd presets`)")
    p.add_argument("--mu", type=float, help="mean photon number per pulse")
    p.add_argument("--eta-geo", type=float, help="geometric collection efficiency")
    p.add_argument("--c", type=float, help="background parameter C")
    p.add_argument("--runs", type=int, help="number of 1-s transmissions")
    p.add_argument("--seed", type=int, help="base seed; run i uses seed + i")


def _resolve(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides the defaults."""
    cfg: dict = dict(_DEFAULTS)
    if getattr(args, "config", None):
        parser = configparser.ConfigParser(interpolation=None)
        if not parser.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        if "session" not in parser:
            raise UsageError(f"{args.config} has no [session] section")
        for key, value in parser["session"].items():
            if key not in _CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            try:
                cfg[key] = _CONFIG_KEYS[key](value)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["runs"] < 1:
        raise UsageError("--runs must be positive")
    return cfg


def _preset_from(cfg: dict) -> Preset:
    try:
        preset = get_preset(cfg["preset"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    lp = preset.link
    try:
        if cfg.get("mu") is not None:
            lp = lp.with_mu(cfg["mu"])
        if cfg.get("eta_geo") is not None:
            lp = lp.with_channel(eta_geo=cfg["eta_geo"])
        if cfg.get("c") is not None:
            lp = lp.with_channel(background_c=cfg["c"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return replace(preset, link=lp)


def run_links(preset: Preset, seed: int, runs: int, jitter: bool = True) -> list[LinkParams]:
    """Per-run link parameters; jitter draws depend only on (seed, run index)."""
    out = []
    for i in range(runs):
        if jitter and (preset.eta_geo_sigma > 0 or preset.mu_sigma > 0 or preset.c_sigma > 0):
            rng = make_rng([seed, i, 0x717])
            out.append(jittered_link(preset.link, rng, preset.eta_geo_sigma, preset.mu_sigma, preset.c_sigma))
        else:
            out.append(preset.link)
    return out


def _hostport(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# aggregate statistics

AGGREGATE_FIELDS = ("mu", "eta_opt", "channel_parameter", "p_sif", "epsilon", "p_secret")


def aggregate(reports: list[SessionReport]) -> dict:
    out: dict = {"runs": len(reports)}
    for name in AGGREGATE_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        out[f"{name}_mean"] = float(vals.mean())
        out[f"{name}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    out["zero_yield_runs"] = sum(r.zero_yield for r in reports)
    out["keycheck_failures"] = sum(r.keycheck == "failed" for r in reports)
    out["sifted_bits_total"] = sum(r.n_sifted for r in reports)
    out["secret_bits_total"] = sum(r.final_length for r in reports)
    return out


def format_aggregate(agg: dict) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in agg.items())


# ---------------------------------------------------------------------------
# commands

def cmd_session(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    preset = _preset_from(cfg)
    policy = SecrecyPolicy(safety_s=cfg["policy_s"])
    links = run_links(preset, cfg["seed"], cfg["runs"], jitter=cfg["jitter"] != "off")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    transport = cfg["transport"]
    if transport not in ("loopback", "tcp"):
        raise UsageError("--transport must be loopback or tcp")
    if transport == "tcp":
        if cfg.get("role") not in ("alice", "bob"):
            raise UsageError("tcp transport needs --role alice|bob")
        if bool(cfg.get("listen")) == bool(cfg.get("connect")):
            raise UsageError("tcp transport needs exactly one of --listen or --connect")
        listen = bool(cfg.get("listen"))
        host, port = _hostport(cfg["listen"] if listen else cfg["connect"])
    sides = ("alice", "bob") if transport == "loopback" else (cfg["role"],)

    reports: list[SessionReport] = []
    keys = {side: [] for side in sides}
    with open(out_dir / "reports.txt", "w") as rep_fh:
        for i, lp in enumerate(links):
            seed = cfg["seed"] + i
            transcript = Transcript(out_dir / f"transcript_{i:04d}.bin") if args.transcripts else None
            try:
                if transport == "loopback":
                    a, b, report = run_session(lp, seed, policy, transcript)
                    got = {"alice": a, "bob": b}
                else:
                    key, report = run_tcp_endpoint(cfg["role"], lp, seed, policy, host, port, listen,
                                                   transcript)
                    got = {cfg["role"]: key}
            except TransportError as exc:
                print(f"run {i}: transport failure: {exc}", file=sys.stderr)
                return EXIT_TRANSPORT
            except (SessionError, ProtocolError, ProtocolAbort) as exc:
                print(f"run {i}: protocol abort: {exc}", file=sys.stderr)
                return EXIT_ABORT
            finally:
                if transcript is not None:
                    transcript.close()
            reports.append(report)
            for side in sides:
                keys[side].append(got[side].bits)
            rep_fh.write(f"[session {i}]\n{report.to_text()}\n")

    agg = aggregate(reports)
    (out_dir / "aggregate.txt").write_text(format_aggregate(agg))
    for side in sides:
        bits = np.concatenate(keys[side]) if keys[side] else np.zeros(0, dtype=np.uint8)
        write_key_file(out_dir / f"{side}.key", bits,
                       {"side": side, "preset": preset.name, "seed": str(cfg["seed"]), "runs": str(cfg["runs"])})
    print(format_aggregate(agg), end="")
    return EXIT_KEYCHECK if agg["keycheck_failures"] else EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    preset = _preset_from(cfg)
    lp = preset.link.with_mu(0.0)
    counts = np.array([background_error_counts(simulate_transmission(lp, cfg["seed"] + i))
                       for i in range(cfg["runs"])], dtype=float)
    per_run_c = counts.mean(axis=1)
    print(f"preset = {preset.name}")
    print(f"background_c_configured = {lp.ch.background_c}")
    print(f"runs = {cfg['runs']}")
    for d in range(4):
        print(f"detector_{d}_mean_errors = {float(counts[:, d].mean())!r}")
    print(f"c_hat_mean = {float(per_run_c.mean())!r}")
    print(f"c_hat_std = {float(per_run_c.std(ddof=1)) if len(per_run_c) > 1 else 0.0!r}")
    return EXIT_OK


def cmd_surface(args: argparse.Namespace) -> int:
    if args.point:
        mus, xs = [args.point[0]], [args.point[1]]
    else:
        if not (0 < args.mu_min <= args.mu_max < 1) or args.mu_step <= 0:
            raise UsageError("need 0 < mu-min <= mu-max < 1 and mu-step > 0")
        if not (0 < args.x_min <= args.x_max) or args.x_points < 1:
            raise UsageError("need 0 < x-min <= x-max and x-points >= 1")
        mus = np.round(np.arange(args.mu_min, args.mu_max + args.mu_step / 2, args.mu_step), 10)
        xs = np.geomspace(args.x_min, args.x_max, args.x_points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    points = scaled_secrecy_surface(mus, xs, background_c=args.c)
    write_surface_csv(points, out)
    regions_path = out.with_name(out.stem + "_regions.csv")
    with open(regions_path, "w") as fh:
        fh.write("eta_opt_over_c,mu_min,mu_max,mu_opt,peak_rate\n")
        for x in xs:
            r = yield_region(float(x))
            cells = [repr(float(x))] + ["" if v is None else repr(v) for v in (r.mu_min, r.mu_max, r.mu_opt)]
            fh.write(",".join(cells + [repr(r.peak_rate)]) + "\n")
    th = min_channel_parameter()
    print(f"surface = {out}")
    print(f"regions = {regions_path}")
    print(f"threshold_eta_opt_over_c = {th.channel_parameter_min!r}")
    print(f"threshold_mu = {th.mu_star!r}")
    if args.point:
        p = points[0]
        print(f"p_sif_to_secret = {p.p_sif_to_secret!r}")
        print(f"p_secret_over_eta_opt = {p.p_secret_over_eta_opt!r}")
    return EXIT_OK


def cmd_keytest(args: argparse.Namespace) -> int:
    _, bits = read_key_file(args.key)
    need = minimum_bits()
    if len(bits) < need["fips"]:
        print(f"{args.key}: {len(bits)} bits; FIPS 140-2 needs {need['fips']} bits, "
              f"Maurer L=5 needs {need['maurer']} bits", file=sys.stderr)
        return EXIT_USAGE
    rep = run_battery(bits)
    print(format_report(rep, args.allow_chunk_failures), end="")
    return EXIT_OK if rep.passed(args.allow_chunk_failures) else EXIT_FAILED


def cmd_otp(args: argparse.Namespace) -> int:
    from .otp import PadError, decrypt, encrypt

    data = Path(args.input).read_bytes()
    try:
        out = encrypt(data, args.key) if args.action == "encrypt" else decrypt(data, args.key)
    except PadError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_FAILED
    Path(args.output).write_bytes(out)
    return EXIT_OK


def cmd_presets(args: argparse.Namespace) -> int:
    for name, p in load_presets().items():
        lp = p.link
        print(f"{name}: mu={lp.tx.mu} eta_geo={lp.ch.eta_geo} C={lp.ch.background_c} "
              f"eta_geo_sigma={p.eta_geo_sigma} mu_sigma={p.mu_sigma} c_sigma={p.c_sigma}  {p.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsqkd", description="Free-space BB84 key distribution simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("session", help="run key-distribution sessions")
    _add_link_flags(p)
    p.add_argument("--transport", choices=("loopback", "tcp"))
    p.add_argument("--role", choices=("alice", "bob"), help="this process's side in tcp mode")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--listen", metavar="HOST:PORT")
    grp.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--policy-s", type=float, help="safety margin s in bits")
    p.add_argument("--out-dir")
    p.add_argument("--jitter", choices=("on", "off"), help="per-run eta_geo/mu jitter from the preset")
    p.add_argument("--transcripts", action="store_true", help="write each session's public transcript")
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("calibrate", help="estimate C from mu = 0 runs")
    _add_link_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("surface", help="secrecy-efficiency surface and yield regions as CSV")
    p.add_argument("--mu-min", type=float, default=0.01)
    p.add_argument("--mu-max", type=float, default=0.99)
    p.add_argument("--mu-step", type=float, default=0.01)
    p.add_argument("--x-min", type=float, default=1e-4, help="smallest eta_opt/C")
    p.add_argument("--x-max", type=float, default=1.0)
    p.add_argument("--x-points", type=int, default=41)
    p.add_argument("--point", type=float, nargs=2, metavar=("MU", "X"), help="evaluate a single point")
    p.add_argument("--c", type=float, help="background C, enables the attack-flag columns")
    p.add_argument("--out", default="surface.csv")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("keytest", help="FIPS 140-2 and Maurer tests on a key file")
    p.add_argument("key")
    p.add_argument("--allow-chunk-failures", type=int, default=1)
    p.set_defaults(func=cmd_keytest)

    p = sub.add_parser("otp", help="one-time-pad encrypt or decrypt a file")
    p.add_argument("action", choices=("encrypt", "decrypt"))
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_otp)

    p = sub.add_parser("presets", help="list channel presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fsqkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"fsqkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
