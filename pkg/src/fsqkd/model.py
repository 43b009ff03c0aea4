"""Link parameters and closed-form link-budget formulas.

Everything here is a pure function of the parameter dataclasses. Efficiencies
are validated once, at construction, so the formulas never see NaNs or
out-of-range values.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

# Background-limited sift error per unit (mu * eta_opt) is D * C; D is this
# numerator over the receiver's internal efficiencies.
D_NUMERATOR = 4e-6


def _check_unit_interval(name: str, value: float, *, closed_low: bool = False) -> None:
    if not isinstance(value, (int, float)) or math.isnan(value):
        raise ValueError(f"{name} must be a number, got {value!r}")
    low_ok = value >= 0 if closed_low else value > 0
    if not (low_ok and value <= 1):
        bounds = "[0, 1]" if closed_low else "(0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {value}")


@dataclass(frozen=True)
class TransmitterParams:
    """Alice's source: Poisson mean photon number, clock, polarization error."""

    mu: float
    clock_rate_hz: int = 1_000_000
    misalignment_error: float = 0.0

    def __post_init__(self) -> None:
        # mu = 0 is allowed for background calibration runs.
        if not (0 <= self.mu < 1) or math.isnan(self.mu):
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")
        if self.clock_rate_hz <= 0:
            raise ValueError("clock_rate_hz must be positive")
        if not (0 <= self.misalignment_error <= 0.005):
            raise ValueError("misalignment_error must lie in [0, 0.005]")


@dataclass(frozen=True)
class ReceiverParams:
    eta_rec: float = 0.47
    eta_fil: float = 0.6
    eta_bb84: float = 0.5
    eta_det: float = 0.61

    def __post_init__(self) -> None:
        for name in ("eta_rec", "eta_fil", "eta_bb84", "eta_det"):
            _check_unit_interval(name, getattr(self, name))

    @property
    def internal_efficiency(self) -> float:
        """Product of all four receiver efficiencies."""
        return self.eta_rec * self.eta_fil * self.eta_bb84 * self.eta_det


@dataclass(frozen=True)
class ChannelParams:
    eta_trans: float = 0.81
    eta_geo: float = 0.05
    background_c: float = 5.0

    def __post_init__(self) -> None:
        _check_unit_interval("eta_trans", self.eta_trans)
        _check_unit_interval("eta_geo", self.eta_geo)
        if not (self.background_c >= 0) or math.isinf(self.background_c):
            raise ValueError(f"background_c must be finite and >= 0, got {self.background_c}")


@dataclass(frozen=True)
class LinkParams:
    tx: TransmitterParams
    rx: ReceiverParams = field(default_factory=ReceiverParams)
    ch: ChannelParams = field(default_factory=ChannelParams)

    def with_mu(self, mu: float) -> "LinkParams":
        return replace(self, tx=replace(self.tx, mu=mu))

    def with_channel(self, **changes: float) -> "LinkParams":
        return replace(self, ch=replace(self.ch, **changes))


@dataclass(frozen=True)
class BerEstimate:
    value: float
    clamped: bool


def eta_opt(ch: ChannelParams) -> float:
    """Atmospheric channel efficiency, transmittance times geometric capture."""
    return ch.eta_trans * ch.eta_geo


def receiver_factor_d(rx: ReceiverParams) -> float:
    """Receiver constant D linking background C to the sifted-key BER."""
    denom = rx.internal_efficiency
    if denom <= 0:
        raise ZeroDivisionError("receiver efficiencies must be non-zero")
    return D_NUMERATOR / denom


def sift_probability(lp: LinkParams) -> float:
    """Probability that one transmitted pulse ends up in the sifted key."""
    x = lp.tx.mu * eta_opt(lp.ch) * lp.rx.internal_efficiency
    return -math.expm1(-x)


def expected_ber(lp: LinkParams) -> BerEstimate:
    """Background-limited sifted BER ``C * D / (mu * eta_opt)``, clamped to 0.5."""
    signal = lp.tx.mu * eta_opt(lp.ch)
    if signal <= 0:
        raise ValueError("expected_ber needs mu * eta_opt > 0")
    eps = lp.ch.background_c * receiver_factor_d(lp.rx) / signal
    if eps > 0.5:
        return BerEstimate(0.5, True)
    return BerEstimate(eps, False)


def channel_parameter(ch: ChannelParams) -> float:
    """eta_opt / C. A background-free channel returns ``math.inf``."""
    if ch.background_c == 0:
        return math.inf
    return eta_opt(ch) / ch.background_c


def binary_entropy(eps: float) -> float:
    if not (0 <= eps <= 1):
        raise ValueError(f"binary_entropy needs eps in [0, 1], got {eps}")
    if eps == 0 or eps == 1:
        return 0.0
    return -eps * math.log2(eps) - (1 - eps) * math.log2(1 - eps)


# ---------------------------------------------------------------------------
# presets

@dataclass(frozen=True)
class Preset:
    name: str
    link: LinkParams
    eta_geo_sigma: float = 0.0
    mu_sigma: float = 0.0
    description: str = ""
    c_sigma: float = 0.0


def _parse_presets(parser: configparser.ConfigParser) -> dict[str, Preset]:
    presets = {}
    for name in parser.sections():
        sec = parser[name]
        tx = TransmitterParams(
            mu=sec.getfloat("mu"),
            clock_rate_hz=sec.getint("clock_rate_hz", 1_000_000),
            misalignment_error=sec.getfloat("misalignment_error", 0.0),
        )
        rx = ReceiverParams(
            eta_rec=sec.getfloat("eta_rec", 0.47),
            eta_fil=sec.getfloat("eta_fil", 0.6),
            eta_bb84=sec.getfloat("eta_bb84", 0.5),
            eta_det=sec.getfloat("eta_det", 0.61),
        )
        ch = ChannelParams(
            eta_trans=sec.getfloat("eta_trans", 0.81),
            eta_geo=sec.getfloat("eta_geo"),
            background_c=sec.getfloat("background_c"),
        )
        presets[name] = Preset(
            name=name,
            link=LinkParams(tx, rx, ch),
            eta_geo_sigma=sec.getfloat("eta_geo_sigma", 0.0),
            mu_sigma=sec.getfloat("mu_sigma", 0.0),
            description=sec.get("description", ""),
            c_sigma=sec.getfloat("c_sigma", 0.0),
        )
    return presets


def load_presets(path: str | Path | None = None) -> dict[str, Preset]:
    """Read channel presets from an INI file (the bundled file by default)."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        text = resources.files("fsqkd").joinpath("data/presets.ini").read_text()
        parser.read_string(text)
    else:
        with open(path) as fh:
            parser.read_file(fh)
    return _parse_presets(parser)


def get_preset(name: str) -> Preset:
    presets = load_presets()
    try:
        return presets[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(presets)}") from None
