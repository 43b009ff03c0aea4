"""Security regions and range extrapolation.

In the large-n limit the secret fraction depends on the mean photon number
and on the channel parameter x = eta_opt / C only, through the
background-limited BER eps = D / (mu * x). Everything here is built on that
two-variable rate function.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .model import ChannelParams, ReceiverParams, binary_entropy, channel_parameter, eta_opt, receiver_factor_d
from .privacy import SecrecyPolicy, collision_entropy_rate

MU_GRID_STEP = 1e-3
MU_HI = 1.0 - MU_GRID_STEP
ROOT_XTOL = 1e-9


def _ber(mu: float, x: float, d: float) -> float:
    if math.isinf(x):
        return 0.0
    return min(d / (mu * x), 0.5)


def signed_secret_rate(mu: float, x: float, rx: ReceiverParams = ReceiverParams(),
                       policy: SecrecyPolicy = SecrecyPolicy()) -> float:
    """R(mu, eps) - overhead * f(eps), without clamping at zero."""
    eps = _ber(mu, x, receiver_factor_d(rx))
    return collision_entropy_rate(mu, eps) - policy.ec_overhead * binary_entropy(eps)


def asymptotic_secret_rate(mu: float, x: float, rx: ReceiverParams = ReceiverParams(),
                           policy: SecrecyPolicy = SecrecyPolicy()) -> float:
    """Secret bits per sifted bit for n much larger than the safety margin."""
    if mu <= 0 or x <= 0:
        raise ValueError("mu and channel parameter must be positive")
    return max(0.0, signed_secret_rate(mu, x, rx, policy))


def _rate_on_grid(x: float, rx: ReceiverParams, policy: SecrecyPolicy) -> tuple[np.ndarray, np.ndarray]:
    mus = np.arange(1, round(1 / MU_GRID_STEP)) * MU_GRID_STEP
    d = receiver_factor_d(rx)
    if math.isinf(x):
        eps = np.zeros_like(mus)
    else:
        eps = np.minimum(d / (mus * x), 0.5)
    h = np.zeros_like(eps)
    inner = (eps > 0) & (eps < 1)
    e = eps[inner]
    h[inner] = -e * np.log2(e) - (1 - e) * np.log2(1 - e)
    rate = 1 - mus - 4 * eps * math.log2(1.5) - policy.ec_overhead * h
    return mus, rate


def _peak(x: float, rx: ReceiverParams, policy: SecrecyPolicy) -> tuple[float, float]:
    """(mu_opt, signed rate at mu_opt): grid scan, then bounded refinement."""
    mus, rate = _rate_on_grid(x, rx, policy)
    i = int(np.argmax(rate))
    lo = mus[max(i - 1, 0)]
    hi = mus[min(i + 1, len(mus) - 1)]
    res = minimize_scalar(lambda m: -signed_secret_rate(m, x, rx, policy),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    if -res.fun >= rate[i]:
        return float(res.x), float(-res.fun)
    return float(mus[i]), float(rate[i])


def _efficiency_peak(x: float, rx: ReceiverParams, policy: SecrecyPolicy) -> float:
    """mu maximizing mu * rate, i.e. secret bits per transmitted pulse."""
    mus, rate = _rate_on_grid(x, rx, policy)
    eff = mus * rate
    i = int(np.argmax(eff))
    lo = mus[max(i - 1, 0)]
    hi = mus[min(i + 1, len(mus) - 1)]
    res = minimize_scalar(lambda m: -m * signed_secret_rate(m, x, rx, policy),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    return float(res.x) if -res.fun >= eff[i] else float(mus[i])


@dataclass(frozen=True)
class YieldRegion:
    """Positive-yield window in mu at one channel parameter.

    ``mu_opt`` maximizes the secrecy efficiency (secret bits per pulse), not
    the per-sifted-bit rate; ``peak_rate`` is the largest per-sifted-bit rate.
    """

    channel_parameter: float
    mu_min: float | None
    mu_max: float | None
    mu_opt: float | None
    peak_rate: float

    @property
    def empty(self) -> bool:
        return self.mu_opt is None

    @property
    def width(self) -> float:
        return 0.0 if self.empty else self.mu_max - self.mu_min


def yield_region(x: float, rx: ReceiverParams = ReceiverParams(),
                 policy: SecrecyPolicy = SecrecyPolicy()) -> YieldRegion:
    """Range of mu with a positive asymptotic secret rate at channel parameter x."""
    if x <= 0:
        raise ValueError("channel parameter must be positive")
    mu_peak, peak = _peak(x, rx, policy)
    if peak <= 0:
        return YieldRegion(x, None, None, None, max(peak, 0.0))

    def f(m: float) -> float:
        return signed_secret_rate(m, x, rx, policy)

    lo_end = MU_GRID_STEP / 100
    mu_min = lo_end if f(lo_end) > 0 else brentq(f, lo_end, mu_peak, xtol=ROOT_XTOL)
    mu_max = 1.0 if f(MU_HI) > 0 else brentq(f, mu_peak, MU_HI, xtol=ROOT_XTOL)
    mu_opt = min(max(_efficiency_peak(x, rx, policy), mu_min), mu_max)
    return YieldRegion(x, mu_min, mu_max, mu_opt, peak)


@dataclass(frozen=True)
class Threshold:
    channel_parameter_min: float
    mu_star: float
    eps_star: float


def min_channel_parameter(rx: ReceiverParams = ReceiverParams(),
                          policy: SecrecyPolicy = SecrecyPolicy()) -> Threshold:
    """Smallest eta_opt/C for which some mu gives a positive secret rate."""

    def g(log_x: float) -> float:
        return _peak(math.exp(log_x), rx, policy)[1]

    lo, hi = math.log(1e-6), math.log(1.0)
    if g(hi) <= 0:
        raise ValueError("no secret yield even at eta_opt/C = 1")
    log_x = brentq(g, lo, hi, xtol=1e-12)
    x = math.exp(log_x)
    mu_star, _ = _peak(x, rx, policy)
    return Threshold(x, mu_star, _ber(mu_star, x, receiver_factor_d(rx)))


# ---------------------------------------------------------------------------
# attacks

@dataclass(frozen=True)
class AttackFlags:
    usd_safe: bool
    pns_safe: bool


def attack_flags(mu: float, eta_opt_value: float) -> AttackFlags:
    """USD is feasible when mu^2/32 > eta_opt; PNS when mu > 2 eta_opt."""
    if mu <= 0 or not (0 < eta_opt_value <= 1):
        raise ValueError("attack_flags needs mu > 0 and eta_opt in (0, 1]")
    return AttackFlags(
        usd_safe=not (mu * mu / 32 > eta_opt_value),
        pns_safe=not (mu > 2 * eta_opt_value),
    )


def usd_loss_tolerance_db(mu: float) -> float:
    """Largest channel loss (dB) that keeps the USD attack infeasible."""
    return -10 * math.log10(mu * mu / 32)


def pns_loss_tolerance_db(mu: float) -> float:
    return -10 * math.log10(mu / 2)


# ---------------------------------------------------------------------------
# range scaling

@dataclass(frozen=True)
class ScalingModel:
    """eta_trans(R) = eta_trans(R0) ** (R / R0); eta_geo(R) = eta_geo(R0) * (R0 / R) ** geo_power."""

    geo_power: float = 2.0


BASE_RANGE_KM = 9.81


def scale_channel(base: ChannelParams, target_range_km: float, base_range_km: float = BASE_RANGE_KM,
                  model: ScalingModel = ScalingModel()) -> ChannelParams:
    if target_range_km <= 0 or base_range_km <= 0:
        raise ValueError("ranges must be positive")
    ratio = target_range_km / base_range_km
    return ChannelParams(
        eta_trans=base.eta_trans ** ratio,
        eta_geo=min(1.0, base.eta_geo * ratio ** -model.geo_power),
        background_c=base.background_c,
    )


def max_range_km(base: ChannelParams, threshold: float, base_range_km: float = BASE_RANGE_KM,
                 model: ScalingModel = ScalingModel()) -> float:
    """Range at which eta_opt/C falls to ``threshold``."""
    if base.background_c == 0:
        return math.inf

    def g(r: float) -> float:
        return math.log(channel_parameter(scale_channel(base, r, base_range_km, model)) / threshold)

    lo = hi = base_range_km
    while g(lo) < 0:
        lo /= 2
        if lo < 1e-6:
            return 0.0
    while g(hi) > 0:
        hi *= 2
    return brentq(g, lo, hi, xtol=1e-12, rtol=1e-12)


# ---------------------------------------------------------------------------
# surfaces

SURFACE_HEADER = ("mu", "eta_opt_over_c", "epsilon", "p_sif_to_secret", "p_secret_over_eta_opt",
                  "usd_safe", "pns_safe")


@dataclass(frozen=True)
class SurfacePoint:
    mu: float
    channel_parameter: float
    epsilon: float
    p_sif_to_secret: float
    p_secret_over_eta_opt: float
    usd_safe: bool | None = None
    pns_safe: bool | None = None


def scaled_secrecy_surface(mus: Sequence[float], xs: Sequence[float], rx: ReceiverParams = ReceiverParams(),
                           policy: SecrecyPolicy = SecrecyPolicy(),
                           background_c: float | None = None) -> list[SurfacePoint]:
    """P_secret / eta_opt over a (mu, eta_opt/C) grid.

    P_sif / eta_opt uses the linearized sift probability. The attack columns
    need eta_opt itself, so they are filled only when ``background_c`` is given.
    """
    d = receiver_factor_d(rx)
    points = []
    for x in xs:
        for mu in mus:
            rate = asymptotic_secret_rate(mu, x, rx, policy)
            flags = None
            if background_c is not None:
                e_opt = x * background_c
                if 0 < e_opt <= 1:
                    flags = attack_flags(mu, e_opt)
            points.append(SurfacePoint(
                mu=float(mu),
                channel_parameter=float(x),
                epsilon=_ber(mu, x, d),
                p_sif_to_secret=rate,
                p_secret_over_eta_opt=mu * rx.internal_efficiency * rate,
                usd_safe=None if flags is None else flags.usd_safe,
                pns_safe=None if flags is None else flags.pns_safe,
            ))
    return points


def write_surface_csv(points: Iterable[SurfacePoint], path: str | Path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return "1" if v else "0"
        return repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SURFACE_HEADER)
        for p in points:
            w.writerow([fmt(p.mu), fmt(p.channel_parameter), fmt(p.epsilon), fmt(p.p_sif_to_secret),
                        fmt(p.p_secret_over_eta_opt), fmt(p.usd_safe), fmt(p.pns_safe)])


def link_flags(mu: float, ch: ChannelParams) -> AttackFlags:
    return attack_flags(mu, eta_opt(ch))
