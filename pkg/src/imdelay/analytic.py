"""Closed-form delay metrics.

Transmission delay is T_t = s / R with the finite-blocklength rate R, and
T_t < t exactly when the SINR exceeds a threshold Theta(t). With Rayleigh
fading and PPP interferers the SINR tail is a stretched exponential, which
gives the delay CDF. Packets that would take longer than the deadline are
cut off at T_th, so all moments are truncated moments of min(T_t, T_th).
Queuing uses the Pollaczek-Khinchine mean and variance for M/G/1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Literal, Optional

import numpy as np
from scipy import integrate

from imdelay.core import ScenarioParams, utilization

LOG2_E = 1.0 / math.log(2.0)
LN2 = math.log(2.0)
# Base-2 exponent above which Theta is treated as infinite (F = 0).
THETA_EXPONENT_CAP = 1000.0

DispersionMode = Literal["approx", "exact"]
TwVarianceMode = Literal["standard", "paper_literal"]


class UnstableQueue(ArithmeticError):
    """lambda * E[T_t] >= 1: the M/G/1 queue has no steady state."""

    def __init__(self, rho: float, report: Optional["AnalyticReport"] = None):
        super().__init__(f"unstable queue: rho = {rho:.6g} >= 1")
        self.rho = rho
        self.report = report


class QuadratureError(ArithmeticError):
    def __init__(self, achieved: float, requested: float, message: str = ""):
        super().__init__(
            f"quadrature did not converge: achieved abs error {achieved:.3e}, "
            f"requested {requested:.3e}. {message}".strip()
        )
        self.achieved = achieved
        self.requested = requested


# --------------------------------------------------------------------------
# Gaussian tail and its inverse

def q_function(z: float) -> float:
    """Standard Gaussian tail probability Q(z) = P(N(0,1) > z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# Acklam's rational approximation to the normal quantile (rel. error ~1e-9).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _normal_quantile_rational(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def q_inverse(eps: float) -> float:
    """Inverse Gaussian tail: the z with Q(z) = eps.

    Rational starting point refined by Halley steps against ``erfc``; for
    eps > 0.5 the exact symmetry Q^-1(eps) = -Q^-1(1 - eps) is used (1 - eps
    is exact in floating point there).
    """
    if not (0.0 < eps < 1.0):
        raise ValueError(f"q_inverse needs eps in (0, 1), got {eps!r}")
    if eps > 0.5:
        return -q_inverse(1.0 - eps)
    if eps == 0.5:
        return 0.0
    z = -_normal_quantile_rational(eps)
    for _ in range(3):
        phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        if phi == 0.0:
            break
        u = (q_function(z) - eps) / phi
        step = u / (1.0 - 0.5 * z * u)
        z += step
        if abs(step) <= 1e-16 * max(1.0, abs(z)):
            break
    return z


# --------------------------------------------------------------------------
# Finite-blocklength rate and SINR threshold

def _rate_penalty(p: ScenarioParams) -> float:
    # sqrt(1/(2s)) * Q^-1(eps) * log2(e): the dispersion term at V = log2(e)^2 / 2
    return math.sqrt(1.0 / (2.0 * p.packet_bits)) * q_inverse(p.error_prob) * LOG2_E


def fbl_rate(p: ScenarioParams, sinr: Any, dispersion_mode: DispersionMode = "approx") -> Any:
    """Finite-blocklength rate in bits/s for one machine's sub-band.

    ``approx`` replaces the dispersion by its high-SINR limit, which is the
    rate law the closed-form CDF is built on. ``exact`` uses the
    SINR-dependent dispersion. The result may be negative (no reliable rate).
    Accepts scalars or numpy arrays.
    """
    gamma = np.asarray(sinr, dtype=float)
    if np.any(gamma < 0):
        raise ValueError("sinr must be non-negative")
    shannon = p.subband_hz * np.log2(1.0 + gamma)
    if dispersion_mode == "approx":
        rate = shannon - _rate_penalty(p)
    elif dispersion_mode == "exact":
        dispersion = 0.5 * gamma * (gamma + 2.0) / (gamma + 1.0) ** 2 * LOG2_E**2
        rate = shannon - np.sqrt(dispersion / p.packet_bits) * q_inverse(p.error_prob)
    else:
        raise ValueError(f"unknown dispersion_mode {dispersion_mode!r}")
    return float(rate) if rate.ndim == 0 else rate


def _theta_exponent_terms(p: ScenarioParams) -> tuple[float, float]:
    """Theta(t) = 2^(scale / t + offset) - 1; returns (scale, offset)."""
    per_hz = p.n_machines / p.bandwidth_hz
    return per_hz * p.packet_bits, per_hz * _rate_penalty(p)


def theta(p: ScenarioParams, t: float) -> float:
    """SINR threshold for delivering the packet within ``t`` seconds.

    Returns ``math.inf`` once the base-2 exponent exceeds 1000.
    """
    if not t > 0:
        raise ValueError(f"theta needs t > 0, got {t!r}")
    scale, offset = _theta_exponent_terms(p)
    exponent = scale / t + offset
    if exponent > THETA_EXPONENT_CAP:
        return math.inf
    return math.expm1(exponent * LN2)


# --------------------------------------------------------------------------
# Delay distribution

@dataclass(frozen=True)
class DelayCdf:
    """Evaluatable CDF of the (untruncated) transmission delay."""

    params: ScenarioParams
    noise_coeff: float
    interference_coeff: float
    theta_floor: float
    theta_scale: float
    theta_offset: float

    def theta(self, t: Any) -> Any:
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            exponent = np.where(t > 0, self.theta_scale / np.where(t > 0, t, 1.0) + self.theta_offset, np.inf)
        out = np.where(exponent > THETA_EXPONENT_CAP, np.inf,
                       np.expm1(np.minimum(exponent, THETA_EXPONENT_CAP) * LN2))
        return float(out) if out.ndim == 0 else out

    def evaluate(self, t: Any) -> Any:
        """F(t) = P(T_t < t); F(0) = 0. Accepts scalars or numpy arrays."""
        t = np.asarray(t, dtype=float)
        th = np.asarray(self.theta(t))
        finite = np.isfinite(th)
        # Theta <= 0 (possible for eps > 0.5) means every SINR clears it.
        th_pos = np.where(finite, np.maximum(th, 0.0), 0.0)
        alpha = self.params.path_loss_exponent
        expo = self.noise_coeff * th_pos + self.interference_coeff * th_pos ** (2.0 / alpha)
        out = np.where(finite & (t > 0), np.exp(-expo), 0.0)
        return float(out) if out.ndim == 0 else out

    __call__ = evaluate

    @property
    def saturation(self) -> float:
        """lim F(t) as t -> infinity."""
        th = self.theta_floor
        alpha = self.params.path_loss_exponent
        return math.exp(-self.noise_coeff * th - self.interference_coeff * th ** (2.0 / alpha))


def delay_cdf(p: ScenarioParams) -> DelayCdf:
    alpha = p.path_loss_exponent
    x0 = p.serving_distance_m
    noise_coeff = x0**alpha * p.noise_psd_w_per_hz * p.bandwidth_hz / (p.n_machines * p.tx_power_w)
    interference_coeff = (p.bs_density_per_m2 * 2.0 * math.pi**2 * x0**2
                          / (alpha * math.sin(2.0 * math.pi / alpha)))
    scale, offset = _theta_exponent_terms(p)
    theta_floor = max(math.expm1(offset * LN2), 0.0)
    return DelayCdf(p, noise_coeff, interference_coeff, theta_floor, scale, offset)


def success_probability(p: ScenarioParams) -> float:
    """P(T_t < T_th)."""
    return delay_cdf(p).evaluate(p.delay_threshold_s)


def _bisect_level(c: DelayCdf, level: float, lo: float, hi: float, iters: int = 200) -> float:
    """Smallest-ish t in [lo, hi] with F(t) >= level (F nondecreasing)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if c.evaluate(mid) >= level:
            hi = mid
        else:
            lo = mid
    return hi


def truncated_moment(c: DelayCdf, order: int, rel_tol: float = 1e-9) -> float:
    """E[min(T_t, T_th)^k] = T_th^k - k * int_0^T_th t^(k-1) F(t) dt."""
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order!r}")
    t_th = c.params.delay_threshold_s
    full = t_th**order
    abs_tol = 1e-18 * full
    f_th = c.evaluate(t_th)
    if f_th <= 1e-18:
        return full
    # Start where F becomes non-negligible and give the integrator the knee.
    t_lo = _bisect_level(c, 1e-18 * f_th, 0.0, t_th)
    lo_bracket = max(t_lo * 0.5, 0.0)
    t_knee = _bisect_level(c, 0.5 * f_th, lo_bracket, t_th)
    points = [t_knee] if lo_bracket < t_knee < t_th else None

    def integrand(t: float) -> float:
        return t ** (order - 1) * c.evaluate(t)

    result = integrate.quad(integrand, lo_bracket, t_th, epsabs=abs_tol, epsrel=rel_tol,
                            limit=10_000, points=points, full_output=1)
    value, abserr = result[0], result[1]
    if len(result) > 3:
        info = result[2]
        ier = info.get("ier", 1) if isinstance(info, dict) else 1
        if ier == 1 or abserr > max(abs_tol, 1e-6 * abs(value)):
            raise QuadratureError(abserr, max(abs_tol, rel_tol * abs(value)), result[3])
    moment = full - order * value
    return min(max(moment, 0.0), full)


# --------------------------------------------------------------------------
# Queuing

def expected_queuing_delay(p: ScenarioParams, m1: float, m2: float) -> float:
    """Pollaczek-Khinchine mean wait lambda*E[S^2] / (2(1 - lambda*E[S]))."""
    lam = p.arrival_rate_pps
    if lam == 0:
        return 0.0
    rho = utilization(p, m1)
    if rho >= 1:
        raise UnstableQueue(rho)
    return lam * m2 / (2.0 * (1.0 - rho))


def waiting_variance(p: ScenarioParams, m1: float, m2: float, m3: float,
                     mode: TwVarianceMode = "standard") -> float:
    """Var(T_w) = E[T_w]^2 + lambda*E[S^3] / (k(1 - rho)), k = 3 (standard) or 2."""
    lam = p.arrival_rate_pps
    if lam == 0:
        return 0.0
    denominators = {"standard": 3.0, "paper_literal": 2.0}
    if mode not in denominators:
        raise ValueError(f"unknown tw_variance_mode {mode!r}")
    ew = expected_queuing_delay(p, m1, m2)
    rho = utilization(p, m1)
    return ew * ew + lam * m3 / (denominators[mode] * (1.0 - rho))


@dataclass(frozen=True)
class AnalyticReport:
    """Analytic metrics. Queue-dependent fields are None for unstable queues."""

    p_s: float
    e_tt_s: float
    e_tt2_s2: float
    e_tt3_s3: float
    var_tt_s2: float
    rho: float
    e_tw_s: Optional[float] = None
    t_m_s: Optional[float] = None
    var_tw_s2: Optional[float] = None
    jitter_s2: Optional[float] = None
    tw_variance_mode: str = "standard"

    @property
    def stable(self) -> bool:
        return self.rho < 1.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnalyticReport":
        return cls(**data)


def _transmission_report(p: ScenarioParams, tw_variance_mode: str = "standard") -> AnalyticReport:
    c = delay_cdf(p)
    m1, m2, m3 = (truncated_moment(c, k) for k in (1, 2, 3))
    return AnalyticReport(
        p_s=c.evaluate(p.delay_threshold_s),
        e_tt_s=m1,
        e_tt2_s2=m2,
        e_tt3_s3=m3,
        var_tt_s2=max(m2 - m1 * m1, 0.0),
        rho=utilization(p, m1),
        tw_variance_mode=tw_variance_mode,
    )


def expected_delay(p: ScenarioParams) -> AnalyticReport:
    """Report with T_m = E[T_t] + E[T_w] filled in (variances left empty)."""
    base = _transmission_report(p)
    if not base.stable:
        raise UnstableQueue(base.rho, base)
    e_tw = expected_queuing_delay(p, base.e_tt_s, base.e_tt2_s2)
    return _replace(base, e_tw_s=e_tw, t_m_s=base.e_tt_s + e_tw)


def jitter(p: ScenarioParams, tw_variance_mode: TwVarianceMode = "standard") -> AnalyticReport:
    """Full report: expected delay plus jitter J_m = Var(T_t) + Var(T_w)."""
    base = _transmission_report(p, tw_variance_mode)
    if not base.stable:
        raise UnstableQueue(base.rho, base)
    return _complete(p, base, tw_variance_mode)


def _complete(p: ScenarioParams, base: AnalyticReport, mode: str) -> AnalyticReport:
    e_tw = expected_queuing_delay(p, base.e_tt_s, base.e_tt2_s2)
    var_tw = waiting_variance(p, base.e_tt_s, base.e_tt2_s2, base.e_tt3_s3, mode)
    return _replace(
        base,
        e_tw_s=e_tw,
        t_m_s=base.e_tt_s + e_tw,
        var_tw_s2=var_tw,
        jitter_s2=base.var_tt_s2 + var_tw,
    )


def analyze(p: ScenarioParams, tw_variance_mode: TwVarianceMode = "standard",
            allow_unstable: bool = False) -> AnalyticReport:
    """All analytic metrics in one pass over the quadratures.

    With ``allow_unstable`` an unstable scenario returns the
    transmission-only report instead of raising.
    """
    base = _transmission_report(p, tw_variance_mode)
    if not base.stable:
        if allow_unstable:
            return base
        raise UnstableQueue(base.rho, base)
    return _complete(p, base, tw_variance_mode)


def _replace(report: AnalyticReport, **changes: Any) -> AnalyticReport:
    data = report.to_dict()
    data.update(changes)
    return AnalyticReport(**data)
