"""Physical Monte Carlo and discrete-event M/G/1 simulation.

This path never touches the closed-form CDF: it scatters base stations,
draws Rayleigh power gains, assembles the SINR, converts it to a service
time through the finite-blocklength rate and pushes packets through a
single-server FCFS queue.

Random streams come from numpy's counter-based Philox generator. Child
streams are derived with :func:`derive_seed`, which hashes
``(seed, *keys)`` through ``SeedSequence`` into a fresh 64-bit seed, so
sweep cells and replications are independent and individually replayable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Literal, Optional, Sequence

import numpy as np
from scipy import stats

from imdelay.analytic import DispersionMode, fbl_rate
from imdelay.core import ConfigError, ScenarioParams

DelayStats = Literal["all", "success_only"]
ServiceSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]

DEFAULT_TAIL_TOL = 1e-6
MIN_BATCHES = 30


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for the stream labelled by ``keys``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


# --------------------------------------------------------------------------
# Geometry and fading

@dataclass(frozen=True)
class SinrSample:
    serving_gain: float
    interferer_distances_m: tuple[float, ...]
    interferer_gains: tuple[float, ...]
    sinr: float

    def recompute_sinr(self, p: ScenarioParams) -> float:
        alpha = p.path_loss_exponent
        signal = p.tx_power_w * p.serving_distance_m ** (-alpha) * self.serving_gain
        interference = math.fsum(
            p.tx_power_w * x ** (-alpha) * h
            for x, h in zip(self.interferer_distances_m, self.interferer_gains)
        )
        return signal / (interference + p.noise_power_w)


def choose_window_radius(p: ScenarioParams, tail_tol: float = DEFAULT_TAIL_TOL) -> float:
    """Simulation disk radius for the infinite PPP.

    The mean interference from BSs beyond radius R is
    P * d * 2*pi * R^(2-alpha) / (alpha - 2); R is chosen so this is at most
    ``tail_tol`` times the sub-band noise power, and never below 10 * x0.
    """
    if not (0.0 < tail_tol <= 1e-2):
        raise ValueError(f"tail_tol must lie in (0, 1e-2], got {tail_tol!r}")
    floor = 10.0 * p.serving_distance_m
    if p.bs_density_per_m2 == 0:
        return floor
    alpha = p.path_loss_exponent
    target = tail_tol * p.noise_power_w
    radius = (p.tx_power_w * p.bs_density_per_m2 * 2.0 * math.pi
              / ((alpha - 2.0) * target)) ** (1.0 / (alpha - 2.0))
    return max(radius, floor)


def _inner_radius(p: ScenarioParams, exclusion_zone: bool) -> float:
    return p.serving_distance_m if exclusion_zone else 0.0


def _scatter_distances(p: ScenarioParams, rng: np.random.Generator, counts: np.ndarray,
                       window_radius_m: float, exclusion_zone: bool) -> np.ndarray:
    r_in = _inner_radius(p, exclusion_zone)
    u = rng.random(int(counts.sum()))
    # Uniform in the annulus r_in <= r <= R: r^2 is uniform on [r_in^2, R^2].
    return np.sqrt(r_in**2 + u * (window_radius_m**2 - r_in**2))


def _expected_count(p: ScenarioParams, window_radius_m: float, exclusion_zone: bool) -> float:
    r_in = _inner_radius(p, exclusion_zone)
    return p.bs_density_per_m2 * math.pi * max(window_radius_m**2 - r_in**2, 0.0)


def sample_field(p: ScenarioParams, rng_seed: int | np.random.Generator,
                 window_radius_m: float, exclusion_zone: bool = False) -> SinrSample:
    """One realization of the interferer field and fading around the typical machine.

    Interferers are scattered over the whole disk (also inside x0) unless
    ``exclusion_zone`` is set.
    """
    if not window_radius_m > 0:
        raise ValueError("window_radius_m must be positive")
    rng = make_rng(rng_seed)
    count = rng.poisson(_expected_count(p, window_radius_m, exclusion_zone))
    distances = _scatter_distances(p, rng, np.array([count]), window_radius_m, exclusion_zone)
    gains = rng.exponential(1.0, size=count)
    h0 = float(rng.exponential(1.0))
    alpha = p.path_loss_exponent
    signal = p.tx_power_w * p.serving_distance_m ** (-alpha) * h0
    interference = math.fsum(p.tx_power_w * distances ** (-alpha) * gains)
    return SinrSample(
        serving_gain=h0,
        interferer_distances_m=tuple(distances.tolist()),
        interferer_gains=tuple(gains.tolist()),
        sinr=signal / (interference + p.noise_power_w),
    )


def sample_sinr(p: ScenarioParams, rng: np.random.Generator, n: int,
                window_radius_m: Optional[float] = None, exclusion_zone: bool = False,
                frozen_distances: Optional[np.ndarray] = None) -> np.ndarray:
    """``n`` independent SINR draws, vectorized.

    With ``frozen_distances`` the interferer positions are fixed and only
    the fading is redrawn per draw.
    """
    if window_radius_m is None:
        window_radius_m = choose_window_radius(p)
    alpha = p.path_loss_exponent
    if frozen_distances is not None:
        k = len(frozen_distances)
        gains = rng.exponential(1.0, size=(n, k))
        interference = (p.tx_power_w * np.asarray(frozen_distances) ** (-alpha) * gains).sum(axis=1)
    else:
        counts = rng.poisson(_expected_count(p, window_radius_m, exclusion_zone), size=n)
        distances = _scatter_distances(p, rng, counts, window_radius_m, exclusion_zone)
        gains = rng.exponential(1.0, size=distances.size)
        owner = np.repeat(np.arange(n), counts)
        interference = np.bincount(owner, weights=p.tx_power_w * distances ** (-alpha) * gains,
                                   minlength=n)
    h0 = rng.exponential(1.0, size=n)
    signal = p.tx_power_w * p.serving_distance_m ** (-alpha) * h0
    return signal / (interference + p.noise_power_w)


def service_times(p: ScenarioParams, sinr: np.ndarray,
                  dispersion_mode: DispersionMode = "approx") -> tuple[np.ndarray, np.ndarray]:
    """Vectorized deadline-truncated service times and success flags."""
    rate = np.asarray(fbl_rate(p, np.asarray(sinr, dtype=float), dispersion_mode))
    t_th = p.delay_threshold_s
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(rate > 0, p.packet_bits / np.where(rate > 0, rate, 1.0), np.inf)
    success = raw < t_th
    return np.where(success, raw, t_th), success


def sample_service_time(p: ScenarioParams, sample: SinrSample,
                        dispersion_mode: DispersionMode = "approx") -> tuple[float, bool]:
    """(service_s, success) for one SINR sample; failures hold the server for T_th."""
    service, success = service_times(p, np.array([sample.sinr]), dispersion_mode)
    return float(service[0]), bool(success[0])


def physical_service_sampler(p: ScenarioParams, *, dispersion_mode: DispersionMode = "approx",
                             exclusion_zone: bool = False, frozen_topology: bool = False,
                             window_radius_m: Optional[float] = None) -> ServiceSampler:
    """Sampler drawing iid service times from fresh geometry and fading."""
    radius = window_radius_m if window_radius_m is not None else choose_window_radius(p)

    def draw(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        frozen = None
        if frozen_topology:
            count = rng.poisson(_expected_count(p, radius, exclusion_zone))
            frozen = _scatter_distances(p, rng, np.array([count]), radius, exclusion_zone)
        sinr = sample_sinr(p, rng, n, radius, exclusion_zone, frozen)
        return service_times(p, sinr, dispersion_mode)

    return draw


def deterministic_service(duration_s: float) -> ServiceSampler:
    """Test hook: every packet takes exactly ``duration_s`` and succeeds."""

    def draw(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        return np.full(n, float(duration_s)), np.ones(n, dtype=bool)

    return draw


# --------------------------------------------------------------------------
# Discrete-event FCFS queue

@dataclass
class QueueTrace:
    arrivals: np.ndarray
    start: np.ndarray
    departures: np.ndarray
    service: np.ndarray
    success: np.ndarray
    area: float          # integral of number-in-system over the window
    window: tuple[float, float]
    events: int


def simulate_fcfs(arrivals: np.ndarray, service: np.ndarray, success: np.ndarray,
                  window: tuple[float, float]) -> QueueTrace:
    """Event-driven single-server FCFS queue.

    Processes arrival and departure events in time order, tracking the
    number in system and its time integral over ``window``.
    """
    arr = arrivals.tolist()
    svc = service.tolist()
    n = len(arr)
    start = [0.0] * n
    dep = [0.0] * n
    w_lo, w_hi = window
    area = 0.0
    in_system = 0
    t_last = 0.0
    next_dep = math.inf
    i = j = 0
    events = 0
    while j < n:
        if i < n and arr[i] <= next_dep:
            t = arr[i]
            lo = t_last if t_last > w_lo else w_lo
            hi = t if t < w_hi else w_hi
            if hi > lo:
                area += in_system * (hi - lo)
            in_system += 1
            if in_system == 1:
                start[i] = t
                next_dep = t + svc[i]
            i += 1
        else:
            t = next_dep
            lo = t_last if t_last > w_lo else w_lo
            hi = t if t < w_hi else w_hi
            if hi > lo:
                area += in_system * (hi - lo)
            dep[j] = t
            in_system -= 1
            j += 1
            if in_system > 0:
                start[j] = t
                next_dep = t + svc[j]
            else:
                next_dep = math.inf
        t_last = t
        events += 1
    return QueueTrace(
        arrivals=arrivals,
        start=np.asarray(start),
        departures=np.asarray(dep),
        service=service,
        success=success,
        area=area,
        window=window,
        events=events,
    )


# --------------------------------------------------------------------------
# Statistics

@dataclass(frozen=True)
class Estimate:
    """Point estimate with a 95% confidence half-width."""

    value: float
    half_width: float

    def covers(self, x: float) -> bool:
        return abs(x - self.value) <= self.half_width

    @property
    def low(self) -> float:
        return self.value - self.half_width

    @property
    def high(self) -> float:
        return self.value + self.half_width


@dataclass(frozen=True)
class SimReport:
    n_packets: int
    n_failures: int
    p_s_hat: Estimate
    mean_delay_s: Estimate
    var_delay_s2: Estimate
    mean_wait_s: Estimate
    var_wait_s2: Estimate
    mean_service_s: Estimate
    var_service_s2: Estimate
    little_l: float
    arrival_rate_pps: float
    busy_fraction: float
    stable: bool
    seed: int
    replications: int = 1
    n_batches: int = 0
    events: int = 0
    delay_stats: str = "all"

    @property
    def little_lambda_w(self) -> float:
        return self.arrival_rate_pps * self.mean_delay_s.value

    def little_relative_error(self) -> float:
        lw = self.little_lambda_w
        return abs(self.little_l - lw) / lw if lw > 0 else math.inf

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimReport":
        data = dict(data)
        for key, value in data.items():
            if isinstance(value, dict):
                data[key] = Estimate(**value)
        return cls(**data)


def _batch_ids(n: int, n_batches: int) -> np.ndarray:
    return (np.arange(n) * n_batches) // n


def _batch_estimates(batches: list[tuple[np.ndarray, np.ndarray]]) -> tuple[Estimate, Estimate]:
    """Mean and variance estimates from (values, batch-id) pairs per replication.

    Point estimates use all values; the half-widths come from the spread of
    per-batch means and per-batch variances (Student t, 95%).
    """
    values = np.concatenate([v for v, _ in batches])
    b_means, b_vars = [], []
    for v, ids in batches:
        if v.size == 0:
            continue
        counts = np.bincount(ids)
        keep = counts > 1
        sums = np.bincount(ids, weights=v)
        sq = np.bincount(ids, weights=v * v)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = sums / counts
            var = (sq - counts * m * m) / (counts - 1)
        b_means.append(m[keep])
        b_vars.append(var[keep])
    means = np.concatenate(b_means) if b_means else np.empty(0)
    variances = np.concatenate(b_vars) if b_vars else np.empty(0)
    if values.size < 2 or means.size < 2:
        nan = float("nan")
        return Estimate(float(values.mean()) if values.size else nan, nan), Estimate(nan, nan)
    tq = stats.t.ppf(0.975, means.size - 1)
    mean_est = Estimate(float(values.mean()), float(tq * means.std(ddof=1) / math.sqrt(means.size)))
    var_est = Estimate(float(values.var(ddof=1)),
                       float(tq * variances.std(ddof=1) / math.sqrt(variances.size)))
    return mean_est, var_est


def run_queue(p: ScenarioParams, n_packets: int, warmup: int, seed: int, *,
              replications: int = 1,
              service_sampler: Optional[ServiceSampler] = None,
              dispersion_mode: DispersionMode = "approx",
              exclusion_zone: bool = False,
              frozen_topology: bool = False,
              delay_stats: DelayStats = "all",
              n_batches: int = 40,
              window_radius_m: Optional[float] = None) -> SimReport:
    """Simulate the M/G/1 queue and summarize post-warmup packets.

    ``n_packets`` counts all packets of one replication, the first
    ``warmup`` of which are discarded. Replication 0 uses ``seed`` itself;
    replication r > 0 uses ``derive_seed(seed, r)``. Statistics pool all
    replications; confidence half-widths use batch means with
    ``n_batches`` contiguous batches per replication.
    """
    if n_packets <= warmup or warmup < 0:
        raise ConfigError("n_packets", f"must exceed warmup (n_packets={n_packets}, warmup={warmup})")
    if replications < 1:
        raise ConfigError("replications", "must be >= 1")
    if n_batches < MIN_BATCHES:
        raise ConfigError("n_batches", f"must be >= {MIN_BATCHES}")
    if n_packets - warmup < 2 * n_batches:
        raise ConfigError("n_packets", f"need at least {2 * n_batches} post-warmup packets")
    if p.arrival_rate_pps <= 0:
        raise ConfigError("arrival_rate_pps", "must be > 0 to simulate a queue")
    if delay_stats not in ("all", "success_only"):
        raise ValueError(f"unknown delay_stats {delay_stats!r}")
    sampler = service_sampler or physical_service_sampler(
        p, dispersion_mode=dispersion_mode, exclusion_zone=exclusion_zone,
        frozen_topology=frozen_topology, window_radius_m=window_radius_m)

    delay_b, wait_b, svc_b = [], [], []
    area = span = busy = 0.0
    events = failures = 0
    kept = 0
    for r in range(replications):
        rep_seed = seed if r == 0 else derive_seed(seed, r)
        arrival_rng = make_rng(derive_seed(rep_seed, 0))
        service_rng = make_rng(derive_seed(rep_seed, 1))
        arrivals = np.cumsum(arrival_rng.exponential(1.0 / p.arrival_rate_pps, size=n_packets))
        service, success = sampler(service_rng, n_packets)
        window = (float(arrivals[warmup]), float(arrivals[-1]))
        trace = simulate_fcfs(arrivals, service, success, window)
        events += trace.events
        area += trace.area
        span += window[1] - window[0]
        busy += _busy_time(trace, window)

        sl = slice(warmup, None)
        wait = trace.start[sl] - trace.arrivals[sl]
        svc = trace.service[sl]
        ok = trace.success[sl]
        delay = trace.departures[sl] - trace.arrivals[sl]
        ids = _batch_ids(delay.size, n_batches)
        failures += int((~ok).sum())
        kept += delay.size
        if delay_stats == "success_only":
            delay_b.append((delay[ok], ids[ok]))
            wait_b.append((wait[ok], ids[ok]))
            svc_b.append((svc[ok], ids[ok]))
        else:
            delay_b.append((delay, ids))
            wait_b.append((wait, ids))
            svc_b.append((svc, ids))

    p_hat = 1.0 - failures / kept
    # Services are iid, so the binomial half-width is the right one for P_s.
    p_s_hat = Estimate(p_hat, 1.96 * math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / kept))
    mean_delay, var_delay = _batch_estimates(delay_b)
    mean_wait, var_wait = _batch_estimates(wait_b)
    mean_svc, var_svc = _batch_estimates(svc_b)
    busy_fraction = busy / span if span > 0 else float("nan")
    return SimReport(
        n_packets=kept,
        n_failures=failures,
        p_s_hat=p_s_hat,
        mean_delay_s=mean_delay,
        var_delay_s2=var_delay,
        mean_wait_s=mean_wait,
        var_wait_s2=var_wait,
        mean_service_s=mean_svc,
        var_service_s2=var_svc,
        little_l=area / span if span > 0 else float("nan"),
        arrival_rate_pps=p.arrival_rate_pps,
        busy_fraction=busy_fraction,
        stable=p.arrival_rate_pps * mean_svc.value < 1.0,
        seed=int(seed),
        replications=replications,
        n_batches=n_batches * replications,
        events=events,
        delay_stats=delay_stats,
    )


def _busy_time(trace: QueueTrace, window: tuple[float, float]) -> float:
    lo = np.clip(trace.start, *window)
    hi = np.clip(trace.departures, *window)
    return float((hi - lo).sum())


def lindley_waits(arrivals: Sequence[float], service: Sequence[float]) -> np.ndarray:
    """Waiting times from the Lindley recursion; an independent check of the event loop."""
    arr = np.asarray(arrivals, dtype=float)
    svc = np.asarray(service, dtype=float)
    w = np.zeros(arr.size)
    for k in range(1, arr.size):
        w[k] = max(0.0, w[k - 1] + svc[k - 1] - (arr[k] - arr[k - 1]))
    return w
