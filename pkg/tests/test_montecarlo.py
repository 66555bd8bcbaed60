import math

import numpy as np
import pytest
from scipy import stats

from imdelay.analytic import analyze, delay_cdf, success_probability, theta
from imdelay.core import ConfigError
from imdelay.montecarlo import (
    SimReport,
    choose_window_radius,
    derive_seed,
    deterministic_service,
    lindley_waits,
    make_rng,
    physical_service_sampler,
    run_queue,
    sample_field,
    sample_service_time,
    sample_sinr,
    service_times,
    simulate_fcfs,
)
from imdelay.validation import inverse_cdf_samples


# --- geometry --------------------------------------------------------------

def test_noise_limited_field(base):
    p = base.replace(bs_density_per_m2=0.0)
    s = sample_field(p, 5, 100.0)
    assert s.interferer_distances_m == ()
    expected = p.tx_power_w * p.serving_distance_m ** -4 * s.serving_gain / p.noise_power_w
    assert s.sinr == pytest.approx(expected, rel=1e-14)


def test_field_replay_is_bit_exact(base):
    a = sample_field(base, 1234, 500.0)
    b = sample_field(base, 1234, 500.0)
    assert a == b
    assert sample_field(base, 1235, 500.0) != a


@pytest.mark.parametrize("seed", range(20))
def test_sinr_recomputable_from_fields(base, seed):
    p = base.replace(bs_density_per_m2=1e-4)
    s = sample_field(p, seed, 300.0)
    assert s.recompute_sinr(p) == pytest.approx(s.sinr, rel=1e-12)
    assert all(x > 0 for x in s.interferer_distances_m)
    assert all(h > 0 for h in s.interferer_gains) and s.serving_gain > 0


def test_exclusion_zone_keeps_interferers_outside_x0(base):
    p = base.replace(bs_density_per_m2=1e-3)
    s = sample_field(p, 9, 200.0, exclusion_zone=True)
    assert s.interferer_distances_m and min(s.interferer_distances_m) >= p.serving_distance_m


def test_empirical_sinr_tail_matches_closed_form(base):
    c = delay_cdf(base)
    n = 1_000_000
    sinr = sample_sinr(base, make_rng(2024), n)
    for t in np.geomspace(2e-4, 1e-3, 20):
        f = c.evaluate(t)
        emp = np.mean(sinr > theta(base, float(t)))
        assert abs(emp - f) <= 4 * math.sqrt(f * (1 - f) / n)


def test_exclusion_zone_raises_coverage(base):
    p = base.replace(bs_density_per_m2=1e-3)
    th = theta(p, p.delay_threshold_s)
    full = np.mean(sample_sinr(p, make_rng(1), 50_000, window_radius_m=200.0) > th)
    excl = np.mean(sample_sinr(p, make_rng(1), 50_000, window_radius_m=200.0, exclusion_zone=True) > th)
    assert excl > full


def test_window_radius(base):
    assert choose_window_radius(base, 1e-6) == pytest.approx(198.63690442466094, rel=1e-12)
    assert choose_window_radius(base.replace(bs_density_per_m2=0.0)) == 100.0
    radii = [choose_window_radius(base.replace(bs_density_per_m2=d)) for d in (1e-6, 1e-5, 1e-4, 1e-3)]
    assert all(b > a for a, b in zip(radii, radii[1:]))
    # Bound holds at the chosen radius.
    r = radii[-1]
    p = base.replace(bs_density_per_m2=1e-3)
    tail = p.tx_power_w * p.bs_density_per_m2 * 2 * math.pi * r ** (2 - 4) / (4 - 2)
    assert tail <= 1e-6 * p.noise_power_w * (1 + 1e-12)
    for bad in (0.0, 0.02):
        with pytest.raises(ValueError):
            choose_window_radius(base, bad)


# --- service times ---------------------------------------------------------

def test_service_time_limits(base):
    from imdelay.montecarlo import SinrSample

    good = SinrSample(1.0, (), (), 1e12)
    service, ok = sample_service_time(base, good)
    assert ok and 0 < service < base.delay_threshold_s
    assert service == pytest.approx(base.packet_bits / (base.subband_hz * math.log2(1 + 1e12)), rel=1e-6)
    bad = SinrSample(1.0, (), (), 0.0)
    assert sample_service_time(base, bad) == (base.delay_threshold_s, False)


def test_service_times_bounded(base):
    service, ok = physical_service_sampler(base)(make_rng(3), 50_000)
    assert np.all(service > 0) and np.all(service <= base.delay_threshold_s)
    assert np.all(service[~ok] == base.delay_threshold_s)


def test_success_fraction_matches_closed_form(base):
    n = 100_000
    _, ok = physical_service_sampler(base)(make_rng(17), n)
    p_hat = ok.mean()
    assert abs(p_hat - success_probability(base)) <= 1.96 * math.sqrt(p_hat * (1 - p_hat) / n)


def test_exact_dispersion_never_hurts(base):
    sinr = sample_sinr(base, make_rng(4), 10_000)
    approx, _ = service_times(base, sinr, "approx")
    exact, _ = service_times(base, sinr, "exact")
    assert np.all(exact <= approx)


def test_physical_and_inverse_cdf_services_agree(base):
    n = 100_000
    physical, _ = physical_service_sampler(base)(make_rng(21), n)
    sampled = inverse_cdf_samples(delay_cdf(base), n, make_rng(22))
    ks = stats.ks_2samp(physical, sampled).statistic
    assert ks < 1.628 * math.sqrt(2 / n)  # 1% critical value


# --- queue -----------------------------------------------------------------

def test_event_loop_matches_lindley():
    rng = make_rng(8)
    arrivals = np.cumsum(rng.exponential(1.0, 5000))
    service = rng.uniform(0.2, 1.4, 5000)
    trace = simulate_fcfs(arrivals, service, np.ones(5000, bool), (arrivals[0], arrivals[-1]))
    np.testing.assert_allclose(trace.start - arrivals, lindley_waits(arrivals, service), atol=1e-9)
    np.testing.assert_allclose(trace.departures, trace.start + service, rtol=1e-15)
    assert trace.events == 10_000


def test_queue_config_errors(base):
    with pytest.raises(ConfigError):
        run_queue(base, 1000, 2000, 1)
    with pytest.raises(ConfigError):
        run_queue(base, 1000, 1000, 1)
    with pytest.raises(ConfigError):
        run_queue(base.replace(arrival_rate_pps=0.0), 10_000, 100, 1)
    with pytest.raises(ConfigError):
        run_queue(base, 10_000, 100, 1, n_batches=10)


def test_queue_is_deterministic(base):
    a = run_queue(base, 20_000, 1000, 99)
    b = run_queue(base, 20_000, 1000, 99)
    assert a == b
    assert run_queue(base, 20_000, 1000, 100) != a


def test_empty_queue_regime(base):
    p = base.replace(arrival_rate_pps=10.0)  # rho ~ 0.005
    sim = run_queue(p, 50_000, 1000, 5)
    assert sim.mean_wait_s.value <= 2 * sim.mean_wait_s.half_width + 0.01 * sim.mean_service_s.value


def test_md1_wait(base):
    d = 5e-4
    p = base.replace(arrival_rate_pps=0.5 / d)
    sim = run_queue(p, 420_000, 20_000, 6, service_sampler=deterministic_service(d))
    lam = p.arrival_rate_pps
    expected = lam * d * d / (2 * (1 - lam * d))
    assert sim.mean_wait_s.value == pytest.approx(expected, rel=0.02)
    assert sim.var_service_s2.value == pytest.approx(0.0, abs=1e-20)


def test_default_scenario_against_closed_forms(base):
    a = analyze(base)
    sim = run_queue(base, 220_000, 20_000, 12)
    assert sim.mean_delay_s.value == pytest.approx(a.t_m_s, rel=0.03)
    assert sim.var_delay_s2.value == pytest.approx(a.jitter_s2, rel=0.10)
    assert sim.mean_delay_s.covers(a.t_m_s) or abs(sim.mean_delay_s.value - a.t_m_s) < 2 * sim.mean_delay_s.half_width


@pytest.fixture(scope="module")
def loaded_run():
    from imdelay.core import default_params

    p0 = default_params()
    p = p0.replace(arrival_rate_pps=0.7 / analyze(p0).e_tt_s)
    return p, run_queue(p, 320_000, 20_000, 31)


def test_little_law(loaded_run):
    _, sim = loaded_run
    assert sim.little_relative_error() <= 0.02


def test_failure_rate_matches_success_probability(loaded_run):
    p, sim = loaded_run
    assert sim.p_s_hat.covers(success_probability(p))
    assert sim.n_failures == round((1 - sim.p_s_hat.value) * sim.n_packets)


def test_sojourn_variance_splits(loaded_run):
    _, sim = loaded_run
    total = sim.var_wait_s2.value + sim.var_service_s2.value
    hw = sim.var_delay_s2.half_width + sim.var_wait_s2.half_width + sim.var_service_s2.half_width
    assert abs(sim.var_delay_s2.value - total) <= hw


def test_report_invariants(loaded_run):
    _, sim = loaded_run
    assert 0 <= sim.p_s_hat.value <= 1
    for est in (sim.mean_delay_s, sim.var_delay_s2, sim.mean_wait_s, sim.var_wait_s2, sim.mean_service_s):
        assert math.isfinite(est.value) and est.half_width > 0
    assert sim.n_batches >= 30
    assert sim.busy_fraction == pytest.approx(0.7, rel=0.03)
    assert SimReport.from_dict(sim.to_dict()) == sim


def test_replications_pool(base):
    one = run_queue(base, 20_000, 1000, 7)
    three = run_queue(base, 20_000, 1000, 7, replications=3)
    assert three.n_packets == 3 * one.n_packets
    assert three.n_batches == 3 * one.n_batches
    assert three.mean_delay_s.half_width < one.mean_delay_s.half_width


def test_success_only_statistics(base):
    allp = run_queue(base, 30_000, 1000, 4)
    okp = run_queue(base, 30_000, 1000, 4, delay_stats="success_only")
    assert okp.mean_service_s.value < allp.mean_service_s.value
    assert okp.mean_service_s.value < base.delay_threshold_s
    assert okp.p_s_hat == allp.p_s_hat


def test_frozen_topology_runs(base):
    sim = run_queue(base.replace(bs_density_per_m2=1e-4), 20_000, 1000, 4, frozen_topology=True)
    assert 0 < sim.p_s_hat.value <= 1


def test_derive_seed_is_stable_and_distinct():
    seeds = {derive_seed(1, k) for k in range(100)}
    assert len(seeds) == 100
    assert derive_seed(1, 5) == derive_seed(1, 5)
    assert all(0 <= s < 2**64 for s in seeds)
