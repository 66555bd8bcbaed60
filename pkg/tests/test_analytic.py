import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from imdelay.analytic import (
    LOG2_E,
    UnstableQueue,
    analyze,
    delay_cdf,
    expected_delay,
    expected_queuing_delay,
    fbl_rate,
    jitter,
    q_function,
    q_inverse,
    success_probability,
    theta,
    truncated_moment,
    waiting_variance,
)
from imdelay.core import ScenarioParams, default_params, dbm_to_watts
from imdelay.montecarlo import make_rng, run_queue, sample_sinr
from imdelay.validation import inverse_cdf_samples

# Bisection on the mpmath-integrated Gaussian tail (30 digits).
Q_INV_ORACLE = {
    1e-5: 4.2648907939228246285,
    1e-3: 3.0902323061678135354,
    1e-9: 5.9978070150076868614,
    0.1: 1.2815515655446004353,
    0.3: 0.52440051270804081597,
}


@st.composite
def scenarios(draw, **fixed):
    values = dict(
        tx_power_w=dbm_to_watts(draw(st.floats(0.0, 40.0))),
        serving_distance_m=draw(st.floats(1.0, 50.0)),
        noise_psd_w_per_hz=10.0 ** draw(st.floats(-13.0, -9.0)),
        bandwidth_hz=10.0 ** draw(st.floats(6.0, 9.0)),
        n_machines=draw(st.integers(1, 300)),
        path_loss_exponent=draw(st.floats(2.2, 6.0)),
        bs_density_per_m2=draw(st.sampled_from([0.0, 1e-6, 1e-5, 1e-4, 1e-3])),
        packet_bits=draw(st.floats(20.0, 250.0)),
        error_prob=10.0 ** draw(st.floats(-9.0, -0.05)),
        delay_threshold_s=10.0 ** draw(st.floats(-4.0, -2.0)),
        arrival_rate_pps=draw(st.floats(0.0, 200.0)),
    )
    values.update(fixed)
    return ScenarioParams(**values)


# --- q_inverse -------------------------------------------------------------

@pytest.mark.parametrize("eps,z", sorted(Q_INV_ORACLE.items()))
def test_q_inverse_matches_integrated_tail(eps, z):
    assert abs(q_inverse(eps) - z) <= 1e-10


def test_q_inverse_median_and_symmetry():
    assert q_inverse(0.5) == 0.0
    assert q_inverse(0.9) == pytest.approx(-q_inverse(0.1), abs=1e-12)
    assert q_inverse(0.9) < 0


@pytest.mark.parametrize("eps", np.concatenate([np.geomspace(1e-300, 0.5, 200), np.linspace(0.5, 1 - 1e-12, 50)]))
def test_q_inverse_against_ndtri(eps):
    assert abs(q_inverse(float(eps)) + special.ndtri(eps)) <= 1e-10 * max(1.0, abs(special.ndtri(eps)))


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
def test_q_inverse_domain(eps):
    with pytest.raises(ValueError):
        q_inverse(eps)


def test_q_function_round_trip():
    for z in (-3.0, 0.0, 1.0, 4.0, 8.0):
        assert q_inverse(q_function(z)) == pytest.approx(z, abs=1e-10)


# --- finite-blocklength rate -----------------------------------------------

def test_rate_zero_at_zero_sinr_and_median_eps(base):
    p = base.replace(error_prob=0.5)
    assert fbl_rate(p, 0.0, "approx") == 0.0
    assert fbl_rate(p, 0.0, "exact") == 0.0


def test_approx_rate_independent_recomputation(base):
    # B/N * ln(11)/ln(2) - sqrt(1/(2*100)) * Qinv(1e-5) / ln(2)
    expected = (100e6 / 50) * math.log(11.0) / math.log(2.0) \
        - math.sqrt(1.0 / 200.0) * Q_INV_ORACLE[1e-5] / math.log(2.0)
    assert fbl_rate(base, 10.0, "approx") == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(6918862.8021962615, rel=1e-12)


def test_exact_rate_uses_sinr_dependent_dispersion(base):
    g = 3.0
    v = g / 2 * (g + 2) / (g + 1) ** 2 * LOG2_E**2
    expected = base.subband_hz * math.log2(1 + g) - math.sqrt(v / base.packet_bits) * q_inverse(base.error_prob)
    assert fbl_rate(base, g, "exact") == pytest.approx(expected, rel=1e-12)


def test_exact_approx_gap_vanishes_at_high_sinr(base):
    gaps = [fbl_rate(base, g, "exact") - fbl_rate(base, g, "approx") for g in (1.0, 10.0, 100.0)]
    penalty = math.sqrt(1 / (2 * base.packet_bits)) * q_inverse(base.error_prob) * LOG2_E
    assert gaps[0] > gaps[1] > gaps[2] > 0
    assert gaps[2] < 1e-4 * penalty


def test_rate_vectorized(base):
    g = np.array([0.0, 1.0, 10.0])
    out = fbl_rate(base, g)
    assert out.shape == (3,)
    assert out[2] == pytest.approx(fbl_rate(base, 10.0))


# --- theta -----------------------------------------------------------------

def test_theta_unity_when_exponent_is_one(base):
    p = base.replace(error_prob=0.5)
    t = p.packet_bits * p.n_machines / p.bandwidth_hz  # makes (N/B)(s/t) = 1
    assert theta(p, t) == pytest.approx(1.0, rel=1e-14)


def test_theta_vanishes_at_long_delays_for_median_eps(base):
    p = base.replace(error_prob=0.5)
    assert theta(p, 1e6) < 1e-9


def test_theta_table1_value(base):
    exponent = (50 / 100e6) * (100 / 1e-3) \
        + (50 / 100e6) * math.sqrt(1 / 200) * Q_INV_ORACLE[1e-5] / math.log(2)
    assert theta(base, 1e-3) == pytest.approx(2.0**exponent - 1.0, rel=1e-12)
    assert theta(base, 1e-3) == pytest.approx(0.035265079945529424, rel=1e-12)


def test_theta_sentinel_and_domain(base):
    assert theta(base, 1e-12) == math.inf
    with pytest.raises(ValueError):
        theta(base, 0.0)


@settings(max_examples=60, deadline=None)
@given(scenarios())
def test_theta_strictly_decreasing_with_floor(p):
    c = delay_cdf(p)
    t = np.geomspace(p.delay_threshold_s * 1e-2, p.delay_threshold_s * 1e3, 200)
    th = c.theta(t)
    finite = th[np.isfinite(th)]
    assert np.all(np.diff(finite) < 0)
    if p.error_prob < 0.5:
        assert np.all(finite > c.theta_floor)


# --- delay CDF -------------------------------------------------------------

def test_cdf_coefficients(base):
    c = delay_cdf(base)
    assert c.noise_coeff == pytest.approx(1e4 * 1e-10 * 100e6 / (50 * base.tx_power_w), rel=1e-14)
    assert c.interference_coeff == pytest.approx(1e-5 * 2 * math.pi**2 * 100 / 4, rel=1e-14)
    assert c.theta_floor > 0
    assert delay_cdf(base.replace(error_prob=0.5)).theta_floor == 0.0
    assert delay_cdf(base.replace(bs_density_per_m2=0.0)).interference_coeff == 0.0


def test_cdf_tends_to_one_without_interference_at_median_eps(base):
    c = delay_cdf(base.replace(bs_density_per_m2=0.0, error_prob=0.5))
    assert c.evaluate(1e9) == pytest.approx(1.0, abs=1e-9)
    assert c.saturation == 1.0


def test_cdf_zero_at_origin(base):
    c = delay_cdf(base)
    assert c.evaluate(0.0) == 0.0
    assert c.evaluate(1e-12) == 0.0


def test_cdf_saturates_below_one(base):
    c = delay_cdf(base)
    assert c.saturation < 1.0
    assert c.evaluate(1e9) == pytest.approx(c.saturation, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(scenarios(bs_density_per_m2=0.0))
def test_noise_only_closed_form(p):
    c = delay_cdf(p)
    alpha = p.path_loss_exponent
    for t in np.geomspace(p.delay_threshold_s / 10, p.delay_threshold_s * 10, 7):
        th = theta(p, float(t))
        if th == math.inf:
            continue
        expected = math.exp(-p.serving_distance_m**alpha * max(th, 0.0) * p.noise_psd_w_per_hz
                            * p.bandwidth_hz / (p.n_machines * p.tx_power_w))
        assert c.evaluate(float(t)) == pytest.approx(expected, rel=1e-12, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(scenarios())
def test_cdf_bounded_and_nondecreasing(p):
    c = delay_cdf(p)
    t = np.linspace(0.0, 5 * p.delay_threshold_s, 1000)
    f = c.evaluate(t)
    assert np.all((f >= 0) & (f <= 1))
    assert np.all(np.diff(f) >= 0)


def test_cdf_matches_physical_sinr_ccdf(base):
    """F(T_th) against 10^6 physical SINR draws."""
    c = delay_cdf(base)
    sinr = sample_sinr(base, make_rng(7), 1_000_000)
    f = c.evaluate(1e-3)
    emp = float(np.mean(sinr > theta(base, 1e-3)))
    assert abs(emp - f) <= 4 * math.sqrt(f * (1 - f) / 1_000_000)


# --- success probability ---------------------------------------------------

def test_success_equals_cdf_at_deadline(base):
    assert success_probability(base) == delay_cdf(base).evaluate(base.delay_threshold_s)


def test_success_tends_to_one_with_huge_power(base):
    p = base.replace(error_prob=0.5, bs_density_per_m2=0.0, tx_power_w=1e12)
    assert success_probability(p) == pytest.approx(1.0, abs=1e-9)


def test_success_decreases_with_density_and_distance(base):
    dens = [success_probability(base.replace(bs_density_per_m2=d)) for d in (0, 1e-6, 1e-5, 1e-4, 1e-3)]
    assert all(b < a for a, b in zip(dens, dens[1:]))
    dist = [success_probability(base.replace(serving_distance_m=x)) for x in (5, 10, 15, 20, 30)]
    assert all(b < a for a, b in zip(dist, dist[1:]))


# Analytic P_s over s x N_m; each cell checked against 10^5 physical
# service draws (|z| <= 1.45 across the grid) when frozen.
PS_TABLE = {
    (20, 10): 0.9460932532123014, (20, 50): 0.945732648387226, (20, 100): 0.9453883585913487,
    (100, 10): 0.7578133169983652, (100, 50): 0.7544906973699445, (100, 100): 0.7504677109134611,
    (250, 10): 0.49831031000732506, (250, 50): 0.4857209548732318, (250, 100): 0.46982521623089185,
}


@pytest.mark.parametrize("cell,expected", sorted(PS_TABLE.items()))
def test_success_table(cell, expected):
    s, n = cell
    assert success_probability(default_params(packet_bits=s, n_machines=n)) == pytest.approx(expected, rel=1e-9)


def test_success_table_trends():
    for s in (20, 100, 250):
        row = [PS_TABLE[(s, n)] for n in (10, 50, 100)]
        assert row[0] > row[1] > row[2]
    for n in (10, 50, 100):
        col = [PS_TABLE[(s, n)] for s in (20, 100, 250)]
        assert col[0] > col[1] > col[2]


# --- truncated moments -----------------------------------------------------

def test_moments_all_truncated_when_cdf_vanishes(base):
    p = base.replace(packet_bits=250.0, n_machines=300, bandwidth_hz=1e6)  # Theta capped on [0, T_th]
    c = delay_cdf(p)
    assert c.evaluate(p.delay_threshold_s) == 0.0
    for k in (1, 2, 3):
        assert truncated_moment(c, k) == p.delay_threshold_s**k


def test_moments_zero_when_cdf_is_one(base, monkeypatch):
    c = delay_cdf(base)
    monkeypatch.setattr(type(c), "evaluate", lambda self, t: np.where(np.asarray(t) > 0, 1.0, 0.0)[()])
    for k in (1, 2, 3):
        assert truncated_moment(c, k) == pytest.approx(0.0, abs=1e-15)


def test_moment_order_checked(base):
    with pytest.raises(ValueError):
        truncated_moment(delay_cdf(base), 4)


def test_moments_match_inverse_cdf_sampling(base):
    c = delay_cdf(base)
    x = inverse_cdf_samples(c, 1_000_000, make_rng(11))
    for k in (1, 2, 3):
        xk = x**k
        se = xk.std(ddof=1) / math.sqrt(x.size)
        assert abs(truncated_moment(c, k) - xk.mean()) <= 4 * se


@settings(max_examples=40, deadline=None)
@given(scenarios())
def test_moment_chain(p):
    c = delay_cdf(p)
    t_th = p.delay_threshold_s
    m1, m2, m3 = (truncated_moment(c, k) for k in (1, 2, 3))
    tol = 1e-12
    assert 0 <= m3 / t_th**2 <= m2 / t_th + tol * t_th
    assert m2 / t_th <= m1 + tol * t_th
    assert m1 <= t_th


# --- queuing ---------------------------------------------------------------

def test_pk_zero_arrivals(base):
    assert expected_queuing_delay(base.replace(arrival_rate_pps=0.0), 1e-3, 1e-6) == 0.0


def test_pk_reduces_to_md1(base):
    d, lam = 4e-4, 1500.0
    p = base.replace(arrival_rate_pps=lam)
    assert expected_queuing_delay(p, d, d * d) == pytest.approx(lam * d * d / (2 * (1 - lam * d)), rel=1e-15)


def test_pk_unstable(base):
    p = base.replace(arrival_rate_pps=1000.0)
    with pytest.raises(UnstableQueue) as info:
        expected_queuing_delay(p, 1e-3, 1e-6)
    assert info.value.rho == pytest.approx(1.0)


def test_pk_matches_event_simulation(base):
    a = analyze(base)
    sim = run_queue(base, 220_000, 20_000, seed=3)
    # Mean wait is tiny at rho ~ 0.05; compare within the batch-means CI (widened to 3 half-widths).
    assert abs(sim.mean_wait_s.value - a.e_tw_s) <= 3 * sim.mean_wait_s.half_width


def test_expected_delay(base):
    r = expected_delay(base)
    assert r.t_m_s == r.e_tt_s + r.e_tw_s
    assert r.rho == pytest.approx(base.arrival_rate_pps * r.e_tt_s)
    zero = expected_delay(base.replace(arrival_rate_pps=0.0))
    assert zero.t_m_s == zero.e_tt_s and zero.e_tw_s == 0.0


def test_expected_delay_increases_with_load(base):
    values = [expected_delay(base.replace(arrival_rate_pps=lam)).t_m_s for lam in (0, 100, 500, 1000, 1500)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_expected_delay_unstable(base):
    with pytest.raises(UnstableQueue) as info:
        expected_delay(base.replace(arrival_rate_pps=5000.0))
    assert info.value.report is not None and info.value.report.p_s > 0


def test_jitter_without_arrivals(base):
    r = jitter(base.replace(arrival_rate_pps=0.0))
    assert r.var_tw_s2 == 0.0
    assert r.jitter_s2 == r.var_tt_s2


def test_jitter_md1_substitution(base):
    d, lam = 4e-4, 1500.0
    p = base.replace(arrival_rate_pps=lam)
    expected = (lam * d * d / (2 * (1 - lam * d))) ** 2 + lam * d**3 / (3 * (1 - lam * d))
    assert waiting_variance(p, d, d * d, d**3) == pytest.approx(expected, rel=1e-14)
    literal = (lam * d * d / (2 * (1 - lam * d))) ** 2 + lam * d**3 / (2 * (1 - lam * d))
    assert waiting_variance(p, d, d * d, d**3, "paper_literal") == pytest.approx(literal, rel=1e-14)


def test_jitter_identities(base):
    for mode in ("standard", "paper_literal"):
        r = jitter(base, mode)
        assert r.jitter_s2 == r.var_tt_s2 + r.var_tw_s2
        assert r.t_m_s == r.e_tt_s + r.e_tw_s
        assert r.tw_variance_mode == mode
    assert jitter(base, "paper_literal").jitter_s2 > jitter(base, "standard").jitter_s2


def test_default_report_values(base):
    r = analyze(base)
    assert 0 <= r.p_s <= 1
    assert 0 <= r.e_tt_s <= base.delay_threshold_s
    assert r.e_tt2_s2 <= base.delay_threshold_s * r.e_tt_s
    assert r.e_tt3_s3 <= base.delay_threshold_s * r.e_tt2_s2
    assert r.var_tt_s2 >= 0 and r.var_tw_s2 >= 0


@settings(max_examples=30, deadline=None)
@given(scenarios())
def test_jitter_at_least_transmission_variance(p):
    r = analyze(p, allow_unstable=True)
    if r.stable:
        assert r.jitter_s2 >= r.var_tt_s2
    else:
        assert r.jitter_s2 is None


def test_analyze_unstable(base):
    p = base.replace(arrival_rate_pps=1e5)
    with pytest.raises(UnstableQueue):
        analyze(p)
    partial = analyze(p, allow_unstable=True)
    assert not partial.stable and partial.t_m_s is None and partial.e_tt_s > 0


def test_quadrature_failure_raises(base, monkeypatch):
    from imdelay import analytic

    def failing_quad(*args, **kwargs):
        return 0.5, 1e-3, {"ier": 1}, "maximum number of subdivisions reached"

    monkeypatch.setattr(analytic.integrate, "quad", failing_quad)
    with pytest.raises(analytic.QuadratureError) as info:
        truncated_moment(delay_cdf(base), 1)
    assert info.value.achieved == 1e-3
