import json
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdiqkd.detection import CountsRecord, counts_table
from mdiqkd.finite_key import (
    KeyRateResult, NoKeyError, NoStatisticsError, binary_entropy, check_bound_validity,
    default_validity_grid, e11_upper, epsilon_to_gamma, gains_and_errors, gamma_to_epsilon,
    key_rate, key_rate_arrays, single_photon_truth, standard_coefficients, y11_lower,
)
from mdiqkd.params import DeviceParams, ProtocolParams, db_to_transmittance

mp.mp.dps = 40

# a configuration with positive finite-key rate (20 dB / 5 dB, static)
POS_A = ProtocolParams(0.4347, 0.5296, 0.1003, 0.3928, 0.0484, 0.374)
POS_B = ProtocolParams(0.02735, 0.02068, 0.00392, 0.39269, 0.04605, 0.38624)
POS_ETA = (0.01, db_to_transmittance(5.0))


def truth_by_differentiation(ea, eb, dev):
    """d^2/dx dy of gain(x, y) exp(x + y) at the origin, in arbitrary precision."""
    al, be = mp.mpf(dev.eta_d * ea), mp.mpf(dev.eta_d * eb)
    y0, e = mp.mpf(dev.y0), mp.mpf(dev.e_dx)
    gain = lambda x, y: (2 * y0 * (al * x + be * y) + (al * x + be * y) ** 2 / 4) \
        * mp.exp((1 - al) * x + (1 - be) * y)
    err = lambda x, y: (y0 * (al * x + be * y) + ((al * x) ** 2 + (be * y) ** 2
                                                  + 8 * e * al * x * be * y) / 8) \
        * mp.exp((1 - al) * x + (1 - be) * y)
    y11 = mp.diff(gain, (0, 0), (1, 1))
    return float(y11), float(mp.diff(err, (0, 0), (1, 1)) / y11)


def test_binary_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
    assert binary_entropy(0.11) == pytest.approx(0.499916, abs=1e-6)
    with pytest.raises(ValueError):
        binary_entropy(1.2)
    with pytest.raises(ValueError):
        binary_entropy(-0.1)


@given(st.floats(0, 1))
def test_binary_entropy_symmetry(x):
    assert binary_entropy(x) == pytest.approx(binary_entropy(1 - x), abs=1e-12)


def test_gamma_epsilon():
    assert gamma_to_epsilon(0.0) == 1.0
    eps = gamma_to_epsilon(5.3)
    assert eps == pytest.approx(1.16e-7, rel=0.01)
    assert eps < 1.2e-7
    assert epsilon_to_gamma(eps) == pytest.approx(5.3, abs=1e-9)
    g = np.linspace(0, 8, 20)
    assert np.all(np.diff([gamma_to_epsilon(x) for x in g]) < 0)


def bound_oracle(n, n_eff, p, gamma):
    q = mp.mpf(n) / (mp.mpf(n_eff) * mp.mpf(p))
    d = gamma * mp.sqrt(q / (mp.mpf(n_eff) * mp.mpf(p)))
    return q, q + d, max(q - d, 0)


def test_gains_match_oracle(table1_30, dev, eta_30):
    a, b = table1_30
    c = counts_table(a, b, *eta_30, dev, dev.n_pulses)
    g = gains_and_errors(c, a, b, dev)
    for i, (_, pi) in enumerate(a.decoys()):
        for j, (_, pj) in enumerate(b.decoys()):
            for arr, up, low, cnt in ((g.q, g.q_up, g.q_low, c.n_x), (g.t, g.t_up, g.t_low, c.m_x)):
                q, hi, lo = bound_oracle(cnt[i, j], c.n_effective, pi * pj, mp.mpf("5.3"))
                assert arr[i, j] == pytest.approx(float(q), rel=1e-12, abs=1e-300)
                assert up[i, j] == pytest.approx(float(hi), rel=1e-12, abs=1e-300)
                assert low[i, j] == pytest.approx(float(lo), rel=1e-12, abs=1e-300)
                # re-multiplication recovers the counts
                assert arr[i, j] * c.n_effective * pi * pj == pytest.approx(cnt[i, j], rel=1e-15,
                                                                             abs=1e-300)
    assert np.all(g.q_low <= g.q) and np.all(g.q <= g.q_up)
    assert np.all(g.t_low <= g.t) and np.all(g.t <= g.t_up)
    assert np.all(g.t <= g.q)
    assert np.all(g.q_low >= 0) and np.all(g.t_low >= 0)


def test_gains_gamma_zero_and_zero_gain(table1_30, dev, eta_30):
    a, b = table1_30
    c = counts_table(a, b, *eta_30, dev.replace(gamma=0.0), dev.n_pulses)
    g = gains_and_errors(c, a, b, dev.replace(gamma=0.0))
    assert np.array_equal(g.q_up, g.q) and np.array_equal(g.q_low, g.q)
    # (omega, omega) with omega = 0 has no counts
    assert g.q[2, 2] == 0 and g.q_up[2, 2] == 0 and g.q_low[2, 2] == 0


def test_gains_no_statistics(table1_30, dev):
    a, b = table1_30
    c = counts_table(a, b, 0.1, 0.1, dev, 0.0)
    with pytest.raises(NoStatisticsError):
        gains_and_errors(c, a, b, dev)


@pytest.mark.parametrize("ea,eb", [(10 ** -2.5, 10 ** -0.5), (1.0, 1.0), (1e-4, 1e-4), (0.05, 0.7)])
def test_truth_oracle_two_routes(ea, eb, dev):
    y_fft, e_fft = single_photon_truth(ea, eb, dev)
    y_mp, e_mp = truth_by_differentiation(ea, eb, dev)
    assert y_fft == pytest.approx(y_mp, rel=1e-10)
    assert e_fft == pytest.approx(e_mp, rel=1e-9)


def test_standard_bound_valid_on_grid(table1_30, table1_33, dev):
    assert len(default_validity_grid()) == 20
    for a, b in (table1_30, table1_33):
        assert check_bound_validity(a, b, dev, "standard") == []


def test_printed_form_is_not_a_bound(table1_30, dev):
    """The all-plus combination overestimates the single-photon yield."""
    a, b = table1_30
    for conv in ("alice", "geometric"):
        bad = check_bound_validity(a, b, dev, "printed", conv)
        assert len(bad) > 10


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 0.9), st.floats(0.05, 0.9), st.floats(0.05, 0.9),
       st.floats(1e-3, 0.9), st.floats(0.05, 0.9), st.floats(0.05, 0.9),
       st.floats(0, 0.02), st.floats(0, 40), st.floats(0, 40))
def test_standard_bound_valid_random(mu_a, rnu_a, rom_a, mu_b, rnu_b, rom_b, omega, la, lb):
    """Valid for arbitrary asymmetric intensities, including omega > 0."""
    nu_a, nu_b = mu_a * rnu_a, mu_b * rnu_b
    om = min(omega, 0.5 * min(nu_a, nu_b))
    if not (nu_a > om and nu_b > om and nu_a - om > 1e-6 and nu_b - om > 1e-6):
        return
    a = ProtocolParams(0.5, mu_a, nu_a, 0.4, 0.2, 0.2, omega=om)
    b = ProtocolParams(0.5, mu_b, nu_b, 0.4, 0.2, 0.2, omega=om)
    dev = DeviceParams()
    grid = [(10 ** (-la / 10), 10 ** (-lb / 10))]
    assert check_bound_validity(a, b, dev, "standard", grid=grid, rtol=1e-7) == []


def test_standard_coefficients_reduce_to_symmetric_form():
    p = ProtocolParams(0.5, 0.4, 0.1, 0.5, 0.2, 0.2, omega=0.01)
    k, denom = standard_coefficients(p, p)[:2]
    mu, nu, om = 0.4, 0.1, 0.01
    # symmetric closed form: Y11 >= [(mu^2-om^2)... ] / [(mu-om)(nu-om)^2 ... ]; the ratio K
    # equals (mu+om)/(nu+om) * ((mu-om)/(nu-om))^2 for symmetric levels
    g = lambda n: (mu ** n - om ** n) / (nu ** n - om ** n)
    assert k == pytest.approx(g(2) * g(1))


def test_y11_regression_fixture(table1_30, dev, eta_30):
    a, b = table1_30
    c = counts_table(a, b, *eta_30, dev, dev.n_pulses)
    y = y11_lower(gains_and_errors(c, a, b, dev), a, b)
    assert y == pytest.approx(1.0614238571288564e-04, rel=1e-9)
    y_true, _ = single_photon_truth(*eta_30, dev)
    assert y <= y_true


def test_e11_ideal_devices_vanishes_with_weak_decoys():
    ideal = DeviceParams(y0=0.0, e_dx=0.0, e_dz=0.0, gamma=0.0)
    prev = 1.0
    for nu in (0.1, 0.03, 0.01, 0.003):
        p = ProtocolParams(0.5, 2 * nu, nu, 0.5, 0.2, 0.2)
        c = counts_table(p, p, 0.1, 0.1, ideal, 1e12)
        g = gains_and_errors(c, p, p, ideal)
        e = e11_upper(g, y11_lower(g, p, p), p, p)
        assert 0 <= e < prev
        prev = e
    assert prev < 0.01


def test_e11_requires_yield(table1_30, dev, eta_30):
    a, b = table1_30
    g = gains_and_errors(counts_table(a, b, *eta_30, dev, 1e12), a, b, dev)
    with pytest.raises(NoKeyError, match="yield bound vanishes"):
        e11_upper(g, 0.0, a, b)


def test_all_zero_gains_give_zero_yield(table1_30, dev):
    a, b = table1_30
    c = counts_table(a, b, 0.0, 0.0, dev, 1e12)
    assert y11_lower(gains_and_errors(c, a, b, dev), a, b) == 0.0


def test_key_rate_formula_consistency(dev):
    c = counts_table(POS_A, POS_B, *POS_ETA, dev, dev.n_pulses)
    r = key_rate(c, POS_A, POS_B, dev)
    p1 = lambda s: s * math.exp(-s)
    expected = POS_A.p_s * POS_B.p_s * (
        r.y11_low * p1(POS_A.s) * p1(POS_B.s) * (1 - binary_entropy(r.e11_up))
        - dev.f * r.q_zz * binary_entropy(r.e_zz))
    assert r.rate > 0
    assert r.rate == pytest.approx(expected, rel=1e-12)
    assert r.rate <= POS_A.p_s * POS_B.p_s * r.y11_low
    assert r.secret_bits == pytest.approx(r.rate * dev.n_pulses)
    assert r.q_zz == pytest.approx(c.n_zz / (dev.n_pulses * POS_A.p_s * POS_B.p_s))
    assert r.e_zz == pytest.approx(c.m_zz / c.n_zz)
    assert 0 <= r.e11_up <= 1


def test_key_rate_maximal_regime():
    """f = 1, no Z errors: the rate is the privacy term alone."""
    dev = DeviceParams(f=1.0, e_dz=0.0, y0=0.0, gamma=0.0)
    c = counts_table(POS_A, POS_B, *POS_ETA, dev, dev.n_pulses)
    r = key_rate(c, POS_A, POS_B, dev)
    assert r.e_zz == 0.0
    p1 = lambda s: s * math.exp(-s)
    assert r.rate == pytest.approx(POS_A.p_s * POS_B.p_s * p1(POS_A.s) * p1(POS_B.s)
                                   * r.y11_low * (1 - binary_entropy(r.e11_up)), rel=1e-12)


def test_key_rate_zero_reasons(table1_30, dev):
    a, b = table1_30
    r = key_rate(counts_table(a, b, 0.0, 0.0, dev, 1e12), a, b, dev)
    assert r.rate == 0 and r.reason == "no Z detections"
    r = key_rate(counts_table(a, b, 0.1, 0.1, dev, 0.0), a, b, dev)
    assert r.rate == 0 and r.reason == "no retained pulses"


def test_high_phase_error_gives_no_key():
    """Once e11 reaches 1/2 the privacy term is gone and the rate is 0, not negative."""
    dev = DeviceParams(e_dx=0.499)
    c = counts_table(POS_A, POS_B, *POS_ETA, dev, dev.n_pulses)
    r = key_rate(c, POS_A, POS_B, dev)
    assert r.rate == 0.0 and r.raw_rate < 0


def test_33db_static_rate_is_zero(table1_33, dev):
    a, b = table1_33
    c = counts_table(a, b, db_to_transmittance(25), db_to_transmittance(8), dev, dev.n_pulses)
    assert key_rate(c, a, b, dev).rate == 0.0


def test_rate_monotone_in_statistics_and_confidence(dev):
    base = counts_table(POS_A, POS_B, *POS_ETA, dev, 1.0)
    rates_n = []
    for n in np.logspace(10, 14, 10):
        r = key_rate(base.scaled(n), POS_A, POS_B, dev)
        rates_n.append(r.rate)
    assert all(x <= y for x, y in zip(rates_n, rates_n[1:]))
    assert rates_n[-1] > 0
    c = base.scaled(dev.n_pulses)
    rates_g = [key_rate(c, POS_A, POS_B, dev.replace(gamma=g)).rate for g in np.linspace(0, 8, 10)]
    assert all(x >= y for x, y in zip(rates_g, rates_g[1:]))


def test_key_rate_arrays_match_scalar(dev, table1_30):
    a, b = POS_A, POS_B
    ea = np.array([0.005, 0.01, 0.02])[:, None]
    eb = np.array([0.2, 0.3])[None, :]
    grid = counts_table(a, b, ea, eb, dev, dev.n_pulses)
    arr = key_rate_arrays(grid, a, b, dev)
    for i in range(3):
        for j in range(2):
            r = key_rate(counts_table(a, b, ea[i, 0], eb[0, j], dev, dev.n_pulses), a, b, dev)
            assert arr["rate"][i, j] == pytest.approx(r.rate, rel=1e-12, abs=1e-300)


def test_result_serialization(dev):
    r = key_rate(counts_table(POS_A, POS_B, *POS_ETA, dev, dev.n_pulses), POS_A, POS_B, dev)
    d = json.loads(r.to_jsonl())
    assert d["rate"] == r.rate and d["form"] == "standard"
    assert len(r.csv_row()) == len(KeyRateResult.CSV_FIELDS)
