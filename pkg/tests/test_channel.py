import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from mdiqkd.channel import (
    ChannelError, ChannelSpec, RytovInputs, TransmittanceDistribution, cutoff_grid,
    discretize, empty_distribution, pdtc_density, rytov_variance, sample_transmittance,
    truncate_above,
)


def density_oracle(eta, eta0, sigma2):
    mp.mp.dps = 50
    eta, eta0, s2 = mp.mpf(eta), mp.mpf(eta0), mp.mpf(sigma2)
    s = mp.sqrt(s2)
    return mp.exp(-(mp.log(eta / eta0) + s2 / 2) ** 2 / (2 * s2)) / (mp.sqrt(2 * mp.pi) * s * eta)


def log_quad(fun, spec, lo=None, hi=None):
    """Integrate fun(eta) d(eta) by substituting eta = exp(x)."""
    s = math.sqrt(spec.sigma2)
    lo = spec.log_mean - 12 * s if lo is None else math.log(lo)
    hi = spec.log_mean + 12 * s if hi is None else math.log(hi)
    val, _ = integrate.quad(lambda x: fun(math.exp(x)) * math.exp(x), lo, hi,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


@pytest.mark.parametrize("eta,eta0,sigma2", [(0.1, 0.1, 1.0), (0.0026, 10 ** -2.5, 1.0),
                                             (0.5, 0.316, 0.25), (1e-4, 0.01, 2.0)])
def test_density_matches_high_precision(eta, eta0, sigma2):
    got = pdtc_density(eta, ChannelSpec(eta0, sigma2))
    assert got == pytest.approx(float(density_oracle(eta, eta0, sigma2)), rel=1e-12)


@pytest.mark.parametrize("sigma2", [0.25, 1.0, 2.0])
def test_density_normalized_and_mean_is_eta0(sigma2):
    spec = ChannelSpec(0.1, sigma2)
    f = lambda e: float(pdtc_density(e, spec))
    assert log_quad(f, spec) == pytest.approx(1.0, abs=1e-6)
    assert log_quad(lambda e: e * f(e), spec) == pytest.approx(0.1, rel=1e-6)


def test_density_errors():
    with pytest.raises(ChannelError):
        pdtc_density(0.0, ChannelSpec(0.1, 1.0))
    with pytest.raises(ChannelError):
        pdtc_density(-0.1, ChannelSpec(0.1, 1.0))
    with pytest.raises(ChannelError, match="static"):
        pdtc_density(0.1, ChannelSpec(0.1, 0.0))


@pytest.mark.parametrize("eta0,sigma2", [(0.0, 1.0), (1.5, 1.0), (0.1, -0.1)])
def test_channel_spec_validation(eta0, sigma2):
    with pytest.raises(ChannelError):
        ChannelSpec(eta0, sigma2)


def test_rytov_variance_power_law():
    k = 2 * math.pi / 1550e-9
    base = RytovInputs(1e-14, k, 10e3)
    expected = 1.23 * 1e-14 * k ** (7 / 6) * 10e3 ** (11 / 6)
    assert rytov_variance(base) == pytest.approx(expected, rel=1e-14)
    assert rytov_variance(RytovInputs.from_wavelength(1e-14, 1550e-9, 10e3)) == pytest.approx(expected)
    doubled = rytov_variance(RytovInputs(1e-14, k, 20e3)) / rytov_variance(base)
    assert doubled == pytest.approx(2 ** (11 / 6), rel=1e-12)
    assert 0 < rytov_variance(RytovInputs(1e-300, k, 10e3)) < 1e-280


@pytest.mark.parametrize("kw", [dict(cn2=0.0, k=1.0, L=1.0), dict(cn2=1e-14, k=-1.0, L=1.0),
                                dict(cn2=1e-14, k=1.0, L=0.0)])
def test_rytov_inputs_positive(kw):
    with pytest.raises(ChannelError):
        RytovInputs(**kw)


def test_sampler_static_and_deterministic():
    assert np.all(sample_transmittance(ChannelSpec(0.2, 0.0), 1, 100) == 0.2)
    spec = ChannelSpec(0.01, 1.0)
    a = sample_transmittance(spec, 7, 1000)
    b = sample_transmittance(spec, 7, 1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_transmittance(spec, 8, 1000))


def test_sampler_mean_and_ks():
    spec = ChannelSpec(10 ** -2.5, 1.0)
    x = sample_transmittance(spec, 2024, 10**6)
    assert abs(x.mean() / spec.eta0 - 1) < 0.01
    # independent reference: scipy's log-normal
    ref = stats.lognorm(s=1.0, scale=math.exp(spec.log_mean))
    assert stats.kstest(x, ref.cdf).statistic < 0.005
    # and against quadrature of the density at 60 quantiles
    xs = np.sort(x)
    probes = np.quantile(xs, np.linspace(0.01, 0.99, 60))
    f = lambda e: float(pdtc_density(e, spec))
    quad_cdf = np.array([log_quad(f, spec, hi=p) for p in probes])
    ecdf = np.searchsorted(xs, probes, side="right") / len(xs)
    assert np.max(np.abs(ecdf - quad_cdf)) < 0.005


def test_discretize_static_single_bin():
    d = discretize(ChannelSpec(0.3, 0.0), 1)
    assert d.bins == [(0.3, 0.3, 0.3, 1.0)]
    assert d.survival == 1.0


@pytest.mark.parametrize("eta0", [10 ** -2.5, 10 ** -0.5, 10 ** -0.8])
def test_discretize_mass_and_mean(eta0):
    spec = ChannelSpec(eta0, 1.0)
    d = discretize(spec, 100)
    f = lambda e: float(pdtc_density(e, spec))
    quad_mass = log_quad(f, spec, d.eta_low[0], d.eta_high[-1])
    assert d.survival >= 0.999
    assert d.survival == pytest.approx(quad_mass, abs=1e-9)
    assert np.sum(d.probability) == pytest.approx(d.survival, abs=1e-9)
    assert abs(d.mean() / eta0 - 1) < 0.005
    # per-bin masses and conditional means against quadrature on a few bins
    for k in (0, 37, 50, 99):
        lo, hi = d.eta_low[k], d.eta_high[k]
        m = log_quad(f, spec, lo, hi)
        assert d.probability[k] == pytest.approx(m, rel=1e-7, abs=1e-15)
        if m > 1e-12:
            assert d.eta_repr[k] == pytest.approx(log_quad(lambda e: e * f(e), spec, lo, hi) / m,
                                                  rel=1e-7)


def test_discretize_structure():
    d = discretize(ChannelSpec(0.05, 1.0), 50)
    assert np.all(np.diff(d.eta_low) > 0)
    assert np.allclose(d.eta_high[:-1], d.eta_low[1:])
    assert np.all(d.eta_low < d.eta_repr) and np.all(d.eta_repr <= d.eta_high)
    ratios = d.eta_high / d.eta_low
    assert np.allclose(ratios, ratios[0])  # log-spaced
    with pytest.raises(ChannelError):
        discretize(ChannelSpec(0.05, 1.0), 1)


def test_mass_above_one_warning(caplog):
    spec = ChannelSpec(10 ** -0.5, 1.0)
    assert spec.mass_above_one() > 1e-4
    with caplog.at_level("WARNING"):
        discretize(spec)
    assert "above 1" in caplog.text
    caplog.clear()
    with caplog.at_level("WARNING"):
        discretize(ChannelSpec(10 ** -2.5, 1.0))
    assert caplog.text == ""


def test_truncate_identity_and_empty():
    d = discretize(ChannelSpec(0.01, 1.0))
    kept, frac = truncate_above(d, 0.0)
    assert frac == 1.0 and np.array_equal(kept.probability, d.probability)
    kept, frac = truncate_above(d, 1.1 * d.eta_high[-1] + 1.1)
    assert kept.is_empty and frac == 0.0
    kept, frac = truncate_above(d, 1.1)
    assert kept.is_empty and frac == 0.0
    with pytest.raises(ChannelError):
        truncate_above(d, -0.1)
    assert truncate_above(empty_distribution(), 0.0)[1] == 0.0


def test_truncate_survival_matches_quadrature():
    spec = ChannelSpec(10 ** -2.5, 1.0)
    d = discretize(spec, 100)
    kept, frac = truncate_above(d, 0.0026)
    # the kept mass is exactly the bins whose representative clears the cutoff; compare with
    # quadrature from the first kept bin's lower edge
    f = lambda e: float(pdtc_density(e, spec))
    expected = log_quad(f, spec, kept.eta_low[0], d.eta_high[-1]) / d.survival
    assert frac == pytest.approx(expected, rel=1e-7)
    # and the continuous survival above 0.0026 itself is within one bin's mass
    cont = 1 - float(spec.cdf(0.0026))
    assert abs(frac - cont) <= d.probability.max()


def test_cutoff_grid_keeps_suffixes():
    d = discretize(ChannelSpec(0.01, 1.0), 30)
    grid = cutoff_grid(d)
    assert grid[0] == 0.0 and len(grid) == len(d)
    for k, c in enumerate(grid):
        kept, _ = truncate_above(d, c)
        assert len(kept) == (len(d) - k if c <= 1 else 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(0.05, 2.0), st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_truncation_monotone(eta0, sigma2, cuts):
    d = discretize(ChannelSpec(eta0, sigma2), 40)
    fr = [truncate_above(d, c)[1] for c in sorted(cuts)]
    assert all(a >= b for a, b in zip(fr, fr[1:]))


def test_distribution_csv_round_trip(tmp_path):
    d = discretize(ChannelSpec(0.02, 0.5), 20)
    d.to_csv(tmp_path / "d.csv")
    back = TransmittanceDistribution.from_csv(tmp_path / "d.csv")
    assert np.allclose(back.probability, d.probability, rtol=1e-15)
    assert np.allclose(back.eta_repr, d.eta_repr, rtol=1e-15)
