import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdiqkd.probe import (
    CalibrationCurve, CalibrationError, FWHM_PER_SIGMA, NoPulseError, ProbeError, ProbeFrame,
    closed_loop, estimate_series, estimate_transmittance, fit_calibration, frame_sum,
    gaussian_fit, pulse_area, read_frame, read_frame_binary, read_frame_csv, synthetic_frame,
    write_frame_binary, write_frame_csv,
)


def test_frame_defaults():
    f = synthetic_frame(1.0)
    assert len(f) == 80 and f.dt == pytest.approx(0.2e-9)
    assert f.duration == pytest.approx(16e-9)
    with pytest.raises(ProbeError):
        ProbeFrame(np.zeros(10), dt=0.0)
    with pytest.raises(ProbeError):
        ProbeFrame(np.array([0.0, np.nan]))


def test_gaussian_fit_noiseless_recovery():
    f = synthetic_frame(1.0, fwhm=3e-9)
    fit = gaussian_fit(f)
    center = 0.5 * f.dt * (len(f) - 1)
    assert fit.amplitude == pytest.approx(1.0, rel=1e-6)
    assert fit.fwhm == pytest.approx(3e-9, rel=1e-6)
    assert fit.center == pytest.approx(center, rel=1e-6)
    assert abs(fit.offset) < 1e-6
    assert fit.area == pytest.approx(pulse_area(1.0), rel=1e-6)
    assert fit.rms_residual < 1e-6


def test_gaussian_fit_recovers_offset_and_shift():
    f = synthetic_frame(0.7, center=1e-6 + 6e-9, offset=0.05, t0=1e-6)
    fit = gaussian_fit(f)
    assert fit.center == pytest.approx(1e-6 + 6e-9, rel=1e-9)
    assert fit.offset == pytest.approx(0.05, rel=1e-6)
    assert fit.sigma * FWHM_PER_SIGMA == pytest.approx(3e-9, rel=1e-6)


def test_gaussian_fit_errors():
    with pytest.raises(NoPulseError, match="no pulse detected"):
        gaussian_fit(ProbeFrame(np.zeros(80)))
    with pytest.raises(NoPulseError):
        gaussian_fit(ProbeFrame(np.ones(5)))
    noise = np.random.default_rng(0).normal(0, 1, 80)
    with pytest.raises(NoPulseError):
        gaussian_fit(ProbeFrame(noise))


def test_gaussian_area_at_snr20_unbiased():
    true = pulse_area(1.0)
    areas = np.array([gaussian_fit(synthetic_frame(1.0, seed=k, snr=20)).area
                      for k in range(1000)])
    assert abs(areas.mean() / true - 1) < 0.02
    assert np.median(np.abs(areas / true - 1)) < 0.02


def test_frame_sum_basics():
    assert frame_sum(ProbeFrame(np.zeros(80))) == 0.0
    f = synthetic_frame(1.0)
    assert frame_sum(f) == pytest.approx(gaussian_fit(f).area, rel=0.01)
    with pytest.raises(ProbeError):
        frame_sum(ProbeFrame(np.array([])))


def test_frame_sum_translation_invariant():
    base = frame_sum(synthetic_frame(1.0))
    # centres that keep the pulse clear of the baseline windows
    for c in (6.5e-9, 7.2e-9, 8.6e-9, 9.3e-9):
        assert abs(frame_sum(synthetic_frame(1.0, center=c)) / base - 1) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0))
def test_area_linearity(alpha):
    f = synthetic_frame(1.0)
    g = f.scaled(alpha)
    assert frame_sum(g) == pytest.approx(alpha * frame_sum(f), rel=1e-9)
    assert gaussian_fit(g).area == pytest.approx(alpha * gaussian_fit(f).area, rel=1e-9)


def test_frame_sum_much_faster_than_fit():
    f = synthetic_frame(1.0, seed=1, snr=20)

    def best(fn, n):
        out = []
        for _ in range(5):
            t = time.perf_counter()
            for _ in range(n):
                fn(f)
            out.append((time.perf_counter() - t) / n)
        return min(out)

    assert best(gaussian_fit, 50) / best(frame_sum, 2000) >= 50


def test_calibration_linear_exact():
    pairs = [(a, 2.0 * a + 0.1) for a in np.linspace(0.0, 1.0, 6)]
    cal = fit_calibration(pairs, degree=1)
    assert cal.coefficients == pytest.approx((0.1, 2.0), abs=1e-12)
    assert cal.residual_rms < 1e-12
    assert cal.valid_range == (0.0, 1.0)


def test_calibration_cubic_with_noise():
    rng = np.random.default_rng(5)
    area = np.linspace(0.1, 1.0, 30)
    eta = 0.2 * area + 0.5 * area ** 2 + 0.3 * area ** 3
    noisy = eta * (1 + 0.01 * rng.normal(size=area.size))
    cal = fit_calibration(list(zip(area, noisy)), 3)
    assert cal.residual_rms < 0.015 * (eta.max() - eta.min())


def test_calibration_errors():
    with pytest.raises(CalibrationError, match="at least"):
        fit_calibration([(0.1, 0.1), (0.2, 0.2), (0.3, 0.3), (0.4, 0.4)], 3)
    with pytest.raises(CalibrationError, match="duplicate"):
        fit_calibration([(0.1, 0.1), (0.1, 0.2), (0.3, 0.3)], 1)
    with pytest.raises(CalibrationError, match="not invertible"):
        a = np.linspace(0, 1, 10)
        fit_calibration(list(zip(a, (a - 0.5) ** 2)), 2)
    with pytest.raises(CalibrationError):
        fit_calibration([(0.1, 0.1)] * 10, 6)


def test_calibration_json_round_trip(tmp_path):
    cal = fit_calibration([(a, a ** 2 + a) for a in np.linspace(0.1, 1, 8)], 2)
    cal.to_json(tmp_path / "cal.json")
    assert CalibrationCurve.from_json(tmp_path / "cal.json") == cal


def _unit_calibration():
    a = np.linspace(0.0, pulse_area(1.0), 10)
    return fit_calibration(list(zip(a, a / pulse_area(1.0))), 1)


def test_estimate_flat_and_clamped():
    cal = _unit_calibration()
    e = estimate_transmittance(ProbeFrame(np.zeros(80)), cal)
    assert e.eta == 0.0 and e.no_pulse
    e = estimate_transmittance(synthetic_frame(1.5), cal)
    assert e.out_of_range and e.eta == pytest.approx(1.0)
    e = estimate_transmittance(synthetic_frame(0.5), cal, "gaussian")
    assert e.eta == pytest.approx(0.5, rel=1e-6) and not e.out_of_range
    with pytest.raises(ProbeError):
        estimate_transmittance(synthetic_frame(0.5), cal, "peak")


def test_method_agreement_on_clean_frames():
    cal = _unit_calibration()
    for eta in np.arange(1, 11) / 10:
        f = synthetic_frame(eta)
        g = estimate_transmittance(f, cal, "gaussian").eta
        s = estimate_transmittance(f, cal, "sum").eta
        assert abs(g - s) / g < 0.02


def test_closed_loop_half():
    rep = closed_loop(seed=1, method="gaussian", test_levels=(0.5,), test_frames_per_level=100)
    assert abs(np.median(rep.estimates) - 0.5) / 0.5 < 0.02


def test_series_order_preserved_with_threads():
    cal = _unit_calibration()
    frames = [synthetic_frame(e) for e in np.linspace(0.1, 0.9, 9)]
    one = estimate_series(frames, cal, "sum", workers=1)
    four = estimate_series(frames, cal, "sum", workers=4)
    assert [e.eta for e in one] == [e.eta for e in four]
    assert all(a.eta < b.eta for a, b in zip(one, one[1:]))


def test_frame_io_round_trips(tmp_path):
    f = synthetic_frame(0.8, seed=2, snr=20, t0=3e-6)
    write_frame_csv(f, tmp_path / "f.csv")
    g = read_frame_csv(tmp_path / "f.csv")
    assert np.allclose(g.samples, f.samples, rtol=0, atol=0)
    assert g.dt == pytest.approx(f.dt, rel=1e-9) and g.t0 == f.t0
    write_frame_binary(f, tmp_path / "f.bin")
    h = read_frame(tmp_path / "f.bin")
    assert h.dt == f.dt and h.t0 == f.t0
    assert np.allclose(h.samples, f.samples, rtol=1e-6, atol=1e-7)


def test_frame_io_corrupt(tmp_path):
    (tmp_path / "bad.csv").write_text("time,voltage\n0,abc\n")
    with pytest.raises(ProbeError):
        read_frame_csv(tmp_path / "bad.csv")
    f = synthetic_frame(0.8)
    write_frame_binary(f, tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ProbeError):
        read_frame_binary(tmp_path / "t.bin")
    (tmp_path / "nonuniform.csv").write_text("time,voltage\n0,1\n1,2\n3,3\n")
    with pytest.raises(ProbeError):
        read_frame_csv(tmp_path / "nonuniform.csv")
