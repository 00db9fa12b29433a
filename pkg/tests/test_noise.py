import math

import numpy as np
import pytest

from spinecho import noise
from spinecho.constants import NEUTRON
from spinecho.errors import (ConfigurationError, InsufficientDataError,
                             InvalidInputError, NoiseBandwidthWarning)

PAPER = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0, sample_dt=1e-3, seed=99)
SIGMA2 = (2e-6) ** 2


@pytest.fixture(scope="module")
def long_trace():
    # 1e6 samples at 1 ms: gamma*dt = 0.1, exactly the allowed limit
    return noise.generate(PAPER, duration=999_999 * 1e-3, realization_index=0)


def test_zero_rms_gives_zero_trace():
    cfg = noise.NoiseConfig(sigma_p_field=0.0, gamma=100.0, sample_dt=1e-3)
    tr = noise.generate(cfg, 0.1)
    assert np.all(tr.samples == 0.0)
    assert len(tr.samples) >= 101


def test_deterministic_streams():
    a = noise.generate(PAPER, 0.5, 3)
    b = noise.generate(PAPER, 0.5, 3)
    c = noise.generate(PAPER, 0.5, 4)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    # longer request extends the same stream
    d = noise.generate(PAPER, 0.25, 3)
    assert np.array_equal(d.samples, a.samples[: len(d.samples)])


def test_exact_discretization_recursion():
    tr = noise.generate(PAPER, 0.02, 7)
    rng = np.random.Generator(np.random.Philox(key=[99, 7]))
    xi = rng.standard_normal(len(tr.samples))
    alpha = math.exp(-100.0 * 1e-3)
    k = np.empty(len(xi))
    k[0] = 2e-6 * xi[0]
    for i in range(1, len(xi)):
        k[i] = alpha * k[i - 1] + 2e-6 * math.sqrt(1 - alpha * alpha) * xi[i]
    assert np.allclose(tr.samples, k, rtol=0, atol=1e-20)


def test_sample_variance_matches_intensity(long_trace):
    var = float(np.var(long_trace.samples))
    assert abs(var - SIGMA2) / SIGMA2 < 0.05


def test_autocorrelation_efolds_at_correlation_time(long_trace):
    rho = noise.autocorrelation(long_trace, 1.0 / 100.0)
    assert abs(rho - 1 / math.e) / (1 / math.e) < 0.05
    # equivalent e-folding time within 5%
    tau = -0.01 / math.log(rho)
    assert abs(tau - 0.01) / 0.01 < 0.05


def test_excess_kurtosis_gaussian(long_trace):
    assert abs(noise.excess_kurtosis(long_trace)) < 0.05


def test_partial_autocorrelation_cuts_off_after_lag_one(long_trace):
    pacf = noise.partial_autocorrelation(long_trace, 5)
    n = len(long_trace.samples)
    assert pacf[0] > 0.8  # lag 1 is alpha = e^{-0.1}
    assert np.all(np.abs(pacf[1:]) < 3.0 / math.sqrt(n))


def test_psd_is_lorentzian(long_trace):
    omega, psd = noise.estimate_psd(long_trace)
    s2_hat, gamma_hat = noise.fit_lorentzian(omega, psd)
    assert abs(gamma_hat - 100.0) / 100.0 < 0.10
    assert abs(noise.psd_integral(omega, psd) - np.var(long_trace.samples)) \
        / SIGMA2 < 0.05


def test_psd_of_white_noise_is_flat():
    rng = np.random.Generator(np.random.Philox(key=[1, 2]))
    cfg = noise.NoiseConfig(sigma_p_field=1e-6, gamma=100.0, sample_dt=1e-3)
    tr = noise.NoiseTrace(rng.standard_normal(2 ** 16) * 1e-6, cfg, 0)
    omega, psd = noise.estimate_psd(tr)
    bands = np.array_split(psd[1:], 8)
    means = np.array([b.mean() for b in bands])
    assert means.max() / means.min() < 1.3


def test_psd_of_zero_trace_is_zero():
    cfg = noise.NoiseConfig(sigma_p_field=0.0, gamma=100.0, sample_dt=1e-3)
    tr = noise.generate(cfg, 5000 * 1e-3)
    omega, psd = noise.estimate_psd(tr)
    assert np.all(psd == 0.0)


def test_psd_requires_enough_samples():
    tr = noise.generate(PAPER, 0.5)
    with pytest.raises(InsufficientDataError):
        noise.estimate_psd(tr)


# ---------------------------------------------------------------------------
# window
# ---------------------------------------------------------------------------

def test_window_degenerate_ramp():
    cfg = noise.NoiseConfig(ramp_fraction=0.0, sample_dt=1e-3, seed=5)
    tr = noise.generate(cfg, 0.2)
    w = noise.apply_window(tr)
    assert w.samples[0] == 0.0 and w.samples[-1] == 0.0
    assert np.array_equal(w.samples[1:-1], tr.samples[1:-1])


def test_window_on_constant_trace():
    cfg = noise.NoiseConfig(ramp_fraction=0.1, sample_dt=1e-3)
    v = 1.5e-6
    tr = noise.NoiseTrace(np.full(1001, v), cfg, 0)
    w = noise.apply_window(tr)
    assert w.samples[0] == 0.0 and w.samples[-1] == 0.0
    assert w.samples[500] == pytest.approx(v)
    m = int(round(0.1 * 1001))
    assert w.samples[m // 2] == pytest.approx(v / 2, rel=0.02)


def test_window_preserves_central_variance():
    cfg = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0, sample_dt=1e-3,
                            seed=11, ramp_fraction=0.05)
    tr = noise.generate(cfg, 200.0)
    w = noise.apply_window(tr)
    n = len(w.samples)
    central = w.samples[int(0.1 * n): int(0.9 * n)]
    assert abs(np.var(central) - SIGMA2) / SIGMA2 < 0.05


# ---------------------------------------------------------------------------
# band limiting
# ---------------------------------------------------------------------------

def test_band_limit_removes_high_band_keeps_low():
    cfg = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0, sample_dt=5e-4,
                            seed=21, cutoff=600.0)
    tr = noise.generate(cfg, 500.0)
    lp = noise.band_limit(tr)
    spec = np.fft.rfft(lp.samples)
    omega = 2 * np.pi * np.fft.rfftfreq(len(lp.samples), lp.dt)
    high = np.abs(spec[omega > 700.0])
    low_in = np.fft.rfft(tr.samples)[omega < 300.0]
    low_out = spec[omega < 300.0]
    assert np.max(high) < 1e-6 * np.max(np.abs(spec))
    # pass band essentially untouched
    assert np.max(np.abs(low_out - low_in)) < 1e-3 * np.max(np.abs(low_in))


def test_band_limit_none_passthrough():
    cfg = noise.NoiseConfig(cutoff=None)
    tr = noise.generate(cfg, 0.1)
    assert noise.band_limit(tr) is tr


def test_bandwidth_warning():
    cfg = noise.NoiseConfig(gamma=100.0, sample_dt=1e-4)
    assert noise.check_bandwidth(cfg, omega_larmor=1832.0)
    with pytest.warns(NoiseBandwidthWarning):
        ok = noise.check_bandwidth(cfg, omega_larmor=400.0)
    assert not ok


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigurationError):
        noise.NoiseConfig(gamma=-1.0)
    with pytest.raises(ConfigurationError):
        noise.NoiseConfig(sample_dt=0.0)
    with pytest.raises(ConfigurationError):
        noise.NoiseConfig(gamma=100.0, sample_dt=2e-3)  # gamma*dt > 0.1
    with pytest.raises(ConfigurationError):
        noise.NoiseConfig(ramp_fraction=0.6)
    with pytest.raises(ConfigurationError):
        noise.NoiseConfig(sigma_p_field=-1e-6)
    with pytest.raises(InvalidInputError):
        noise.generate(PAPER, -1.0)
    with pytest.raises(InvalidInputError):
        noise.generate(PAPER, 0.1, realization_index=-2)


def test_trace_csv_export(tmp_path):
    tr = noise.generate(PAPER, 0.01, 0)
    path = tmp_path / "trace.csv"
    noise.write_trace_csv(tr, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_s,k_tesla"
    assert len(lines) == len(tr.samples) + 1
    t0, k0 = lines[1].split(",")
    assert float(t0) == 0.0
    assert float(k0) == pytest.approx(tr.samples[0], rel=1e-11)


def test_value_at_linear_interpolation():
    cfg = noise.NoiseConfig(sample_dt=1e-3)
    tr = noise.NoiseTrace(np.array([0.0, 2e-6, 1e-6]), cfg, 0)
    assert tr.value_at(0.5e-3) == pytest.approx(1e-6)
    assert tr.value_at(1.5e-3) == pytest.approx(1.5e-6)
    assert tr.value_at(99.0) == pytest.approx(1e-6)  # clamped
    assert tr.duration == pytest.approx(2e-3)
