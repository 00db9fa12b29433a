"""Gaussian-Markovian field noise: generation, windowing, band limiting and
spectral validation.

Realizations follow the exact stationary discretization of the
Ornstein-Uhlenbeck process

    K[0] ~ N(0, sigma^2),  K[n+1] = alpha K[n] + sigma sqrt(1-alpha^2) xi[n],
    alpha = exp(-Gamma dt),

driven by a counter-based (Philox) stream keyed by (seed, realization
index), so any subset of realizations can be generated independently, in
any order, with identical results. Between samples a trace interpolates
linearly in time.

The raw process is Lorentzian to arbitrarily high frequency; its spectral
tail at the Larmor frequency would resonantly depolarize a simulated spin,
which the physical noise injection avoided by band-limiting. band_limit()
provides the matching zero-phase low-pass applied before a trace drives a
simulation; it leaves the pass band untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as _signal
from scipy import stats as _stats
from scipy.optimize import curve_fit

from .errors import (ConfigurationError, InsufficientDataError,
                     InvalidInputError, NoiseBandwidthWarning)

#: Default flat-top window ramp length as a fraction of the trace duration.
DEFAULT_RAMP_FRACTION = 0.05

#: Default injection low-pass cutoff, rad/s. Chosen well above the
#: measurement band (a few hundred rad/s for cycle times of tens of ms)
#: and well below the Larmor frequencies in play (~1800 rad/s at 10 uT).
DEFAULT_CUTOFF = 600.0


@dataclass(frozen=True)
class NoiseConfig:
    """Parameters of the fluctuating field K(t) along x.

    sigma_p_field is the stationary RMS in tesla; gamma the bandwidth in
    rad/s (correlation time 1/gamma). sample_dt must resolve the process:
    gamma * sample_dt <= 0.1.
    """

    sigma_p_field: float = 2e-6
    gamma: float = 100.0
    sample_dt: float = 5e-4
    seed: int = 2026
    ramp_fraction: float = DEFAULT_RAMP_FRACTION
    cutoff: float | None = DEFAULT_CUTOFF

    def __post_init__(self) -> None:
        vals = (self.sigma_p_field, self.gamma, self.sample_dt, self.ramp_fraction)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("noise parameters must be finite")
        if self.sigma_p_field < 0:
            raise ConfigurationError("sigma_p_field must be >= 0")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if self.sample_dt <= 0:
            raise ConfigurationError("sample_dt must be positive")
        if self.gamma * self.sample_dt > 0.1 + 1e-12:
            raise ConfigurationError(
                f"gamma*sample_dt = {self.gamma * self.sample_dt:.3g} exceeds 0.1; "
                "decrease sample_dt")
        if not (0.0 <= self.ramp_fraction <= 0.5):
            raise ConfigurationError("ramp_fraction must lie in [0, 0.5]")
        if self.cutoff is not None and self.cutoff <= 0:
            raise ConfigurationError("cutoff must be positive or None")


@dataclass(frozen=True)
class NoiseTrace:
    """One sampled realization on a uniform grid, linear between samples."""

    samples: np.ndarray = field(repr=False)
    config: NoiseConfig
    realization_index: int

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) < 1:
            raise InvalidInputError("trace needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("trace samples must be finite")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def dt(self) -> float:
        return self.config.sample_dt

    @property
    def duration(self) -> float:
        """Time span covered by linear interpolation."""
        return (len(self.samples) - 1) * self.dt

    def value_at(self, t) -> np.ndarray:
        """Linear interpolation, clamped to the trace span."""
        x = np.clip(np.asarray(t, dtype=float) / self.dt, 0.0, len(self.samples) - 1.0)
        i0 = np.minimum(x.astype(int), len(self.samples) - 2) if len(self.samples) > 1 \
            else np.zeros_like(x, dtype=int)
        frac = x - i0
        s = self.samples
        return s[i0] * (1.0 - frac) + s[np.minimum(i0 + 1, len(s) - 1)] * frac

    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.dt


def generate(config: NoiseConfig, duration: float, realization_index: int = 0) -> NoiseTrace:
    """One exact-OU realization covering at least `duration` seconds.

    Deterministic in (config.seed, realization_index); a zero RMS yields an
    all-zero trace of the same length.
    """
    if duration <= 0 or not math.isfinite(duration):
        raise InvalidInputError("duration must be positive")
    if realization_index < 0:
        raise InvalidInputError("realization_index must be >= 0")
    n = int(math.ceil(duration / config.sample_dt - 1e-9)) + 1
    if config.sigma_p_field == 0.0:
        return NoiseTrace(np.zeros(n), config, realization_index)
    rng = np.random.Generator(np.random.Philox(key=[config.seed, realization_index]))
    xi = rng.standard_normal(n)
    alpha = math.exp(-config.gamma * config.sample_dt)
    drive = config.sigma_p_field * math.sqrt(1.0 - alpha * alpha) * xi
    drive[0] = config.sigma_p_field * xi[0]
    k = _signal.lfilter([1.0], [1.0, -alpha], drive)
    return NoiseTrace(k, config, realization_index)


def apply_window(trace: NoiseTrace) -> NoiseTrace:
    """Flat-top window with raised-cosine ramps at both ends.

    Ramp length is ramp_fraction of the trace duration; the end samples are
    exactly zero either way, keeping the total field cyclic when the trace
    is added to a cyclic program.
    """
    n = len(trace.samples)
    w = np.ones(n)
    m = int(round(trace.config.ramp_fraction * n))
    if m > 0:
        up = 0.5 * (1.0 - np.cos(np.pi * np.arange(m) / m))
        w[:m] = up
        w[n - m:] = up[::-1]
    w[0] = 0.0
    w[-1] = 0.0
    return replace(trace, samples=trace.samples * w)


def band_limit(trace: NoiseTrace, cutoff: float | None = None) -> NoiseTrace:
    """Zero-phase low-pass (circular FFT brick wall) above `cutoff` rad/s.

    Defaults to the config's cutoff; None passes the trace through. Bins at
    or below the cutoff are untouched, so statistics in the measurement band
    (and any integral against windows much longer than 1/cutoff) are
    preserved exactly; bins above it vanish. The circular wrap couples the
    trace ends, which the flat-top window applied afterwards suppresses.
    """
    cutoff = trace.config.cutoff if cutoff is None else cutoff
    if cutoff is None:
        return trace
    x = trace.samples
    spec = np.fft.rfft(x)
    omega = 2.0 * np.pi * np.fft.rfftfreq(len(x), trace.dt)
    spec[omega > cutoff] = 0.0
    return replace(trace, samples=np.fft.irfft(spec, len(x)))


def check_bandwidth(config: NoiseConfig, omega_larmor: float) -> bool:
    """Warn when the noise bandwidth is not adiabatic for the experiment."""
    import warnings

    slow = config.gamma < 0.2 * omega_larmor
    if not slow:
        warnings.warn(
            f"noise bandwidth {config.gamma:.3g} rad/s is not small against "
            f"the Larmor frequency {omega_larmor:.3g} rad/s",
            NoiseBandwidthWarning, stacklevel=2)
    return slow


def estimate_psd(trace: NoiseTrace, nperseg: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Averaged-periodogram spectral estimate.

    Returns (omega, density): angular frequencies in rad/s and the
    one-sided density normalized so that sum(density * domega) / (2 pi)
    recovers the sample variance (up to estimator error).
    """
    x = trace.samples
    if len(x) < 4096:
        raise InsufficientDataError(f"need >= 4096 samples, got {len(x)}")
    nperseg = min(nperseg, len(x))
    freq, pxx = _signal.welch(x, fs=1.0 / trace.dt, nperseg=nperseg,
                              window="hann", detrend=False, scaling="density")
    return 2.0 * np.pi * freq, pxx


def psd_integral(omega: np.ndarray, density: np.ndarray) -> float:
    """Integral of the one-sided density over omega/(2 pi); equals the
    variance for a consistent estimate."""
    return float(np.trapezoid(density, omega) / (2.0 * np.pi))


def fit_lorentzian(omega: np.ndarray, density: np.ndarray) -> tuple[float, float]:
    """Fit S(w) = 4 s2 g / (g^2 + w^2) and return (s2_hat, gamma_hat).

    Seeded by the linear regression of 1/S against w^2, then refined by
    nonlinear least squares. The zero-frequency bin is excluded (windowed
    Welch estimates are least reliable there).
    """
    m = (density > 0) & (omega > 0)
    if np.count_nonzero(m) < 8:
        raise InsufficientDataError("too few positive spectral bins for a fit")
    w, s = omega[m], density[m]
    slope, intercept = np.polyfit(w * w, 1.0 / s, 1)
    if slope <= 0 or intercept <= 0:
        raise InsufficientDataError("spectrum is not Lorentzian-like")
    g0 = math.sqrt(intercept / slope)
    s20 = 1.0 / (4.0 * slope * g0)

    def model(wv, s2, g):
        return 4.0 * s2 * g / (g * g + wv * wv)

    popt, _ = curve_fit(model, w, s, p0=(s20, g0), maxfev=10000)
    return float(popt[0]), float(abs(popt[1]))


def autocorrelation(trace: NoiseTrace, lag_seconds: float) -> float:
    """Normalized autocorrelation at the nearest integer sample lag."""
    k = int(round(lag_seconds / trace.dt))
    x = trace.samples
    if k < 0 or k >= len(x):
        raise InvalidInputError("lag outside trace")
    x0 = x - np.mean(x)
    denom = float(x0 @ x0)
    if denom == 0:
        raise InsufficientDataError("zero-variance trace")
    return float(x0[: len(x0) - k] @ x0[k:]) / denom


def excess_kurtosis(trace: NoiseTrace) -> float:
    """Fisher excess kurtosis of the samples (0 for Gaussian)."""
    return float(_stats.kurtosis(trace.samples, fisher=True, bias=True))


def partial_autocorrelation(trace: NoiseTrace, nlags: int) -> np.ndarray:
    """PACF at lags 1..nlags via Durbin-Levinson; AR(1) data is zero
    (statistically) beyond lag 1."""
    x = trace.samples - np.mean(trace.samples)
    n = len(x)
    denom = float(x @ x)
    rho = np.array([float(x[: n - k] @ x[k:]) / denom for k in range(nlags + 1)])
    pacf = np.zeros(nlags + 1)
    phi_prev = np.zeros(nlags + 1)
    phi = np.zeros(nlags + 1)
    pacf[0] = 1.0
    for k in range(1, nlags + 1):
        if k == 1:
            phi[1] = rho[1]
        else:
            num = rho[k] - float(np.dot(phi_prev[1:k], rho[k - 1:0:-1]))
            den = 1.0 - float(np.dot(phi_prev[1:k], rho[1:k]))
            phi[k] = num / den
            phi[1:k] = phi_prev[1:k] - phi[k] * phi_prev[k - 1:0:-1]
        pacf[k] = phi[k]
        phi_prev[: k + 1] = phi[: k + 1]
    return pacf[1:]


def write_trace_csv(trace: NoiseTrace, path) -> None:
    """CSV export: header `t_s,k_tesla`, 12 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_s,k_tesla\n")
        for t, k in zip(trace.times(), trace.samples):
            fh.write(f"{t:.12g},{k:.12g}\n")
