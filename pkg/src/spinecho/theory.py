"""Closed-form reference quantities: Berry phase, solid angle, Larmor
frequency, the geometric-dephasing variance law, dephasing factors, and the
Gaussian projection relation.

The variance law is the first-order (linear-response) result

    var(T) = 2 sigma_w^2 (pi sin^2(theta) / (T w_L))^2
             * (Gamma T - 1 + exp(-Gamma T)) / Gamma^2,

with sigma_w^2 the variance of the angular-frequency fluctuation
gamma*K(t). Field-noise intensities are converted to frequency units here,
in one place. adiabatic_phase_from_trace() provides the matching
brute-force reference: the geometric phase integrated numerically over one
sampled noise realization, exact in the adiabatic limit to all orders in
the noise amplitude; comparing the two exposes the (few percent)
nonlinear-response deficit of the first-order law at strong noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import NEUTRON, PhysicalConstants
from .errors import InvalidInputError

#: Switch point for the series evaluation of x - 1 + exp(-x).
SERIES_THRESHOLD = 1e-3


@dataclass(frozen=True)
class TheoryParams:
    """Inputs to the variance law."""

    theta: float            # cone angle, rad
    omega_l: float          # Larmor angular frequency of the swept field, rad/s
    gamma_noise: float      # noise bandwidth, rad/s
    sigma_p_omega2: float   # noise intensity as angular-frequency variance, rad^2/s^2
    T: float                # duration of one conical cycle, s

    def __post_init__(self) -> None:
        if not (0.0 <= self.theta <= math.pi):
            raise InvalidInputError("theta must lie in [0, pi]")
        if self.omega_l <= 0 or self.gamma_noise <= 0 or self.T <= 0:
            raise InvalidInputError("omega_l, gamma_noise and T must be positive")
        if self.sigma_p_omega2 < 0:
            raise InvalidInputError("sigma_p_omega2 must be >= 0")


def berry_phase(theta: float) -> float:
    """Geometric phase -pi (1 - cos theta) of the aligned eigenstate for one
    cycle around a cone of half-angle theta."""
    if not (0.0 <= theta <= math.pi):
        raise InvalidInputError("theta must lie in [0, pi]")
    return -math.pi * (1.0 - math.cos(theta))


def solid_angle(theta: float) -> float:
    """Cap solid angle 2 pi (1 - cos theta); berry_phase is minus half of it."""
    if not (0.0 <= theta <= math.pi):
        raise InvalidInputError("theta must lie in [0, pi]")
    return 2.0 * math.pi * (1.0 - math.cos(theta))


def theta_from_berry_phase(phi0: float) -> float:
    """Cone angle whose cycle accumulates the given geometric phase."""
    c = 1.0 + phi0 / math.pi
    if not (-1.0 <= c <= 1.0):
        raise InvalidInputError("phase outside [-2 pi, 0]")
    return math.acos(c)


def _growth(x: float) -> float:
    """x - 1 + exp(-x), series-stabilized for small x."""
    if x < SERIES_THRESHOLD:
        return x * x / 2.0 - x ** 3 / 6.0 + x ** 4 / 24.0
    return x - 1.0 + math.exp(-x)


def variance_theory(p: TheoryParams) -> float:
    """First-order geometric-phase variance for one cycle of duration T."""
    g = _growth(p.gamma_noise * p.T)
    pref = math.pi * math.sin(p.theta) ** 2 / (p.T * p.omega_l)
    return 2.0 * p.sigma_p_omega2 * pref * pref * g / (p.gamma_noise ** 2)


def dephasing_factor(sigma2: float) -> float:
    """Polarization ratio exp(-8 sigma2) left by geometric dephasing alone;
    the factor 16/2 reflects the doubled phase from both the superposition
    and the echo."""
    if sigma2 < 0:
        raise InvalidInputError("variance must be >= 0")
    return math.exp(-8.0 * sigma2)


def sigma2_from_dephasing(nu_rel: float) -> float:
    """Inverse of dephasing_factor."""
    if nu_rel <= 0:
        raise InvalidInputError("polarization ratio must be positive")
    return -math.log(nu_rel) / 8.0


def gaussian_projection(mean: float, sigma2: float) -> tuple[float, float]:
    """(E[cos phi], E[sin phi]) for phi ~ N(mean, sigma2)."""
    if sigma2 < 0:
        raise InvalidInputError("variance must be >= 0")
    damp = math.exp(-sigma2 / 2.0)
    return damp * math.cos(mean), damp * math.sin(mean)


def larmor_frequency(field_magnitude: float, constants: PhysicalConstants = NEUTRON) -> float:
    """2 |mu| B / hbar in rad/s."""
    return constants.larmor_frequency(field_magnitude)


def sigma_field_to_omega(sigma_field: float, constants: PhysicalConstants = NEUTRON) -> float:
    """Field-noise RMS (tesla) to angular-frequency RMS (rad/s)."""
    if sigma_field < 0:
        raise InvalidInputError("sigma must be >= 0")
    return abs(constants.gamma) * sigma_field


def sigma_omega_to_field(sigma_omega: float, constants: PhysicalConstants = NEUTRON) -> float:
    """Angular-frequency RMS (rad/s) back to field RMS (tesla)."""
    if sigma_omega < 0:
        raise InvalidInputError("sigma must be >= 0")
    return sigma_omega / abs(constants.gamma)


def adiabatic_phase_from_trace(samples: np.ndarray, dt: float,
                               offset_bx: float, guide_bz: float,
                               refine: int = 4) -> float:
    """Brute-force geometric phase of one conical cycle with the sampled
    fluctuation injected along x.

    The trace is taken piecewise-linear in time (the injection semantics);
    the phase is the surface integral

        phi = -(w/2) * int (1 - cos alpha(t)) dt,
        cos alpha = (Bx + K) / |B_total|,   w = 2 pi / T_cycle,

    where T_cycle is the span covered by the samples. For an all-zero trace
    this is the closed-form berry_phase of the cone.
    """
    k = np.asarray(samples, dtype=float)
    if k.ndim != 1 or len(k) < 2:
        raise InvalidInputError("need at least two samples")
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    span = (len(k) - 1) * dt
    if refine > 1:
        x = np.linspace(0.0, len(k) - 1.0, (len(k) - 1) * refine + 1)
        k = np.interp(x, np.arange(len(k)), k)
        dt = dt / refine
    bz = abs(guide_bz)
    cos_a = (offset_bx + k) / np.hypot(offset_bx + k, bz)
    w = 2.0 * math.pi / span
    return float(-(w / 2.0) * np.trapezoid(1.0 - cos_a, dx=dt))
