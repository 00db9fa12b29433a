"""Physical constants for the spin-1/2 system.

The magnetic moment is kept signed everywhere; every phase and precession
sign in the package follows from it via the gyromagnetic ratio
gamma = 2*mu/hbar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidInputError

#: Neutron magnetic moment, J/T (signed).
MU_NEUTRON = -9.66e-27

#: Reduced Planck constant, J*s.
HBAR = 1.054571e-34


@dataclass(frozen=True)
class PhysicalConstants:
    """Magnetic moment and hbar; the gyromagnetic ratio is always derived.

    Parameters
    ----------
    mu : float
        Spin magnetic moment in J/T, signed (negative for the neutron).
    hbar : float
        Reduced Planck constant in J*s.
    """

    mu: float = MU_NEUTRON
    hbar: float = HBAR

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.hbar)):
            raise InvalidInputError("constants must be finite")
        if self.hbar <= 0:
            raise InvalidInputError("hbar must be positive")

    @property
    def gamma(self) -> float:
        """Gyromagnetic ratio 2*mu/hbar in rad/s/T (signed)."""
        return 2.0 * self.mu / self.hbar

    def larmor_frequency(self, field_magnitude: float) -> float:
        """Larmor angular frequency 2*|mu|*B/hbar for B >= 0, rad/s."""
        if field_magnitude < 0 or not math.isfinite(field_magnitude):
            raise InvalidInputError("field magnitude must be finite and >= 0")
        return abs(self.gamma) * field_magnitude


#: Default constants (neutron).
NEUTRON = PhysicalConstants()
