"""Spin-1/2 Berry-phase stability simulator.

Exact SU(2) evolution under programmable magnetic fields, spin-echo
interferometry with replayed Gaussian-Markovian field noise, and Monte
Carlo statistics of the geometric phase against closed-form theory.
"""

__version__ = "0.1.0"

from .constants import HBAR, MU_NEUTRON, NEUTRON, PhysicalConstants
from .errors import (AdiabaticityWarning, ConfigurationError, DataError,
                     Diagnostic, InsufficientDataError, InvalidInputError,
                     NoiseBandwidthWarning, SequenceParseError, SpinEchoError,
                     UndefinedPhaseError)
from .spin import (SpinState, StepUnitary, bloch_of, eigenstate_of_field,
                   evolve, instantaneous_energy, rotation_step)
from .waveform import (ConicalSegment, EchoSequence, MarginReport,
                       RfPulseSegment, StaticSegment, TiltSegment,
                       adiabaticity_margin, build_echo_sequence,
                       build_reference_sequence, design_pi2_pulse,
                       design_pi_pulse, sample)
from .sequence_io import parse_sequence, serialize_sequence
from .noise import (NoiseConfig, NoiseTrace, apply_window, band_limit,
                    estimate_psd, fit_lorentzian, generate)
from .protocol import (ExperimentConfig, ExperimentResult, apply_t2_envelope,
                       extract_phase, polarization_analysis, prepare_trace,
                       run)
from .ensemble import (EnsembleConfig, EnsemblePoint, PhaseStatistics,
                       compare_to_theory, nu_rel, phase_statistics,
                       run_ensemble)
from . import theory

__all__ = [name for name in dir() if not name.startswith("_")]
