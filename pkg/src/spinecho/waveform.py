"""Deterministic field programs: guide fields, resonant rf pulses, conical
sweeps, adiabatic reorientation ramps, and the assembled spin-echo sequence.

A sequence is an ordered list of segments; each segment defines the total
field over its span. Conical segments reproduce the rotating-field program

    B = (Bx_offset, -Bz0 sin(d w t), Bz0 cos(d w t)),   w = 2 pi / T_cycle,

a cone of half-angle theta = atan2(|Bz0|, Bx_offset) about the +x axis.
Reorientation (tilt) segments rotate the field between the guide direction
and the cone's starting direction along a geodesic with a smooth angular
profile; they keep the echo halves cyclic in the guide frame, which is what
makes the interferometric phase clean for narrow cones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .constants import NEUTRON, PhysicalConstants
from .errors import ConfigurationError, InvalidInputError
from . import spin

#: Rate-of-change bound |dB/dt| / (|B| w_L) above which a program is flagged.
ADIABATIC_MARGIN_LIMIT = 0.2


def _smoothstep(x: np.ndarray) -> np.ndarray:
    """Monotone C1 ramp on [0,1] with zero slope at both ends."""
    return x - np.sin(2 * np.pi * x) / (2 * np.pi)


@dataclass(frozen=True)
class StaticSegment:
    """Constant field for a fixed duration."""

    fieldvec: tuple[float, float, float]
    duration: float

    def __post_init__(self) -> None:
        f = np.asarray(self.fieldvec, dtype=float)
        if f.shape != (3,) or not np.all(np.isfinite(f)):
            raise InvalidInputError("static field must be a finite 3-vector")
        if self.duration < 0 or not math.isfinite(self.duration):
            raise ConfigurationError("duration must be >= 0")
        object.__setattr__(self, "fieldvec", tuple(float(x) for x in f))

    def field_at(self, t: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fieldvec), (len(t), 3)).copy()

    def max_field(self) -> float:
        return float(np.linalg.norm(self.fieldvec))


@dataclass(frozen=True)
class RfPulseSegment:
    """Linear oscillating drive on top of a static background field.

    The drive is amplitude * cos(carrier_frequency * t + carrier_phase)
    along the given transverse axis; the background holds the guide field.
    Simulated in the lab frame; the rotating-wave picture enters only the
    design rule for the duration.
    """

    axis: str
    amplitude: float
    carrier_frequency: float
    carrier_phase: float
    duration: float
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.axis not in ("x", "y"):
            raise ConfigurationError(f"rf axis must be 'x' or 'y', got {self.axis!r}")
        if self.amplitude < 0:
            raise ConfigurationError("rf amplitude must be >= 0")
        if self.duration < 0:
            raise ConfigurationError("duration must be >= 0")
        vals = (self.amplitude, self.carrier_frequency, self.carrier_phase, self.duration)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("rf parameters must be finite")
        bg = np.asarray(self.background, dtype=float)
        if bg.shape != (3,) or not np.all(np.isfinite(bg)):
            raise InvalidInputError("rf background must be a finite 3-vector")
        object.__setattr__(self, "background", tuple(float(x) for x in bg))

    def field_at(self, t: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.background), (len(t), 3)).copy()
        drive = self.amplitude * np.cos(self.carrier_frequency * t + self.carrier_phase)
        out[:, 0 if self.axis == "x" else 1] += drive
        return out

    def max_field(self) -> float:
        bg = np.asarray(self.background)
        i = 0 if self.axis == "x" else 1
        peak = bg.copy()
        peak[i] = abs(peak[i]) + self.amplitude
        return float(np.linalg.norm(peak))


@dataclass(frozen=True)
class ConicalSegment:
    """Constant-magnitude rotation of the guide field about the +x axis.

    guide_bz is the signed starting z-field Bz(0); the derived cone angle is
    theta = atan2(|Bz(0)|, offset_bx) measured from +x. One cycle lasts
    cycle_time; direction +1 follows By(t) = -Bz(0) sin(w t).
    """

    guide_bz: float
    offset_bx: float
    cycle_time: float
    direction: int = 1
    cycles: int = 1

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.guide_bz, self.offset_bx, self.cycle_time)):
            raise InvalidInputError("cone parameters must be finite")
        if self.guide_bz == 0:
            raise ConfigurationError("cone requires a nonzero guide field")
        if self.offset_bx < 0:
            raise ConfigurationError("offset_bx must be >= 0")
        if self.cycle_time <= 0:
            raise ConfigurationError("cycle_time must be positive")
        if self.direction not in (1, -1):
            raise ConfigurationError("direction must be +1 or -1")
        if not isinstance(self.cycles, int) or self.cycles < 1:
            raise ConfigurationError("cycles must be a positive integer")

    @property
    def duration(self) -> float:
        return self.cycle_time * self.cycles

    @property
    def guide_magnitude(self) -> float:
        return abs(self.guide_bz)

    @property
    def theta(self) -> float:
        """Cone half-angle from the +x axis, in (0, pi/2]."""
        return math.atan2(self.guide_magnitude, self.offset_bx)

    @property
    def solid_angle(self) -> float:
        """Unsigned cap solid angle 2 pi (1 - cos theta) swept per cycle."""
        return 2 * math.pi * (1 - math.cos(self.theta))

    @property
    def angular_velocity(self) -> float:
        return 2 * math.pi / self.cycle_time

    def _phase(self, t: np.ndarray) -> np.ndarray:
        # Exact cyclicity: fold to one cycle and snap the wrap point so the
        # sampled field at t = 0 and t = k*cycle_time agrees bit-for-bit.
        r = np.mod(t, self.cycle_time)
        r = np.where(r >= self.cycle_time * (1 - 1e-9), 0.0, r)
        return 2 * np.pi * self.direction * (r / self.cycle_time)

    def field_at(self, t: np.ndarray) -> np.ndarray:
        ph = self._phase(np.asarray(t, dtype=float))
        out = np.empty((len(ph), 3))
        out[:, 0] = self.offset_bx
        out[:, 1] = -self.guide_bz * np.sin(ph)
        out[:, 2] = self.guide_bz * np.cos(ph)
        return out

    def nhat_at(self, t: np.ndarray) -> np.ndarray:
        f = self.field_at(t)
        return f / np.linalg.norm(f, axis=1)[:, np.newaxis]

    def max_field(self) -> float:
        return math.hypot(self.guide_bz, self.offset_bx)


@dataclass(frozen=True)
class TiltSegment:
    """Geodesic reorientation between two field vectors.

    Direction rotates in the plane of the two vectors and the magnitude
    blends, both following the same C1 profile, so the angular velocity
    vanishes at the endpoints. Antiparallel endpoints are rejected (the
    rotation plane would be ambiguous).
    """

    start_field: tuple[float, float, float]
    end_field: tuple[float, float, float]
    duration: float

    def __post_init__(self) -> None:
        f0 = np.asarray(self.start_field, dtype=float)
        f1 = np.asarray(self.end_field, dtype=float)
        if f0.shape != (3,) or f1.shape != (3,) or not (
                np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
            raise InvalidInputError("tilt endpoints must be finite 3-vectors")
        if self.duration <= 0 or not math.isfinite(self.duration):
            raise ConfigurationError("tilt duration must be positive")
        m0, m1 = np.linalg.norm(f0), np.linalg.norm(f1)
        if m0 == 0 or m1 == 0:
            raise ConfigurationError("tilt endpoints must be nonzero fields")
        cosang = float(np.clip(f0 @ f1 / (m0 * m1), -1.0, 1.0))
        if cosang < -1 + 1e-12:
            raise ConfigurationError("tilt between antiparallel fields is ambiguous")
        object.__setattr__(self, "start_field", tuple(float(x) for x in f0))
        object.__setattr__(self, "end_field", tuple(float(x) for x in f1))

    def _frame(self):
        f0 = np.asarray(self.start_field)
        f1 = np.asarray(self.end_field)
        m0, m1 = np.linalg.norm(f0), np.linalg.norm(f1)
        u = f0 / m0
        v = f1 / m1
        ang = math.acos(float(np.clip(u @ v, -1.0, 1.0)))
        if ang > 1e-15:
            w = v - math.cos(ang) * u
            w = w / np.linalg.norm(w)
        else:
            w = np.zeros(3)
        return u, w, ang, m0, m1

    def field_at(self, t: np.ndarray) -> np.ndarray:
        u, w, ang, m0, m1 = self._frame()
        s = _smoothstep(np.asarray(t, dtype=float) / self.duration)
        a = ang * s
        m = m0 + (m1 - m0) * s
        dirs = np.outer(np.cos(a), u) + np.outer(np.sin(a), w)
        return dirs * m[:, np.newaxis]

    def max_field(self) -> float:
        return max(np.linalg.norm(self.start_field), np.linalg.norm(self.end_field))

    def max_rate(self) -> float:
        """Peak |dB/dt| over the segment (grid evaluation)."""
        u, w, ang, m0, m1 = self._frame()
        x = np.linspace(0.0, 1.0, 257)
        sdot = (1 - np.cos(2 * np.pi * x)) / self.duration  # d smoothstep / dt
        s = _smoothstep(x)
        m = m0 + (m1 - m0) * s
        rate = np.hypot(m * ang * sdot, (m1 - m0) * sdot)
        return float(np.max(rate))


Segment = StaticSegment | RfPulseSegment | ConicalSegment | TiltSegment


def _segment_duration(seg: Segment) -> float:
    return seg.duration


@dataclass(frozen=True)
class EchoSequence:
    """Ordered field program, optionally carrying echo-level metadata.

    Sequences assembled by build_echo_sequence() record the echo parameters
    (guide, rf amplitude, cone geometry, mode) and which segments accept
    the fluctuating x-field; hand-built segment lists leave the metadata
    unset. The sequence object doubles as a FieldProgram for evolve().
    """

    segments: tuple[Segment, ...]
    guide_bz: float | None = None
    rf_amplitude: float | None = None
    offset_bx: float | None = None
    cycle_time: float | None = None
    ramp_time: float | None = None
    direction: int | None = None
    mode: str | None = None
    cycles: int = 1
    analysis: str = "none"
    noise_slots: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigurationError("sequence needs at least one segment")
        if self.mode not in (None, "geometric", "dynamical"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.analysis not in ("none", "x", "y"):
            raise ConfigurationError(f"unknown analysis option {self.analysis!r}")
        for idx in self.noise_slots:
            if not isinstance(self.segments[idx], ConicalSegment):
                raise ConfigurationError("noise slots must point at conical segments")
        cones = [s for s in self.segments if isinstance(s, ConicalSegment)]
        if self.mode == "geometric" and len(cones) == 2:
            if cones[1].direction != -cones[0].direction:
                raise ConfigurationError("geometric mode requires reversed second cycle")
        if self.mode == "dynamical" and len(cones) == 2:
            if cones[1].direction != cones[0].direction:
                raise ConfigurationError("dynamical mode requires equal rotation senses")

    @property
    def duration(self) -> float:
        return float(sum(_segment_duration(s) for s in self.segments))

    def boundaries(self) -> np.ndarray:
        """Cumulative segment edge times including 0 and the total duration."""
        return np.concatenate([[0.0], np.cumsum([_segment_duration(s) for s in self.segments])])

    def breakpoints(self) -> Sequence[float]:
        return self.boundaries()[1:-1]

    def segment_span(self, index: int) -> tuple[float, float]:
        b = self.boundaries()
        return float(b[index]), float(b[index + 1])

    def locate(self, t: float) -> int:
        b = self.boundaries()
        if t < -1e-15 or t > b[-1] * (1 + 1e-12) + 1e-15:
            raise InvalidInputError(f"time {t} outside sequence duration {b[-1]}")
        i = int(np.searchsorted(b, t, side="right") - 1)
        return min(max(i, 0), len(self.segments) - 1)

    def field_at(self, t) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(ts), 3))
        b = self.boundaries()
        idx = np.clip(np.searchsorted(b, ts, side="right") - 1, 0, len(self.segments) - 1)
        for i in np.unique(idx):
            m = idx == i
            out[m] = self.segments[i].field_at(ts[m] - b[i])
        return out

    def max_field(self) -> float:
        return max(s.max_field() for s in self.segments)

    def carrier_at(self, t: float) -> float | None:
        seg = self.segments[self.locate(t)]
        if isinstance(seg, RfPulseSegment):
            return seg.carrier_frequency
        return None

    def cone_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if isinstance(s, ConicalSegment)]

    @property
    def theta(self) -> float:
        cones = self.cone_indices()
        if not cones:
            raise ConfigurationError("sequence has no conical segment")
        return self.segments[cones[0]].theta


def sample(sequence: EchoSequence, t: float) -> np.ndarray:
    """Field vector at time t in [0, duration]."""
    if t < 0 or t > sequence.duration * (1 + 1e-12):
        raise InvalidInputError(f"sample time {t} out of range [0, {sequence.duration}]")
    return sequence.field_at(np.array([min(t, sequence.duration)]))[0]


def design_pi2_pulse(guide_bz: float, amplitude: float,
                     constants: PhysicalConstants = NEUTRON,
                     calibrate_phase: bool = True) -> RfPulseSegment:
    """Resonant pi/2 pulse for a given guide field and linear drive amplitude.

    Duration follows the rotating-wave Rabi rate w1 = |gamma| * amplitude / 2,
    t = (pi/2)/w1; the carrier is resonant with the guide. Because the drive
    is linear and simulated in the lab frame, the residual longitudinal
    error after the pulse depends on the carrier phase through the
    counter-rotating term; the phase is tuned numerically (a deterministic
    calibration, cached per parameter set) unless calibrate_phase is False.
    """
    if amplitude <= 0:
        raise ConfigurationError("rf amplitude must be positive")
    if guide_bz == 0:
        raise ConfigurationError("pulse design requires a nonzero guide field")
    if not (math.isfinite(amplitude) and math.isfinite(guide_bz)):
        raise InvalidInputError("pulse parameters must be finite")
    w1 = abs(constants.gamma) * amplitude / 2.0
    duration = (math.pi / 2.0) / w1
    carrier = abs(constants.gamma) * abs(guide_bz)
    phase = -math.pi / 2.0
    if calibrate_phase:
        phase = _calibrated_rf_phase(float(guide_bz), float(amplitude), constants)
    return RfPulseSegment(axis="x", amplitude=amplitude, carrier_frequency=carrier,
                          carrier_phase=phase, duration=duration,
                          background=(0.0, 0.0, guide_bz))


def design_pi_pulse(guide_bz: float, amplitude: float,
                    constants: PhysicalConstants = NEUTRON,
                    calibrate_phase: bool = True) -> RfPulseSegment:
    """Resonant pi pulse: the pi/2 design with doubled duration."""
    p = design_pi2_pulse(guide_bz, amplitude, constants, calibrate_phase)
    return RfPulseSegment(axis=p.axis, amplitude=p.amplitude,
                          carrier_frequency=p.carrier_frequency,
                          carrier_phase=p.carrier_phase,
                          duration=2 * p.duration, background=p.background)


def _pulse_final_bz(guide_bz: float, amplitude: float, phases: np.ndarray,
                    constants: PhysicalConstants) -> np.ndarray:
    """|bloch_z| after the designed pi/2 pulse, batched over carrier phases."""
    w1 = abs(constants.gamma) * amplitude / 2.0
    duration = (math.pi / 2.0) / w1
    carrier = abs(constants.gamma) * abs(guide_bz)
    sign = 1.0 if guide_bz >= 0 else -1.0
    rho0 = spin.SpinState.from_bloch((0.0, 0.0, sign)).rho
    rho = np.broadcast_to(rho0, (len(phases), 2, 2)).copy()

    def sampler(tm: np.ndarray) -> np.ndarray:
        out = np.zeros((len(phases), len(tm), 3))
        out[:, :, 0] = amplitude * np.cos(carrier * tm[np.newaxis, :] + phases[:, np.newaxis])
        out[:, :, 2] = guide_bz
        return out

    bmax = math.hypot(guide_bz, amplitude)
    nchunk = 64  # keep per-call unitary blocks small
    edges = np.linspace(0.0, duration, nchunk + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        rho, _ = spin.propagate_interval(rho, sampler, a, b, bmax, constants,
                                         carrier=carrier)
    return np.abs(spin._bloch_from_rho(rho)[:, 2])


@lru_cache(maxsize=32)
def _calibrated_rf_phase(guide_bz: float, amplitude: float,
                         constants: PhysicalConstants) -> float:
    grid = np.linspace(-math.pi, math.pi, 121)
    z = _pulse_final_bz(guide_bz, amplitude, grid, constants)
    i = int(np.argmin(z))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(
        lambda p: float(_pulse_final_bz(guide_bz, amplitude, np.array([p]), constants)[0]),
        bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
    return float(res.x)


@dataclass(frozen=True)
class MarginReport:
    """Adiabaticity figures for the slow (non-rf) part of a program."""

    margin: float
    exceeded: bool
    per_segment: tuple[tuple[int, float], ...]


def adiabaticity_margin(sequence: EchoSequence,
                        constants: PhysicalConstants = NEUTRON) -> MarginReport:
    """max |dB/dt| / (|B| w_L(|B|)) over the slow field program.

    Conical segments use the closed form w sin(theta) / w_L evaluated with
    the cone's own field magnitude; tilt segments are evaluated on a grid.
    Resonant rf segments are intentionally non-adiabatic and are excluded.
    Raises on any zero-magnitude slow field (the ratio is singular there).
    """
    per = []
    worst = 0.0
    for i, seg in enumerate(sequence.segments):
        if isinstance(seg, RfPulseSegment):
            continue
        if isinstance(seg, StaticSegment):
            if np.linalg.norm(seg.fieldvec) == 0:
                raise ConfigurationError("adiabaticity undefined for zero field")
            m = 0.0
        elif isinstance(seg, ConicalSegment):
            b = seg.max_field()
            m = seg.angular_velocity * math.sin(seg.theta) / constants.larmor_frequency(b)
        elif isinstance(seg, TiltSegment):
            u = np.linspace(0.0, 1.0, 257)
            s = _smoothstep(u)
            m0 = np.linalg.norm(seg.start_field)
            m1 = np.linalg.norm(seg.end_field)
            mags = m0 + (m1 - m0) * s
            if np.min(mags) <= 0:
                raise ConfigurationError("adiabaticity undefined for zero field")
            _, _, ang, _, _ = seg._frame()
            sdot = (1 - np.cos(2 * np.pi * u)) / seg.duration
            rates = np.hypot(mags * ang * sdot, (m1 - m0) * sdot)
            ratios = rates / (mags * abs(constants.gamma) * mags)
            m = float(np.max(ratios))
        else:  # pragma: no cover
            continue
        per.append((i, m))
        worst = max(worst, m)
    return MarginReport(margin=worst, exceeded=worst > ADIABATIC_MARGIN_LIMIT,
                        per_segment=tuple(per))


def build_echo_sequence(
    guide_bz: float = -10e-6,
    rf_amplitude: float = 1.6e-6,
    offset_bx: float = 1.883834e-6,
    cycle_time: float = 0.2,
    ramp_time: float | None = None,
    direction: int = 1,
    mode: str = "geometric",
    cycles: int = 1,
    analysis: str = "none",
    constants: PhysicalConstants = NEUTRON,
) -> EchoSequence:
    """Assemble the full echo program.

    Layout: pi/2 pulse, reorientation into the cone frame, first conical
    cycle (sense `direction`), reorientation back, pi pulse, reorientation,
    second conical cycle (reversed sense in geometric mode, same sense in
    dynamical mode), reorientation back, optional analysis pi/2 pulse.
    ramp_time defaults to half a cycle time; with ramp_time = 0 the
    reorientations are omitted (sudden cone entry; useful for demonstrating
    why the ramps matter, but phase extraction then degrades off the
    equatorial geometry).
    """
    if mode not in ("geometric", "dynamical"):
        raise ConfigurationError(f"unknown echo mode {mode!r}")
    if direction not in (1, -1):
        raise ConfigurationError("direction must be +1 or -1")
    if ramp_time is None:
        ramp_time = cycle_time / 2.0
    if ramp_time < 0:
        raise ConfigurationError("ramp_time must be >= 0")
    pi2 = design_pi2_pulse(guide_bz, rf_amplitude, constants)
    pi = design_pi_pulse(guide_bz, rf_amplitude, constants)
    guide_vec = (0.0, 0.0, guide_bz)
    cone_start = (offset_bx, 0.0, guide_bz)
    d2 = -direction if mode == "geometric" else direction

    def cone(d: int) -> ConicalSegment:
        return ConicalSegment(guide_bz=guide_bz, offset_bx=offset_bx,
                              cycle_time=cycle_time, direction=d, cycles=cycles)

    segs: list[Segment] = [pi2]
    for d in (direction, d2):
        if ramp_time > 0:
            segs.append(TiltSegment(guide_vec, cone_start, ramp_time))
        segs.append(cone(d))
        if ramp_time > 0:
            segs.append(TiltSegment(cone_start, guide_vec, ramp_time))
        if d == direction:
            segs.append(pi)
    if analysis != "none":
        offset = 0.0 if analysis == "x" else math.pi / 2.0
        segs.append(RfPulseSegment(axis=pi2.axis, amplitude=pi2.amplitude,
                                   carrier_frequency=pi2.carrier_frequency,
                                   carrier_phase=pi2.carrier_phase + offset,
                                   duration=pi2.duration, background=pi2.background))
    slots = tuple(i for i, s in enumerate(segs) if isinstance(s, ConicalSegment))
    return EchoSequence(segments=tuple(segs), guide_bz=guide_bz,
                        rf_amplitude=rf_amplitude, offset_bx=offset_bx,
                        cycle_time=cycle_time, ramp_time=ramp_time,
                        direction=direction, mode=mode, cycles=cycles,
                        analysis=analysis, noise_slots=slots)


def build_reference_sequence(echo: EchoSequence) -> EchoSequence:
    """Duration-matched program with the cones and ramps replaced one-for-one
    by static guide segments; this is the no-evolution phase reference.

    Segments are replaced individually (never merged) so the reference
    shares the echo's segment boundaries, which the phase-extraction
    machinery relies on.
    """
    if echo.guide_bz is None:
        raise ConfigurationError("reference requires an assembled echo sequence")
    guide_vec = (0.0, 0.0, echo.guide_bz)
    segs: list[Segment] = []
    for seg in echo.segments:
        if isinstance(seg, (ConicalSegment, TiltSegment)):
            segs.append(StaticSegment(guide_vec, seg.duration))
        else:
            segs.append(seg)
    return EchoSequence(segments=tuple(segs), guide_bz=echo.guide_bz,
                        rf_amplitude=echo.rf_amplitude, analysis=echo.analysis)
