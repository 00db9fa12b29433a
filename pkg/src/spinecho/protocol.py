"""Execution of the full echo experiment: preparation, noisy conical
evolution with identical noise replay in both halves, polarization
analysis, and branch-correct phase extraction against a duration-matched
no-evolution reference run.

Phase bookkeeping
-----------------
Azimuths are measured right-handed about the guide-field direction. The
azimuth difference between the run and the reference is accumulated
continuously along the trajectory, never through modular arithmetic at the
endpoint alone:

* static and reorientation segments: the relative azimuth moves slowly
  (both states precess at nearly the guide rate) and is unwrapped from
  dense samples;
* rf pulses: both runs see the identical pulse unitary, which maps the
  relative azimuth to minus itself up to a small pulse imperfection, so the
  value is flipped and snapped to the measured wrapped endpoint;
* conical segments: the lab azimuth is ill-defined mid-cycle (the
  precession plane sweeps the poles), so the phase is tracked as the
  eigenbasis coherence arg<s+|rho|s-> in a smooth gauge tied to the cone
  axis. Its advance equals the accumulated dynamical winding
  sum(gamma |B| h) -- an exact identity for the closed-form stepping --
  plus a slow geometric remainder, so subtracting the winding leaves an
  unwrappable signal. The segment's lab-azimuth advance is then the
  measured endpoint difference shifted to the branch nearest the coherence
  advance (the two quantities differ by less than pi for any cone angle).

The reported geometric phase is a quarter of the total azimuth shift: the
superposition doubles the eigenstate phase and the echo doubles the
geometric part while cancelling the dynamical part.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np

from . import noise as noise_mod
from . import spin
from .constants import NEUTRON, PhysicalConstants
from .errors import (AdiabaticityWarning, ConfigurationError,
                     InvalidInputError, UndefinedPhaseError)
from .noise import NoiseConfig, NoiseTrace
from .spin import SpinState
from .waveform import (ADIABATIC_MARGIN_LIMIT, ConicalSegment, EchoSequence,
                       RfPulseSegment, StaticSegment, TiltSegment,
                       adiabaticity_margin, build_reference_sequence)

#: Minimum samples per conical cycle for coherence-phase unwrapping.
MIN_CONE_SAMPLES = 64

#: Default trajectory/unwrap sample spacing outside cones, seconds.
MAX_SAMPLE_SPACING = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one echo experiment."""

    sequence: EchoSequence
    noise: NoiseConfig | None = None
    initial_polarization: float = 0.75
    t2: float = 0.847
    analysis_mode: str = "expectation"
    shots: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.initial_polarization <= 1.0):
            raise ConfigurationError("initial polarization must lie in [0, 1]")
        if self.t2 <= 0:
            raise ConfigurationError("t2 must be positive")
        if self.analysis_mode not in ("expectation", "sampled"):
            raise ConfigurationError(f"unknown analysis mode {self.analysis_mode!r}")


@dataclass(frozen=True)
class ExperimentResult:
    """Outcome of one experiment run."""

    final_state: SpinState
    azimuth_shift: float
    geometric_phase: float
    dynamical_phase: float
    s_final: float
    trajectory: tuple[np.ndarray, np.ndarray] | None = None
    warnings: tuple[str, ...] = ()


def apply_t2_envelope(polarization: float, evolution_time: float, t2: float) -> float:
    """Exponential transverse-dephasing envelope on a reported polarization."""
    if not (0.0 <= polarization <= 1.0):
        raise InvalidInputError("polarization must lie in [0, 1]")
    if t2 <= 0 or evolution_time < 0:
        raise InvalidInputError("t2 must be > 0 and evolution_time >= 0")
    return polarization * math.exp(-evolution_time / t2)


def _transverse_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic right-handed dyad (e1, e2) orthogonal to axis."""
    n = axis / np.linalg.norm(axis)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = seed - (seed @ n) * n
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def transverse_azimuth(bloch: np.ndarray, axis) -> np.ndarray:
    """Azimuth of Bloch vectors in the plane orthogonal to axis (rad)."""
    ax = np.asarray(axis, dtype=float)
    if np.linalg.norm(ax) == 0:
        raise InvalidInputError("guide axis must be nonzero")
    e1, e2 = _transverse_frame(ax)
    b = np.asarray(bloch, dtype=float)
    return np.arctan2(b @ e2, b @ e1)


def extract_phase(result_state: SpinState, reference_state: SpinState, guide_axis) -> float:
    """Signed azimuth difference of two states about the guide axis, wrapped
    to (-pi, pi]. Both states need transverse polarization >= 1e-6."""
    ax = np.asarray(guide_axis, dtype=float)
    e1, e2 = _transverse_frame(ax)
    for s in (result_state, reference_state):
        b = s.bloch
        if math.hypot(float(b @ e1), float(b @ e2)) < 1e-6:
            raise UndefinedPhaseError("state has no transverse polarization")
    d = transverse_azimuth(result_state.bloch, ax) - transverse_azimuth(
        reference_state.bloch, ax)
    return float(_wrap(d))


def polarization_analysis(state: SpinState, mode: str = "expectation",
                          shots: int = 0, rng: np.random.Generator | None = None
                          ) -> np.ndarray:
    """Bloch-vector estimate from the six-setting polarization analysis.

    Expectation mode returns the exact Bloch vector. Sampled mode draws
    counts for the +-x, +-y, +-z analyzer settings from p(+-i) = (1 +- s_i)/2
    with `shots` draws each and returns the per-axis count asymmetries.
    """
    if mode == "expectation":
        return state.bloch
    if mode != "sampled":
        raise ConfigurationError(f"unknown analysis mode {mode!r}")
    if shots <= 0:
        raise ConfigurationError("sampled analysis requires shots >= 1")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=[0, 0]))
    s = state.bloch
    est = np.empty(3)
    for i in range(3):
        p_plus = 0.5 * (1.0 + s[i])
        k_plus = rng.binomial(shots, min(max(p_plus, 0.0), 1.0))
        k_minus = rng.binomial(shots, min(max(1.0 - p_plus, 0.0), 1.0))
        est[i] = (k_plus - k_minus) / shots
    return est


def analysis_settings() -> tuple[tuple[str, str], ...]:
    """The six analyzer settings as (component, realization) metadata."""
    return (("+x", "pi/2 pulse, 0 deg offset"), ("-x", "pi/2 pulse, 0 deg offset + pi flip"),
            ("+y", "pi/2 pulse, 90 deg offset"), ("-y", "pi/2 pulse, 90 deg offset + pi flip"),
            ("+z", "direct projection"), ("-z", "pi flip + projection"))


def prepare_trace(config: NoiseConfig, span: float, realization_index: int) -> NoiseTrace:
    """Injection pipeline: generate, band-limit, then window.

    Windowing last keeps the end samples exactly zero, so the total field
    stays cyclic over each conical cycle.
    """
    raw = noise_mod.generate(config, span, realization_index)
    return noise_mod.apply_window(noise_mod.band_limit(raw))


def _wrap(x):
    return (x + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class _SegRecord:
    kind: str
    az: np.ndarray          # (S, L) lab azimuth about the guide direction
    chi: np.ndarray | None  # (S, L) gauge coherence phase, cones only
    winding: np.ndarray | None  # (S, L) cumulative dynamical winding, cones only
    winding_total: np.ndarray   # (L,) winding over the whole segment
    small_coherence: float  # smallest |<s+|rho|s->| seen (cones only, else 1)


@dataclass
class _SimOutput:
    records: list[_SegRecord]
    rho_final: np.ndarray
    times: np.ndarray | None = None
    blochs: np.ndarray | None = None


def _gauge_spinors(nhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvector pairs of sigma.nhat in the smooth +x-polar gauge.

    nhat: (S, 3) unit program-field directions. Returns (sp, sm), each
    (S, 2). Valid away from nhat = +-x, which conical paths never reach for
    cone angles in (0, pi/2].
    """
    ct = np.clip(nhat[:, 0], -1.0, 1.0)
    th = np.arccos(ct)
    ax = np.cross(np.array([1.0, 0.0, 0.0]), nhat)
    s = np.linalg.norm(ax, axis=1)
    safe = np.where(s < 1e-12, 1.0, s)
    ax = ax / safe[:, np.newaxis]
    c2, s2 = np.cos(th / 2), np.sin(th / 2)
    # U = cos(th/2) I - i sin(th/2) sigma.ax applied to |+x>, |-x|
    up = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
    dn = np.array([1.0, -1.0], dtype=complex) / math.sqrt(2.0)
    u = np.empty((len(th), 2, 2), dtype=complex)
    u[:, 0, 0] = c2 - 1j * s2 * ax[:, 2]
    u[:, 0, 1] = -1j * s2 * ax[:, 0] - s2 * ax[:, 1]
    u[:, 1, 0] = -1j * s2 * ax[:, 0] + s2 * ax[:, 1]
    u[:, 1, 1] = c2 + 1j * s2 * ax[:, 2]
    degenerate = s < 1e-12
    if np.any(degenerate):
        u[degenerate] = np.where(ct[degenerate, None, None] > 0,
                                 np.eye(2, dtype=complex),
                                 (-1j * spin.SIGMA_Y))
    return u @ up, u @ dn


def _segment_bounds(seg, rate_bound: float, trace_dt: float | None) -> np.ndarray:
    """Local sample-boundary times used for extraction and trajectory."""
    dur = seg.duration
    if dur == 0:
        return np.array([0.0])
    if isinstance(seg, ConicalSegment):
        per_cycle = MIN_CONE_SAMPLES
        if trace_dt is not None:
            per_cycle = max(per_cycle, int(math.ceil(seg.cycle_time / trace_dt)))
        n = per_cycle * seg.cycles
    elif isinstance(seg, RfPulseSegment):
        n = max(2, int(math.ceil(dur / MAX_SAMPLE_SPACING)))
    else:
        dt = min(MAX_SAMPLE_SPACING, (math.pi / 2.0) / rate_bound)
        n = max(1, int(math.ceil(dur / dt)))
    return np.linspace(0.0, dur, n + 1)


def _unwrap_rate_bound(seq: EchoSequence, constants: PhysicalConstants) -> float:
    """Upper bound on the lab-azimuth rate outside cones, rad/s."""
    sin_min = 1.0
    for s in seq.segments:
        if isinstance(s, ConicalSegment):
            sin_min = min(sin_min, math.sin(s.theta))
    g = abs(constants.gamma)
    return g * seq.max_field() / max(sin_min, 1e-3) + g * seq.max_field()


def _simulate(seq: EchoSequence, lanes: int, constants: PhysicalConstants,
              traces: list[NoiseTrace] | None = None,
              initial: SpinState | None = None,
              bounds_plan: list[np.ndarray] | None = None,
              keep_trajectory: bool = False,
              angle_limit: float = spin.STEP_ANGLE_LIMIT,
              dt_max: float = math.inf,
              noise_bound: float | None = None) -> tuple[_SimOutput, list[np.ndarray]]:
    """Propagate `lanes` states through seq, collecting extraction data.

    traces, when given, supplies one windowed noise realization per lane,
    injected along x during every noise-slot segment (replayed with the
    same local time origin in each). Returns the sim output and the
    per-segment bounds actually used (reusable for a matched reference).
    """
    if initial is None:
        raise InvalidInputError("initial state required")
    guide_dir = np.array([0.0, 0.0, math.copysign(1.0, seq.guide_bz or -1.0)])
    rate_bound = _unwrap_rate_bound(seq, constants)

    trace_arr = None
    trace_dt = None
    if traces is not None:
        if len(traces) != lanes:
            raise InvalidInputError("one noise trace per lane required")
        trace_dt = traces[0].dt
        nmin = min(len(t.samples) for t in traces)
        if any(abs(t.dt - trace_dt) > 1e-18 for t in traces):
            raise InvalidInputError("traces must share a sample grid")
        trace_arr = np.stack([t.samples[:nmin] for t in traces])

    rho = np.broadcast_to(np.asarray(initial.rho),
                          (lanes, 2, 2)).copy()
    records: list[_SegRecord] = []
    used_bounds: list[np.ndarray] = []
    traj_t: list[float] = []
    traj_b: list[np.ndarray] = []
    noise_slots = set(seq.noise_slots)
    t_global = 0.0

    for i_seg, seg in enumerate(seq.segments):
        noisy = i_seg in noise_slots and trace_arr is not None
        if noisy and traces is not None:
            span_needed = seg.duration
            if traces[0].duration < span_needed * (1 - 1e-12):
                raise ConfigurationError(
                    f"noise trace covers {traces[0].duration:.6g} s but the "
                    f"cycle lasts {span_needed:.6g} s")
            edge = max(abs(trace_arr[:, 0]).max(initial=0.0),
                       abs(trace_arr[:, -1]).max(initial=0.0))
            scale = max(float(np.max(np.abs(trace_arr))), 1e-30)
            if edge > 1e-9 * scale:
                raise ConfigurationError(
                    "noise trace endpoints are nonzero; window the trace to "
                    "keep the total field cyclic")
        if bounds_plan is not None:
            bounds = bounds_plan[i_seg]
        else:
            bounds = _segment_bounds(seg, rate_bound, trace_dt if noisy else None)
        used_bounds.append(bounds)

        if noisy:
            def sampler(tm, seg=seg):
                base = seg.field_at(tm)
                x = np.clip(tm / trace_dt, 0.0, trace_arr.shape[1] - 1.0)
                i0 = np.minimum(x.astype(int), trace_arr.shape[1] - 2)
                fr = x - i0
                kv = trace_arr[:, i0] * (1.0 - fr) + trace_arr[:, i0 + 1] * fr
                out = np.broadcast_to(base, (lanes, len(tm), 3)).copy()
                out[:, :, 0] += kv
                return out
            # the step bound must not depend on which lanes share a batch,
            # or chunking would perturb the step size
            extra = noise_bound if noise_bound is not None \
                else float(np.max(np.abs(trace_arr)))
            bmax = seg.max_field() + extra
        else:
            def sampler(tm, seg=seg):
                return np.broadcast_to(seg.field_at(tm), (lanes, len(tm), 3))
            bmax = seg.max_field()

        carrier = seg.carrier_frequency if isinstance(seg, RfPulseSegment) else None
        n_b = len(bounds)
        az = np.empty((n_b, lanes))
        winding = np.zeros((n_b, lanes))
        is_cone = isinstance(seg, ConicalSegment)
        chi = np.empty((n_b, lanes)) if is_cone else None
        small_c = 1.0
        if is_cone:
            sp, sm = _gauge_spinors(seg.nhat_at(bounds))

        def collect(j: int) -> None:
            nonlocal small_c
            bl = spin._bloch_from_rho(rho)
            az[j] = transverse_azimuth(bl, guide_dir)
            if is_cone:
                c = np.einsum("i,lij,j->l", sp[j].conj(), rho, sm[j])
                chi[j] = np.angle(c)
                small_c = min(small_c, float(np.min(np.abs(c))))
            if keep_trajectory:
                traj_t.append(t_global + bounds[j])
                traj_b.append(bl[0].copy())

        collect(0)
        acc = np.zeros(lanes)
        for j in range(n_b - 1):
            rho, w = spin.propagate_interval(
                rho, sampler, bounds[j], bounds[j + 1], bmax, constants,
                dt_max=dt_max, carrier=carrier, angle_limit=angle_limit)
            acc = acc + w
            winding[j + 1] = acc
            collect(j + 1)
        rho = spin.renormalize(rho)

        records.append(_SegRecord(
            kind=("rf" if isinstance(seg, RfPulseSegment)
                  else "cone" if is_cone else "slow"),
            az=az, chi=chi, winding=winding if is_cone else None,
            winding_total=acc, small_coherence=small_c))
        t_global += seg.duration

    out = _SimOutput(records=records, rho_final=rho)
    if keep_trajectory:
        out.times = np.asarray(traj_t)
        out.blochs = np.stack(traj_b)
    return out, used_bounds


def _relative_shift(run: _SimOutput, ref: _SimOutput) -> np.ndarray:
    """Branch-correct relative azimuth advance, run vs reference, per lane."""
    lanes = run.records[0].az.shape[1]
    rel = np.zeros(lanes)
    started = False
    for rec_run, rec_ref in zip(run.records, ref.records):
        if not started:
            if rec_run.kind == "rf":
                started = True
            continue
        az_ref = rec_ref.az[:, 0]
        if rec_run.kind == "rf":
            w_end = _wrap(rec_run.az[-1] - az_ref[-1])
            anchor = -rel
            rel = anchor + _wrap(w_end - anchor)
        elif rec_run.kind == "cone":
            detrended = np.unwrap(rec_run.chi - rec_run.winding, axis=0)
            dchi = (detrended[-1] + rec_run.winding[-1]) - (
                detrended[0] + rec_run.winding[0])
            ref_adv = np.unwrap(az_ref)
            dref = ref_adv[-1] - ref_adv[0]
            w_base = _wrap(rec_run.az[-1] - az_ref[-1]) - _wrap(rec_run.az[0] - az_ref[0])
            predicted = -dchi - dref
            k = np.round((predicted - w_base) / (2.0 * np.pi))
            rel = rel + w_base + 2.0 * np.pi * k
        else:
            relseq = np.unwrap(_wrap(rec_run.az - az_ref[:, np.newaxis]), axis=0)
            rel = rel + relseq[-1] - relseq[0]
    return rel


def _run_lanes(config: ExperimentConfig,
               traces: list[NoiseTrace] | None,
               constants: PhysicalConstants,
               reference: _SimOutput | None = None,
               keep_trajectory: bool = False,
               angle_limit: float = spin.STEP_ANGLE_LIMIT,
               dt_max: float = math.inf,
               noise_bound: float | None = None,
               ) -> tuple[np.ndarray, np.ndarray, _SimOutput, _SimOutput, list[str]]:
    """Shared machinery for run() and the ensemble engine."""
    seq = config.sequence
    if seq.guide_bz is None:
        raise ConfigurationError("run() needs an assembled echo sequence")
    lanes = 1 if traces is None else len(traces)
    warn: list[str] = []

    report = adiabaticity_margin(seq, constants)
    if report.exceeded:
        msg = (f"adiabaticity margin {report.margin:.3g} exceeds "
               f"{ADIABATIC_MARGIN_LIMIT}")
        _warnings.warn(msg, AdiabaticityWarning, stacklevel=3)
        warn.append(msg)
    if config.noise is not None:
        omega_l = constants.larmor_frequency(abs(seq.guide_bz))
        if not noise_mod.check_bandwidth(config.noise, omega_l):
            warn.append("noise bandwidth close to the Larmor frequency")

    guide_dir_z = math.copysign(1.0, seq.guide_bz)
    initial = SpinState.from_bloch((0.0, 0.0, guide_dir_z * config.initial_polarization))

    run_out, bounds = _simulate(seq, lanes, constants, traces=traces,
                                initial=initial, keep_trajectory=keep_trajectory,
                                angle_limit=angle_limit, dt_max=dt_max,
                                noise_bound=noise_bound)
    if reference is None:
        ref_seq = build_reference_sequence(seq)
        reference, _ = _simulate(ref_seq, 1, constants, initial=initial,
                                 bounds_plan=bounds, angle_limit=angle_limit,
                                 dt_max=dt_max)
    shifts = _relative_shift(run_out, reference)

    cone_windings = [r.winding_total for r in run_out.records if r.kind == "cone"]
    if len(cone_windings) == 2:
        dyn_residual = 0.5 * (cone_windings[0] - cone_windings[1])
    else:
        dyn_residual = np.zeros(lanes)
    return shifts, dyn_residual, run_out, reference, warn


def run(config: ExperimentConfig, noise_trace: NoiseTrace | None = None,
        constants: PhysicalConstants = NEUTRON,
        keep_trajectory: bool = False,
        angle_limit: float = spin.STEP_ANGLE_LIMIT,
        reference: _SimOutput | None = None) -> ExperimentResult:
    """Run one experiment; replay the given noise trace in both echo halves.

    The trace must be windowed (zero endpoints) so the total field stays
    cyclic. The result carries the unwrapped azimuth shift against the
    no-evolution reference, the reported geometric phase (a quarter of the
    shift), the uncancelled dynamical-phase residual between the two
    cycles, and the final polarization after the analytic transverse decay
    envelope.
    """
    traces = None if noise_trace is None else [noise_trace]
    shifts, dyn, out, _ref, warn = _run_lanes(
        config, traces, constants, reference=reference,
        keep_trajectory=keep_trajectory, angle_limit=angle_limit)
    seq = config.sequence
    cone_time = sum(s.duration for s in seq.segments if isinstance(s, ConicalSegment))
    final = SpinState(spin.renormalize(out.rho_final[0]))
    s_final = apply_t2_envelope(final.polarization, cone_time, config.t2)
    trajectory = None
    if keep_trajectory and out.times is not None:
        trajectory = (out.times, out.blochs)
    return ExperimentResult(
        final_state=final,
        azimuth_shift=float(shifts[0]),
        geometric_phase=float(shifts[0]) / 4.0,
        dynamical_phase=float(dyn[0]),
        s_final=float(s_final),
        trajectory=trajectory,
        warnings=tuple(warn),
    )
