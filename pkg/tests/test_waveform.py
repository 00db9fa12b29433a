import math

import numpy as np
import pytest

from spinecho.constants import NEUTRON
from spinecho.errors import ConfigurationError
from spinecho.spin import SpinState, evolve
from spinecho.waveform import (ConicalSegment, EchoSequence, RfPulseSegment,
                               StaticSegment, TiltSegment,
                               adiabaticity_margin, build_echo_sequence,
                               build_reference_sequence, design_pi2_pulse,
                               design_pi_pulse, sample)

OMEGA_L = NEUTRON.larmor_frequency(10e-6)
THETA_PAPER = math.acos(1 - 2.56 / math.pi)  # 79.33 deg


# ---------------------------------------------------------------------------
# pulse design
# ---------------------------------------------------------------------------

def test_pi2_duration_matches_rabi_rule():
    p = design_pi2_pulse(-10e-6, 1.6e-6, calibrate_phase=False)
    w1 = abs(NEUTRON.gamma) * 1.6e-6 / 2
    assert math.isclose(p.duration, (math.pi / 2) / w1, rel_tol=1e-12)
    # 10.72 ms, within 0.2% of the quoted 10.7 ms
    assert abs(p.duration * 1e3 - 10.72) < 5e-3
    assert abs(p.duration * 1e3 - 10.7) / 10.7 < 2e-3
    assert math.isclose(p.carrier_frequency, OMEGA_L, rel_tol=1e-12)


def test_doubling_amplitude_halves_duration():
    p1 = design_pi2_pulse(-10e-6, 1.6e-6, calibrate_phase=False)
    p2 = design_pi2_pulse(-10e-6, 3.2e-6, calibrate_phase=False)
    assert math.isclose(p2.duration, p1.duration / 2, rel_tol=1e-12)


def test_pi_pulse_doubles_duration():
    p = design_pi2_pulse(-10e-6, 1.6e-6)
    q = design_pi_pulse(-10e-6, 1.6e-6)
    assert math.isclose(q.duration, 2 * p.duration, rel_tol=1e-12)
    assert q.carrier_phase == p.carrier_phase


def test_lab_frame_pulse_leaves_equal_superposition():
    # calibrated pulse on the aligned state: |bloch_z| <= 0.01
    p = design_pi2_pulse(-10e-6, 1.6e-6)
    prog = EchoSequence(segments=(p,))
    final = evolve(SpinState.from_bloch((0, 0, -1.0)), prog, dt_max=1.0)[-1]
    assert abs(final.bloch[2]) <= 0.01


def test_pulse_design_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        design_pi2_pulse(-10e-6, 0.0)
    with pytest.raises(ConfigurationError):
        design_pi2_pulse(0.0, 1.6e-6)


# ---------------------------------------------------------------------------
# conical segment geometry and sampling
# ---------------------------------------------------------------------------

def test_cone_field_values():
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=1.883834e-6, cycle_time=0.2)
    seq = EchoSequence(segments=(cone,))
    f0 = sample(seq, 0.0)
    assert np.allclose(f0, [1.883834e-6, 0.0, -10e-6])
    # quarter cycle, direction +1: (offset, -Bz(0), 0)
    fq = sample(seq, 0.05)
    assert np.allclose(fq, [1.883834e-6, 10e-6, 0.0], atol=1e-20)
    # |B| constant across the segment to 1e-15 relative
    ts = np.linspace(0, 0.2, 1001)
    mags = np.linalg.norm(cone.field_at(ts), axis=1)
    assert np.max(np.abs(mags - mags[0])) / mags[0] < 1e-15


def test_cone_cyclicity_bit_for_bit():
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=2e-6, cycle_time=0.07,
                          direction=-1, cycles=3)
    f0 = cone.field_at(np.array([0.0]))[0]
    f1 = cone.field_at(np.array([cone.cycle_time * cone.cycles]))[0]
    assert np.array_equal(f0, f1)
    fmid = cone.field_at(np.array([cone.cycle_time]))[0]
    assert np.array_equal(f0, fmid)


def test_cone_derived_geometry():
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=1.883834e-6, cycle_time=0.2)
    assert math.isclose(math.tan(cone.theta), cone.guide_magnitude / cone.offset_bx,
                        rel_tol=1e-12)
    assert math.isclose(cone.solid_angle, 2 * math.pi * (1 - math.cos(cone.theta)),
                        rel_tol=1e-12)
    assert abs(math.degrees(cone.theta) - 79.33) < 0.01
    assert math.isclose(cone.angular_velocity, 2 * math.pi / 0.2, rel_tol=1e-12)


def test_cone_validation():
    with pytest.raises(ConfigurationError):
        ConicalSegment(guide_bz=0.0, offset_bx=1e-6, cycle_time=0.1)
    with pytest.raises(ConfigurationError):
        ConicalSegment(guide_bz=-1e-5, offset_bx=1e-6, cycle_time=0.1, direction=2)
    with pytest.raises(ConfigurationError):
        ConicalSegment(guide_bz=-1e-5, offset_bx=1e-6, cycle_time=0.1, cycles=0)
    with pytest.raises(ConfigurationError):
        ConicalSegment(guide_bz=-1e-5, offset_bx=-1e-6, cycle_time=0.1)


# ---------------------------------------------------------------------------
# tilt segments
# ---------------------------------------------------------------------------

def test_tilt_endpoints_exact():
    t = TiltSegment((0, 0, -10e-6), (2e-6, 0, -10e-6), 0.05)
    f = t.field_at(np.array([0.0, 0.05]))
    assert np.allclose(f[0], [0, 0, -10e-6], atol=1e-22)
    assert np.allclose(f[1], [2e-6, 0, -10e-6], atol=1e-22)
    # magnitude blends monotonically between endpoint magnitudes
    ts = np.linspace(0, 0.05, 201)
    mags = np.linalg.norm(t.field_at(ts), axis=1)
    assert mags.min() >= np.linalg.norm([0, 0, 10e-6]) - 1e-20
    assert mags.max() <= np.linalg.norm([2e-6, 0, -10e-6]) + 1e-20


def test_tilt_rejects_antiparallel_and_zero():
    with pytest.raises(ConfigurationError):
        TiltSegment((0, 0, 1e-6), (0, 0, -1e-6), 0.01)
    with pytest.raises(ConfigurationError):
        TiltSegment((0, 0, 0), (0, 0, 1e-6), 0.01)
    with pytest.raises(ConfigurationError):
        TiltSegment((0, 0, 1e-6), (0, 0, 2e-6), 0.0)


# ---------------------------------------------------------------------------
# echo assembly
# ---------------------------------------------------------------------------

def test_echo_sequence_layout_and_modes():
    seq = build_echo_sequence()
    kinds = [type(s).__name__ for s in seq.segments]
    assert kinds == ["RfPulseSegment", "TiltSegment", "ConicalSegment",
                     "TiltSegment", "RfPulseSegment", "TiltSegment",
                     "ConicalSegment", "TiltSegment"]
    cones = [s for s in seq.segments if isinstance(s, ConicalSegment)]
    assert cones[1].direction == -cones[0].direction  # geometric mode
    dyn = build_echo_sequence(mode="dynamical")
    cones = [s for s in dyn.segments if isinstance(s, ConicalSegment)]
    assert cones[1].direction == cones[0].direction
    assert seq.noise_slots == (2, 6)


def test_echo_mode_invariant_enforced():
    seq = build_echo_sequence()
    cones = [s for s in seq.segments if isinstance(s, ConicalSegment)]
    bad = tuple(cones[0] if isinstance(s, ConicalSegment) else s
                for s in seq.segments)
    with pytest.raises(ConfigurationError):
        EchoSequence(segments=bad, mode="geometric")


def test_slow_program_magnitude_continuity():
    # |B| of the guide/tilt/cone chain is continuous across boundaries
    seq = build_echo_sequence()
    b = seq.boundaries()
    for i, seg in enumerate(seq.segments):
        if isinstance(seg, RfPulseSegment):
            continue
        left = np.linalg.norm(seg.field_at(np.array([0.0]))[0])
        if i > 0 and not isinstance(seq.segments[i - 1], RfPulseSegment):
            prev = seq.segments[i - 1]
            right = np.linalg.norm(prev.field_at(np.array([prev.duration]))[0])
            assert abs(left - right) / left < 1e-12
        # rf background equals the guide everywhere
    for seg in seq.segments:
        if isinstance(seg, RfPulseSegment):
            assert seg.background == (0.0, 0.0, seq.guide_bz)
    assert b[-1] == pytest.approx(seq.duration)


def test_reference_sequence_matches_structure():
    seq = build_echo_sequence()
    ref = build_reference_sequence(seq)
    assert len(ref.segments) == len(seq.segments)
    assert math.isclose(ref.duration, seq.duration, rel_tol=1e-12)
    for s_run, s_ref in zip(seq.segments, ref.segments):
        assert math.isclose(s_run.duration, s_ref.duration, rel_tol=1e-12)
        if isinstance(s_run, RfPulseSegment):
            assert s_run == s_ref
        else:
            assert isinstance(s_ref, StaticSegment) or isinstance(s_run, StaticSegment)


def test_sample_out_of_range():
    seq = build_echo_sequence()
    with pytest.raises(Exception):
        sample(seq, -1.0)
    with pytest.raises(Exception):
        sample(seq, seq.duration * 1.01)


# ---------------------------------------------------------------------------
# adiabaticity margin
# ---------------------------------------------------------------------------

def test_margin_equatorial_cone():
    # theta = 90 deg, T = 200 ms, |B| = 10 uT: omega/omega_L ~ 0.017
    seq = build_echo_sequence(offset_bx=0.0, cycle_time=0.2)
    rep = adiabaticity_margin(seq)
    expected = (2 * math.pi / 0.2) / OMEGA_L
    assert abs(rep.margin - expected) < 1e-6
    assert abs(rep.margin - 0.017) < 5e-4
    assert not rep.exceeded


def test_margin_static_is_zero():
    seq = EchoSequence(segments=(StaticSegment((0, 0, -10e-6), 0.1),))
    rep = adiabaticity_margin(seq)
    assert rep.margin == 0.0


def test_margin_tilted_cone_formula():
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=1.883834e-6, cycle_time=0.2)
    seq = EchoSequence(segments=(cone,))
    rep = adiabaticity_margin(seq)
    w = 2 * math.pi / 0.2
    expected = w * math.sin(cone.theta) / NEUTRON.larmor_frequency(cone.max_field())
    assert math.isclose(rep.margin, expected, rel_tol=1e-9)
    # the 0.017*sin(theta) estimate (guide-field Larmor rate) is ~2% above
    assert abs(rep.margin - 0.017 * math.sin(cone.theta)) / rep.margin < 0.025


def test_margin_zero_field_raises():
    seq = EchoSequence(segments=(StaticSegment((0, 0, 0), 0.1),))
    with pytest.raises(ConfigurationError):
        adiabaticity_margin(seq)


def test_margin_flags_fast_cone():
    seq = EchoSequence(segments=(
        ConicalSegment(guide_bz=-10e-6, offset_bx=0.0,
                       cycle_time=2 * math.pi / (0.5 * OMEGA_L)),))
    rep = adiabaticity_margin(seq)
    assert rep.exceeded
    assert abs(rep.margin - 0.5) < 1e-3
