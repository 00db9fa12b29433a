import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from spinecho.constants import NEUTRON
from spinecho.errors import ConfigurationError, InvalidInputError
from spinecho.spin import (SIGMA_X, SIGMA_Y, SIGMA_Z, SpinState, bloch_of,
                           eigenstate_of_field, evolve, instantaneous_energy,
                           max_unitarity_defect, rotation_step)
from spinecho.waveform import ConicalSegment, EchoSequence, StaticSegment

OMEGA_L_10UT = NEUTRON.larmor_frequency(10e-6)


def expm_oracle(field, dt):
    """Reference: exp(-i H dt / hbar) via the dense matrix exponential."""
    h = -NEUTRON.mu * (field[0] * SIGMA_X + field[1] * SIGMA_Y + field[2] * SIGMA_Z)
    return scipy.linalg.expm(-1j * h * dt / NEUTRON.hbar)


def ode_oracle(bloch0, field_fn, duration, rtol=1e-11):
    """Reference: integrate ds/dt = gamma s x B(t) with solve_ivp."""

    def rhs(t, s):
        return NEUTRON.gamma * np.cross(s, field_fn(t))

    sol = solve_ivp(rhs, (0.0, duration), np.asarray(bloch0, float),
                    rtol=rtol, atol=1e-14, dense_output=True, max_step=duration / 50)
    assert sol.success
    return sol.y[:, -1]


# ---------------------------------------------------------------------------
# rotation_step
# ---------------------------------------------------------------------------

def test_zero_field_gives_identity():
    u = rotation_step((0.0, 0.0, 0.0), 1e-3)
    assert np.allclose(u, np.eye(2), atol=1e-15)


def test_full_precession_period_is_identity_up_to_phase():
    period = 2 * math.pi / OMEGA_L_10UT
    assert abs(period - 3.430e-3) < 2e-6  # 3.430 ms at 10 uT
    u = rotation_step((0.0, 0.0, 10e-6), period)
    # proportional to the identity: off-diagonals vanish, diagonals equal phase
    assert abs(u[0, 1]) < 1e-12 and abs(u[1, 0]) < 1e-12
    assert abs(u[0, 0] - u[1, 1]) < 1e-12
    assert np.allclose(u, expm_oracle((0, 0, 10e-6), period), atol=1e-12)
    # Bloch vectors are invariant
    for b in [(1, 0, 0), (0, 0.3, 0.6)]:
        rho = SpinState.from_bloch(b).rho
        assert np.allclose(bloch_of(SpinState(u @ rho @ u.conj().T)), b, atol=1e-12)


def test_half_period_flips_transverse_components():
    dt = math.pi / OMEGA_L_10UT
    u = rotation_step((0.0, 0.0, 10e-6), dt)
    b0 = np.array([0.4, -0.3, 0.5])
    rho = SpinState.from_bloch(b0).rho
    b1 = bloch_of(SpinState(u @ rho @ u.conj().T))
    assert np.allclose(b1, [-0.4, 0.3, 0.5], atol=1e-12)
    # cross-check against the dense ODE oracle
    b_ode = ode_oracle(b0, lambda t: np.array([0, 0, 10e-6]), dt)
    assert np.allclose(b1, b_ode, atol=1e-9)


def test_agrees_with_matrix_exponential_on_random_fields():
    rng = np.random.default_rng(7)
    for _ in range(50):
        f = rng.normal(scale=10e-6, size=3)
        dt = rng.uniform(0, 2e-3)
        assert np.max(np.abs(rotation_step(f, dt) - expm_oracle(f, dt))) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-50e-6, 50e-6), st.floats(-50e-6, 50e-6),
       st.floats(-50e-6, 50e-6), st.floats(0, 5e-3))
def test_step_unitarity_property(bx, by, bz, dt):
    u = rotation_step((bx, by, bz), dt)
    assert max_unitarity_defect(u) < 1e-12


def test_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        rotation_step((float("nan"), 0, 0), 1e-3)
    with pytest.raises(InvalidInputError):
        rotation_step((0, 0, 1e-6), -1.0)
    with pytest.raises(InvalidInputError):
        rotation_step((0, 1e-6), 1e-3)


# ---------------------------------------------------------------------------
# SpinState / bloch_of / energy
# ---------------------------------------------------------------------------

def test_bloch_of_basis_states():
    up_z = SpinState(np.array([[1, 0], [0, 0]], dtype=complex))
    assert np.allclose(up_z.bloch, [0, 0, 1], atol=1e-14)
    plus_x = SpinState(np.full((2, 2), 0.5, dtype=complex))
    assert np.allclose(plus_x.bloch, [1, 0, 0], atol=1e-14)
    mixed = SpinState(np.eye(2, dtype=complex) / 2)
    assert np.allclose(mixed.bloch, [0, 0, 0], atol=1e-14)
    assert mixed.polarization == 0.0


def test_state_validation():
    with pytest.raises(ConfigurationError):
        SpinState(np.array([[0.6, 0], [0, 0.6]], dtype=complex))  # trace != 1
    with pytest.raises(ConfigurationError):
        SpinState(np.array([[0.5, 0.1], [0.3, 0.5]], dtype=complex))  # not Hermitian
    with pytest.raises(ConfigurationError):
        SpinState(np.array([[1.2, 0], [0, -0.2]], dtype=complex))  # not PSD
    with pytest.raises(ConfigurationError):
        SpinState.from_bloch((1.2, 0, 0))


def test_instantaneous_energy():
    aligned = SpinState.from_bloch((0, 0, 1))
    e = instantaneous_energy(aligned, (0, 0, 10e-6))
    assert math.isclose(e, -NEUTRON.mu * 10e-6, rel_tol=1e-12)
    assert math.isclose(e, 9.66e-32, rel_tol=1e-12)
    perp = SpinState.from_bloch((1, 0, 0))
    assert abs(instantaneous_energy(perp, (0, 0, 10e-6))) < 1e-40
    assert instantaneous_energy(aligned, (0, 0, 0)) == 0.0


def test_eigenstate_of_field():
    s = eigenstate_of_field((0, 0, -10e-6))
    assert np.allclose(s.bloch, [0, 0, -1], atol=1e-14)
    s = eigenstate_of_field((3e-6, 0, 4e-6), aligned=False)
    assert np.allclose(s.bloch, [-0.6, 0, -0.8], atol=1e-12)
    with pytest.raises(InvalidInputError):
        eigenstate_of_field((0, 0, 0))


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def _static_program(field, duration):
    return EchoSequence(segments=(StaticSegment(tuple(field), duration),))


def test_static_precession_matches_ode_oracle():
    # azimuth advance about +z after 1 ms in a +10 uT z field; the ODE
    # ds/dt = gamma s x B is the authority for the sign
    state = SpinState.from_bloch((1.0, 0.0, 0.0))
    prog = _static_program((0, 0, 10e-6), 1e-3)
    final = evolve(state, prog, dt_max=1.0)[-1]
    b_ode = ode_oracle((1, 0, 0), lambda t: np.array([0, 0, 10e-6]), 1e-3)
    assert np.allclose(final.bloch, b_ode, atol=1e-8)
    az = math.atan2(final.bloch[1], final.bloch[0])
    expected = OMEGA_L_10UT * 1e-3  # counterclockwise about +z for gamma < 0
    assert abs(az - expected) < 1e-6
    assert abs(expected - 1.832) < 5e-4


def test_zero_duration_returns_input_state():
    state = SpinState.from_bloch((0.3, 0.1, -0.4))
    prog = _static_program((0, 0, 10e-6), 0.0)
    out = evolve(state, prog, dt_max=1e-3)
    assert np.allclose(out[-1].rho, state.rho)


def test_adiabatic_cone_sweep_keeps_eigenstate():
    # one full cycle at omega/omega_L = 0.017: final overlap >= 0.999
    T = 2 * math.pi / (0.017 * OMEGA_L_10UT)
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=0.0, cycle_time=T)
    prog = EchoSequence(segments=(cone,))
    start_field = cone.field_at(np.array([0.0]))[0]
    state = eigenstate_of_field(start_field)
    final = evolve(state, prog, dt_max=1.0)[-1]
    nhat = start_field / np.linalg.norm(start_field)
    fidelity = 0.5 * (1.0 + float(final.bloch @ nhat))
    assert fidelity >= 0.999


def test_purity_and_polarization_conserved():
    state = SpinState.from_bloch((0.0, 0.75, 0.0))
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=2e-6, cycle_time=0.05)
    prog = EchoSequence(segments=(cone,))
    samples = np.linspace(0, prog.duration, 9)
    out = evolve(state, prog, dt_max=1.0, sample_times=samples)
    p0 = state.purity
    for s in out:
        assert abs(s.purity - p0) < 1e-10
        assert s.polarization <= state.polarization + 1e-9
    assert abs(out[-1].polarization - 0.75) < 1e-10


def test_precession_law_finite_difference():
    # d s / dt from the trajectory matches gamma s x B to 0.1%
    field = np.array([0.0, 0.0, 10e-6])
    prog = _static_program(field, 2e-4)
    h = 0.02 / (abs(NEUTRON.gamma) * 10e-6)
    times = [1e-4 - h, 1e-4 + h]
    s0 = SpinState.from_bloch((0.8, 0.0, 0.3))
    b = [st.bloch for st in evolve(s0, prog, dt_max=1.0, sample_times=times)]
    deriv = (b[1] - b[0]) / (2 * h)
    mid = evolve(s0, prog, dt_max=1.0, sample_times=[1e-4])[0].bloch
    expected = NEUTRON.gamma * np.cross(mid, field)
    assert np.linalg.norm(deriv - expected) / np.linalg.norm(expected) < 1e-3


def test_brute_force_equivalence_random_piecewise_fields():
    rng = np.random.default_rng(42)
    for trial in range(4):
        n_seg = rng.integers(2, 11)
        segs = []
        fields = []
        for _ in range(n_seg):
            f = tuple(rng.normal(scale=8e-6, size=3))
            d = float(rng.uniform(1e-4, 2e-3))
            segs.append(StaticSegment(f, d))
            fields.append((f, d))
        prog = EchoSequence(segments=tuple(segs))
        state = SpinState.from_bloch((0.1, 0.7, -0.2))
        final = evolve(state, prog, dt_max=1.0)[-1]

        b = np.array([0.1, 0.7, -0.2])
        for f, d in fields:
            b = ode_oracle(b, lambda t, f=f: np.asarray(f), d)
        assert np.max(np.abs(final.bloch - b)) < 1e-6


def test_richardson_step_halving():
    # acceptance-suite waveform: the T = 200 ms cone of the phase scans
    cone = ConicalSegment(guide_bz=-10e-6, offset_bx=1.883834e-6, cycle_time=0.2)
    prog = EchoSequence(segments=(cone,))
    state = SpinState.from_bloch((0.0, 0.75, 0.0))
    h = 0.02 / (abs(NEUTRON.gamma) * cone.max_field())
    b1 = evolve(state, prog, dt_max=h)[-1].bloch
    b2 = evolve(state, prog, dt_max=h / 2)[-1].bloch
    assert np.max(np.abs(b1 - b2)) < 1e-6


def test_step_underflow_raises():
    # a 1 T field demands h < 1e-9 s for the 0.02 rad bound
    prog = _static_program((0, 0, 1.0), 1e-6)
    with pytest.raises(ConfigurationError):
        evolve(SpinState.from_bloch((1, 0, 0)), prog, dt_max=1.0)


def test_sample_time_validation():
    prog = _static_program((0, 0, 1e-6), 1e-3)
    with pytest.raises(InvalidInputError):
        evolve(SpinState.from_bloch((1, 0, 0)), prog, dt_max=1.0, sample_times=[2e-3])
    with pytest.raises(InvalidInputError):
        evolve(SpinState.from_bloch((1, 0, 0)), prog, dt_max=0.0)
