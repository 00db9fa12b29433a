import math

import numpy as np
import pytest

from spinecho import noise, protocol, theory
from spinecho.constants import NEUTRON
from spinecho.errors import (AdiabaticityWarning, ConfigurationError,
                             UndefinedPhaseError)
from spinecho.protocol import (ExperimentConfig, apply_t2_envelope,
                               extract_phase, polarization_analysis,
                               prepare_trace, run)
from spinecho.spin import SpinState
from spinecho.waveform import build_echo_sequence, build_reference_sequence

THETA_PAPER = theory.theta_from_berry_phase(-2.56)
BX_PAPER = 10e-6 / math.tan(THETA_PAPER)
OMEGA_L = NEUTRON.larmor_frequency(10e-6)


def _echo(mode="geometric", cycle_time=0.2, bx=BX_PAPER, **kw):
    return build_echo_sequence(offset_bx=bx, cycle_time=cycle_time, mode=mode, **kw)


@pytest.fixture(scope="module")
def paper_geo_result():
    seq = _echo()
    return run(ExperimentConfig(sequence=seq))


# ---------------------------------------------------------------------------
# reference / echo identity / controls
# ---------------------------------------------------------------------------

def test_no_evolution_reference_is_zero():
    ref_seq = build_reference_sequence(_echo())
    res = run(ExperimentConfig(sequence=ref_seq))
    assert abs(res.azimuth_shift) <= 1e-6


def test_geometric_echo_identity(paper_geo_result):
    # azimuth shift = 4 phi_g0 within the adiabatic budget 10 (w/wL)^2
    seq = _echo()
    phi0 = theory.berry_phase(seq.theta)
    expected = 4.0 * phi0
    w_over_wl = (2 * math.pi / 0.2) / NEUTRON.larmor_frequency(
        math.hypot(10e-6, BX_PAPER))
    budget = 10.0 * w_over_wl ** 2
    assert abs(paper_geo_result.azimuth_shift - expected) < budget
    assert abs(expected + 10.24) < 1e-3
    assert math.isclose(paper_geo_result.geometric_phase,
                        paper_geo_result.azimuth_shift / 4.0, rel_tol=1e-15)


def test_wrapped_value_of_unwrapped_shift(paper_geo_result):
    wrapped = (paper_geo_result.azimuth_shift + math.pi) % (2 * math.pi) - math.pi
    assert abs(wrapped - 2.3264) < 5e-3  # -10.24 + 4 pi


def test_dynamical_cancellation_and_scale_independence():
    shifts = []
    for scale in (0.5, 1.0, 2.0):
        seq = build_echo_sequence(guide_bz=-10e-6 * scale,
                                  rf_amplitude=1.6e-6 * scale,
                                  offset_bx=BX_PAPER * scale,
                                  cycle_time=0.2, mode="dynamical")
        res = run(ExperimentConfig(sequence=seq))
        shifts.append(res.azimuth_shift)
        assert abs(res.azimuth_shift) <= 0.02
    assert max(shifts) - min(shifts) < 0.02


def test_noise_replay_is_bit_identical():
    seq = _echo(cycle_time=0.05)
    ncfg = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0,
                             sample_dt=0.05 / 100, seed=5)
    trace = prepare_trace(ncfg, 0.05, 0)
    cfg = ExperimentConfig(sequence=seq, noise=ncfg)
    r1 = run(cfg, trace)
    r2 = run(cfg, trace)
    assert r1.azimuth_shift == r2.azimuth_shift
    assert np.array_equal(r1.final_state.rho, r2.final_state.rho)


def test_unwindowed_trace_rejected():
    seq = _echo(cycle_time=0.05)
    ncfg = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0,
                             sample_dt=0.05 / 100, seed=5)
    raw = noise.generate(ncfg, 0.05, 0)
    with pytest.raises(ConfigurationError):
        run(ExperimentConfig(sequence=seq, noise=ncfg), raw)


def test_short_trace_rejected():
    seq = _echo(cycle_time=0.1)
    ncfg = noise.NoiseConfig(sigma_p_field=2e-6, gamma=100.0,
                             sample_dt=5e-4, seed=5)
    trace = prepare_trace(ncfg, 0.05, 0)
    with pytest.raises(ConfigurationError):
        run(ExperimentConfig(sequence=seq, noise=ncfg), trace)


def test_adiabaticity_warning_attached():
    fast = build_echo_sequence(offset_bx=0.0,
                               cycle_time=2 * math.pi / (0.5 * OMEGA_L),
                               ramp_time=0.0)
    with pytest.warns(AdiabaticityWarning):
        res = run(ExperimentConfig(sequence=fast))
    assert any("adiabaticity" in w for w in res.warnings)


def test_dynamical_phase_diagnostic_scale():
    # the per-cycle dynamical phase is about -wL T / 2; the echo residual of
    # two identical cycles vanishes
    res = run(ExperimentConfig(sequence=_echo(cycle_time=0.05)))
    assert abs(res.dynamical_phase) < 1e-9


# ---------------------------------------------------------------------------
# extract_phase / azimuths
# ---------------------------------------------------------------------------

def test_extract_phase_identical_states():
    s = SpinState.from_bloch((0.6, 0.2, 0.0))
    assert extract_phase(s, s, (0, 0, 1)) == 0.0


def test_extract_phase_quarter_turn():
    a = SpinState.from_bloch((0, 1, 0))
    b = SpinState.from_bloch((1, 0, 0))
    assert extract_phase(a, b, (0, 0, 1)) == pytest.approx(math.pi / 2)
    # about the opposite axis the sense reverses
    assert extract_phase(a, b, (0, 0, -1)) == pytest.approx(-math.pi / 2)


def test_extract_phase_requires_transverse_component():
    pole = SpinState.from_bloch((0, 0, 0.9))
    ok = SpinState.from_bloch((0.5, 0, 0))
    with pytest.raises(UndefinedPhaseError):
        extract_phase(pole, ok, (0, 0, 1))


# ---------------------------------------------------------------------------
# T2 envelope
# ---------------------------------------------------------------------------

def test_t2_envelope_values():
    assert apply_t2_envelope(0.6, 0.0, 0.847) == 0.6
    assert apply_t2_envelope(0.75, 0.847, 0.847) == pytest.approx(0.75 / math.e)
    assert apply_t2_envelope(0.75, 0.847, 0.847) == pytest.approx(0.2759, abs=2e-4)
    factor = apply_t2_envelope(1.0, 2 * 0.25, 0.847)
    assert factor == pytest.approx(0.554, abs=5e-4)


def test_t2_envelope_applied_to_run(paper_geo_result):
    # 2 * 200 ms of conical evolution against T2 = 847 ms
    expected = 0.75 * math.exp(-0.4 / 0.847)
    assert paper_geo_result.s_final == pytest.approx(expected, rel=2e-3)
    # the density matrix itself stays pure-size (envelope is analytic only)
    assert paper_geo_result.final_state.polarization == pytest.approx(0.75, abs=1e-6)


# ---------------------------------------------------------------------------
# polarization analysis
# ---------------------------------------------------------------------------

def test_polarization_analysis_expectation():
    s = SpinState.from_bloch((1.0, 0.0, 0.0))
    assert np.allclose(polarization_analysis(s), [1, 0, 0], atol=1e-14)


def test_polarization_analysis_sampled():
    rng = np.random.Generator(np.random.Philox(key=[4, 2]))
    s = SpinState.from_bloch((0, 0, 0.75))
    est = polarization_analysis(s, mode="sampled", shots=100_000, rng=rng)
    assert abs(est[2] - 0.75) <= 0.01
    assert abs(est[0]) <= 0.01 and abs(est[1]) <= 0.01


def test_polarization_analysis_certain_outcome():
    rng = np.random.Generator(np.random.Philox(key=[4, 3]))
    s = SpinState.from_bloch((0, 0, 1.0))
    est = polarization_analysis(s, mode="sampled", shots=1000, rng=rng)
    assert est[2] == 1.0


def test_polarization_analysis_requires_shots():
    s = SpinState.from_bloch((0, 0, 1.0))
    with pytest.raises(ConfigurationError):
        polarization_analysis(s, mode="sampled", shots=0)


def test_analysis_settings_metadata():
    settings = protocol.analysis_settings()
    assert len(settings) == 6
    assert {name for name, _ in settings} == {"+x", "-x", "+y", "-y", "+z", "-z"}


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_experiment_config_validation():
    seq = _echo()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(sequence=seq, initial_polarization=1.2)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(sequence=seq, t2=0.0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(sequence=seq, analysis_mode="fancy")
