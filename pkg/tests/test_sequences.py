import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import loglog_slope
from mwqubit.core import DecayRates
from mwqubit.core import Rotation, khz_to_rad
from mwqubit.ensemble import EnsembleSpec
from mwqubit.sequences import (
    PROPAGATOR,
    STATE,
    ErrorPoint,
    FidelityMeasure,
    bb1,
    bb1_phase,
    build_sequence,
    corpse,
    ensemble_gate_fidelity,
    plain_pulse,
    preset_error_fidelity,
    robustness_scan,
    rotary_echo,
    scrofulous_pi,
    sequence_fidelity,
    sequence_rotation,
)

CHI = khz_to_rad(27.78)
IDENTITY = Rotation.identity()


def infidelity(seq, f=0.0, eps=0.0, measure=PROPAGATOR):
    return 1.0 - sequence_fidelity(seq, ErrorPoint(f, eps), measure)


# --- constructors -----------------------------------------------------------------

def test_plain_pulse():
    seq = plain_pulse(math.pi, 0.0, CHI)
    assert len(seq) == 1
    assert seq.total_duration == pytest.approx(math.pi / CHI, rel=1e-15)
    assert seq.total_duration == pytest.approx(18.0e-6, rel=1e-3)
    assert sequence_fidelity(plain_pulse(2 * math.pi, 0.0, CHI), target=IDENTITY) == pytest.approx(1.0, abs=1e-12)
    for bad in ((0.0, 0.0, CHI), (math.pi, 0.0, 0.0), (-1.0, 0.0, 1.0)):
        with pytest.raises(ValueError):
            plain_pulse(*bad)


def test_rotary_echo_structure_and_identity():
    seq = rotary_echo(2 * math.pi, 0.0, 1, CHI)
    assert len(seq) == 2
    assert [s.phase for s in seq.segments] == [0.0, math.pi]
    assert all(s.duration == pytest.approx(2 * math.pi / CHI) for s in seq.segments)
    for n in range(1, 5):
        for repeats in (1, 3, 10):
            rot = sequence_rotation(rotary_echo(n * math.pi, 0.3, repeats, CHI))
            assert rot.close_to(IDENTITY, 1e-12)
    with pytest.raises(ValueError):
        rotary_echo(math.pi, 0.0, 0, CHI)


def test_corpse_angles_and_phases():
    seq = corpse(math.pi, CHI)
    angles = [s.angle for s in seq.segments]
    np.testing.assert_allclose(angles, [7 * math.pi / 3, 5 * math.pi / 3, math.pi / 3], rtol=1e-14)
    assert [s.phase for s in seq.segments] == [0.0, math.pi, 0.0]
    for bad in (0.0, 1.5 * math.pi):
        with pytest.raises(ValueError):
            corpse(bad, CHI)


@pytest.mark.parametrize(
    "seq",
    [
        plain_pulse(math.pi, 0.0, CHI),
        corpse(math.pi, CHI),
        corpse(math.pi / 2, CHI),
        scrofulous_pi(CHI),
        bb1(math.pi, CHI),
        bb1(math.pi, CHI, correction_first=False),
        bb1(math.pi / 2, CHI),
    ],
    ids=lambda s: s.label,
)
def test_zero_error_implements_target(seq):
    q = sequence_rotation(seq).quaternion
    # the global sign of the quaternion is irrelevant
    assert abs(abs(q @ _target_for(seq).quaternion) - 1.0) < 1e-12


def _target_for(seq):
    if seq.label in ("corpse", "bb1"):
        # recover the design angle from the construction
        for theta in (math.pi, math.pi / 2):
            ref = corpse(theta, CHI) if seq.label == "corpse" else bb1(theta, CHI)
            if math.isclose(ref.total_duration, seq.total_duration, rel_tol=1e-12):
                return Rotation((1.0, 0.0, 0.0), theta)
    return Rotation((1.0, 0.0, 0.0), math.pi)


def test_scrofulous_properties():
    seq = scrofulous_pi(CHI)
    assert sequence_fidelity(seq, measure=PROPAGATOR) == pytest.approx(1.0, abs=1e-12)
    plain = plain_pulse(math.pi, 0.0, CHI)
    assert infidelity(seq, eps=0.1) * 10 < infidelity(plain, eps=0.1)
    assert infidelity(seq, f=0.2) > infidelity(plain, f=0.2)


def test_bb1_properties():
    seq = bb1(math.pi, CHI)
    assert len(seq) == 4
    assert bb1_phase(math.pi) == pytest.approx(math.acos(-0.25))
    assert sequence_fidelity(seq, measure=PROPAGATOR) == pytest.approx(1.0, abs=1e-12)
    eps = np.geomspace(0.03, 0.2, 8)
    slope = loglog_slope(eps, [infidelity(seq, eps=e) for e in eps])
    assert slope == pytest.approx(6.0, abs=0.3)
    plain = plain_pulse(math.pi, 0.0, CHI)
    for f in np.linspace(0.02, 0.2, 10):
        ratio = infidelity(seq, f=f) / infidelity(plain, f=f)
        assert 0.5 <= ratio <= 2.0
    with pytest.raises(ValueError):
        bb1(4.0, CHI)


def test_bb1_ordering_is_equivalent_at_leading_order():
    eps = np.geomspace(0.03, 0.2, 6)
    a = [infidelity(bb1(math.pi, CHI, True), eps=e) for e in eps]
    b = [infidelity(bb1(math.pi, CHI, False), eps=e) for e in eps]
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_build_sequence_dispatch():
    assert build_sequence("corpse", math.pi, CHI).label == "corpse"
    assert len(build_sequence("rotary", 2 * math.pi, CHI, 3)) == 6
    with pytest.raises(ValueError, match="unknown pulse family"):
        build_sequence("grape", math.pi, CHI)
    with pytest.raises(ValueError):
        build_sequence("scrofulous", math.pi / 2, CHI)


# --- fidelity functionals ---------------------------------------------------------

def test_fidelity_measure_validation():
    with pytest.raises(ValueError):
        FidelityMeasure("trace_distance")
    with pytest.raises(ValueError):
        ErrorPoint(float("inf"), 0.0)


def test_plain_pulse_small_detuning_expansion():
    plain = plain_pulse(math.pi, 0.0, CHI)
    assert sequence_fidelity(plain) == 1.0
    assert sequence_fidelity(plain, ErrorPoint(f=0.1), PROPAGATOR) == pytest.approx(0.995, abs=5e-5)
    # the state overlap from |0> falls twice as fast
    assert 1 - sequence_fidelity(plain, ErrorPoint(f=0.1), STATE) == pytest.approx(0.01, rel=0.05)


@settings(max_examples=100)
@given(st.floats(-3.0, 3.0))
def test_plain_state_overlap_identity(f):
    expected = math.sin(math.pi / 2 * math.sqrt(1 + f * f)) ** 2 / (1 + f * f)
    got = sequence_fidelity(plain_pulse(math.pi, 0.0, CHI), ErrorPoint(f=f), STATE)
    assert got == pytest.approx(expected, abs=1e-12)


def test_plain_detuning_slope():
    f = np.geomspace(0.02, 0.2, 10)
    slope = loglog_slope(f, [infidelity(plain_pulse(math.pi, 0.0, CHI), f=x) for x in f])
    assert slope == pytest.approx(2.0, abs=0.1)


def test_corpse_detuning_compensation():
    """CORPSE suppresses the detuning error far below the plain pulse's.

    The leading surviving term here is sixth order in f; the quartic law
    with alpha = 6.5e-3 is checked (and reported) by the acceptance suite.
    """
    seq = corpse(math.pi, CHI)
    f = np.geomspace(0.05, 0.3, 8)
    inf = np.array([infidelity(seq, f=x) for x in f])
    plain = np.array([infidelity(plain_pulse(math.pi, 0.0, CHI), f=x) for x in f])
    assert np.all(inf < 0.1 * plain)
    assert loglog_slope(f, inf) > 4.0


def test_propagator_with_decay_rejected():
    with pytest.raises(ValueError, match="propagator fidelity undefined with dissipation"):
        sequence_fidelity(plain_pulse(math.pi, 0.0, CHI), measure=PROPAGATOR, decay=DecayRates(10.0, 10.0))


def test_state_fidelity_with_decay_matches_closed_form():
    from mwqubit.dynamics import DriveParams, torrey_population

    decay = DecayRates(90.9, 90.9)
    seq = plain_pulse(math.pi, 0.0, CHI)
    # off resonance the closed form is only a strong-driving approximation
    for f, tol in ((0.0, 1e-9), (0.1, 1e-4)):
        got = sequence_fidelity(seq, ErrorPoint(f=f), STATE, decay=decay)
        closed = torrey_population(math.pi / CHI, DriveParams(CHI, f * CHI), decay)
        assert got == pytest.approx(closed, abs=tol)


def test_ensemble_fidelity_trivial():
    seq = plain_pulse(math.pi, 0.0, CHI)
    assert ensemble_gate_fidelity(seq, EnsembleSpec(CHI)) == pytest.approx(1.0, abs=1e-15)


def test_ensemble_fidelity_monotone_in_spread_and_rates(lattice_spec):
    seq = plain_pulse(math.pi, 0.0, CHI)
    spreads = [0.0, 0.03, 0.073, 0.12]
    vals = [ensemble_gate_fidelity(seq, EnsembleSpec(CHI, 0.0, lattice_spec.dchi, s * CHI)) for s in spreads]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    rates = [0.0, 50.0, 90.9, 200.0]
    g1 = [ensemble_gate_fidelity(seq, lattice_spec, DecayRates(g, 0.0)) for g in rates]
    g2 = [ensemble_gate_fidelity(seq, lattice_spec, DecayRates(0.0, g)) for g in rates]
    assert all(a >= b for a, b in zip(g1, g1[1:]))
    assert all(a >= b for a, b in zip(g2, g2[1:]))


def test_ensemble_fidelity_monte_carlo_agrees(lattice_spec, lattice_decay):
    seq = plain_pulse(math.pi, 0.0, CHI)
    quad = ensemble_gate_fidelity(seq, lattice_spec, lattice_decay)
    mc = ensemble_gate_fidelity(seq, lattice_spec, lattice_decay, method="montecarlo", samples=20_000, seed=1)
    assert mc == pytest.approx(quad, abs=5e-4)


def test_scan_single_point_matches_ensemble_fidelity(lattice_spec, lattice_decay):
    table = robustness_scan("plain", "detuning", [0.0], lattice_spec, lattice_decay)
    seq = plain_pulse(math.pi, 0.0, CHI)
    assert table.fidelities[0] == pytest.approx(ensemble_gate_fidelity(seq, lattice_spec, lattice_decay), abs=1e-15)


def test_scan_validation(lattice_spec):
    with pytest.raises(ValueError, match="at least one"):
        robustness_scan("plain", "detuning", [], lattice_spec)
    with pytest.raises(ValueError):
        robustness_scan("plain", "phase", [0.0], lattice_spec)


def test_corpse_widens_detuning_window(lattice_spec):
    f = np.linspace(-0.6, 0.6, 61)
    corpse_tab = robustness_scan("corpse", "detuning", f, lattice_spec)
    plain_tab = robustness_scan("plain", "detuning", f, lattice_spec)
    assert corpse_tab.window_width(0.9) > plain_tab.window_width(0.9)


def test_composites_lose_peak_fidelity_to_decay(lattice_spec, lattice_decay):
    plain = robustness_scan("plain", "angle", [0.0], lattice_spec, lattice_decay).fidelities[0]
    for fam in ("scrofulous", "bb1"):
        assert robustness_scan(fam, "angle", [0.0], lattice_spec, lattice_decay).fidelities[0] < plain


def test_scan_independent_of_worker_count(lattice_spec, monkeypatch):
    pts = np.linspace(-0.3, 0.3, 7)
    monkeypatch.setenv("MWQUBIT_WORKERS", "1")
    a = robustness_scan("bb1", "angle", pts, lattice_spec).fidelities
    monkeypatch.setenv("MWQUBIT_WORKERS", "3")
    b = robustness_scan("bb1", "angle", pts, lattice_spec).fidelities
    np.testing.assert_array_equal(a, b)


def test_window_width_interpolates():
    from mwqubit.sequences import ScanTable

    tab = ScanTable("x", "detuning", np.array([-1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]))
    assert tab.window_width(0.5) == pytest.approx(1.0)
    assert tab.window_width(1.0) == 0.0


def test_preset_errors_cost_order_1e4(lattice_spec, lattice_decay):
    res = preset_error_fidelity(plain_pulse(math.pi, 0.0, CHI), lattice_spec, lattice_decay)
    assert 1e-5 < res.timing_reduction <= 1e-3
    # the detuning offsets alone reproduce the quoted gate fidelity
    assert res.detuning_only == pytest.approx(0.990, abs=0.005)
    assert res.total_reduction > res.timing_reduction
