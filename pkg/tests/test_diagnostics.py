import math

import numpy as np
import pytest

from mwqubit.core import NO_DECAY, DecayRates, khz_to_rad
from mwqubit.diagnostics import (
    CoherenceFit,
    FitError,
    FitResult,
    dominant_frequency,
    estimate_pi_fidelity,
    finite_difference_rabi_jacobian,
    fit_coherence_saturation,
    fit_rabi_trace,
    fit_rotary_trace,
    initial_guess,
    oscillation_amplitude,
    rabi_model,
)
from mwqubit.dynamics import TimedTrace
from mwqubit.ensemble import EnsembleSpec, SignalModel, average_population, average_sequence_population, synthesize_signal
from mwqubit.lm import central_jacobian, levenberg_marquardt
from mwqubit.sequences import rotary_echo

CHI = khz_to_rad(27.78)
LATTICE = DecayRates.from_tau_d(5.5e-3)
NOISE = 0.01


def _grid(duration, per_period=10):
    return np.linspace(0.0, duration, int(duration * 27.78e3 * per_period) + 1)


def _trace(spec, duration=1.5e-3, decay=LATTICE, s1=1.0, s0=0.05, sigma=0.0, seed=None, per_period=10):
    pop = average_population(_grid(duration, per_period), spec, decay)
    return synthesize_signal(pop, SignalModel(s1, s0, sigma), seed)


def _truth(spec, s1=1.0, s0=0.05):
    return np.array([spec.chi0, spec.delta0, spec.dchi, spec.ddelta, s1, s0])


@pytest.fixture(scope="module")
def detuned_spec():
    return EnsembleSpec(CHI, 0.048 * CHI, 0.003 * CHI, 0.073 * CHI)


# --- least squares core -------------------------------------------------------------

def test_lm_rosenbrock_and_monotone_objective():
    fun = lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])  # noqa: E731
    res = levenberg_marquardt(fun, [-1.2, 1.0])
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_lm_reports_non_convergence():
    fun = lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])  # noqa: E731
    res = levenberg_marquardt(fun, [-1.2, 1.0], max_iter=2)
    assert not res.converged
    assert "maximum iterations" in res.message


def test_central_jacobian():
    fun = lambda x: np.array([x[0] ** 2 * x[1], math.sin(x[1])])  # noqa: E731
    j = central_jacobian(fun, np.array([1.5, 0.3]))
    np.testing.assert_allclose(j, [[2 * 1.5 * 0.3, 1.5**2], [0.0, math.cos(0.3)]], rtol=1e-8, atol=1e-10)


# --- model ------------------------------------------------------------------------

def test_model_matches_ensemble_average(detuned_spec):
    t = _grid(1e-3)
    model = rabi_model(t, _truth(detuned_spec, 2.0, 0.1), LATTICE, order=(21, 31))
    ref = average_population(t, detuned_spec, LATTICE, order=(21, 31))
    np.testing.assert_allclose(model, 2.0 * ref.values + 0.1, atol=1e-13)


def test_analytic_jacobian_agrees_with_finite_differences(detuned_spec):
    t = _grid(1e-3, 5)
    p = _truth(detuned_spec, 1.3, 0.2)
    _, analytic = rabi_model(t, p, LATTICE, order=15, jacobian=True)
    numeric = finite_difference_rabi_jacobian(t, p, LATTICE, order=15)
    scale = np.abs(numeric).max(axis=0)
    assert np.max(np.abs(analytic - numeric) / scale) < 1e-6


def test_finite_difference_jacobian_with_zero_offset(detuned_spec):
    t = _grid(0.5e-3, 5)
    p = _truth(detuned_spec, 1.0, 0.0)
    numeric = finite_difference_rabi_jacobian(t, p, LATTICE, order=11)
    np.testing.assert_allclose(numeric[:, 5], 1.0, rtol=1e-8)


def test_dominant_frequency(detuned_spec):
    tr = _trace(detuned_spec)
    omega = math.hypot(CHI, detuned_spec.delta0)
    assert dominant_frequency(tr) == pytest.approx(omega, rel=2e-3)


# --- Rabi fits ----------------------------------------------------------------------

def test_noiseless_round_trip(detuned_spec):
    tr = _trace(detuned_spec)
    fit = fit_rabi_trace(tr, LATTICE)
    truth = _truth(detuned_spec)
    assert fit.converged
    np.testing.assert_allclose(fit.params[[0, 1, 4, 5]], truth[[0, 1, 4, 5]], rtol=1e-3)
    np.testing.assert_allclose(fit.params[2:4], truth[2:4], rtol=1e-2)
    assert fit.residual_rms < 1e-8
    assert fit.gradient_cosine < 1e-4 or fit.message == "residual at working precision"


def test_fit_from_automatic_guess_with_fd_jacobian(detuned_spec):
    tr = _trace(detuned_spec, duration=1e-3, per_period=6)
    fit = fit_rabi_trace(tr, LATTICE, jacobian="fd", order=(21, 31))
    assert fit.converged
    assert fit.chi0 == pytest.approx(CHI, rel=1e-4)
    assert fit.ddelta == pytest.approx(detuned_spec.ddelta, rel=1e-2)


def test_initial_guess_is_close(detuned_spec):
    guess = initial_guess(_trace(detuned_spec), LATTICE)
    assert guess[0] == pytest.approx(CHI, rel=5e-3)
    assert guess[4] == pytest.approx(1.0, rel=0.3)


def test_noisy_round_trip_and_covariance(detuned_spec):
    tr = _trace(detuned_spec, duration=3e-3, sigma=NOISE, seed=7, per_period=5)
    fit = fit_rabi_trace(tr, LATTICE)
    assert fit.converged
    assert fit.chi0 == pytest.approx(CHI, rel=0.01)
    assert fit.ddelta == pytest.approx(detuned_spec.ddelta, rel=0.10)
    cov = fit.covariance
    np.testing.assert_allclose(cov, cov.T, rtol=0, atol=0)
    eig = np.linalg.eigvalsh(cov)
    assert eig.min() >= -1e-9 * eig.max()
    assert fit.residual_rms == pytest.approx(NOISE, rel=0.15)
    doc = fit.to_json()
    for key in ("chi0_hz_cyclic", "delta0_hz_cyclic", "dchi_rel", "ddelta_rel", "s1", "s0", "residual_rms", "covariance", "converged", "iterations"):
        assert key in doc
    assert doc["dchi_rel"] == pytest.approx(fit.dchi / fit.chi0)


def test_free_fall_and_lattice_spreads_distinguished():
    fits = []
    for rel in (0.033, 0.073):
        spec = EnsembleSpec(CHI, 0.048 * CHI, 0.003 * CHI, rel * CHI)
        fits.append(fit_rabi_trace(_trace(spec, duration=3e-3, sigma=NOISE, seed=11, per_period=5), LATTICE))
    (lo, hi) = fits
    assert lo.ddelta + lo.stderr[3] < hi.ddelta - hi.stderr[3]


def test_constant_trace_rejected():
    tr = TimedTrace(np.linspace(0, 1e-3, 100), np.full(100, 0.3))
    with pytest.raises(FitError, match="constant"):
        fit_rabi_trace(tr)
    with pytest.raises(FitError):
        fit_rotary_trace(tr)


def test_unconverged_fit_reported(detuned_spec):
    tr = _trace(detuned_spec, sigma=NOISE, seed=3)
    fit = fit_rabi_trace(tr, LATTICE, max_iter=1, order=(21, 31))
    assert not fit.converged
    with pytest.raises(FitError, match="unconverged"):
        estimate_pi_fidelity(fit, LATTICE)


# --- rotary and coherence fits -------------------------------------------------------

def test_rotary_fit_noiseless_homogeneous():
    g = 90.9
    tr = _trace(EnsembleSpec(CHI), duration=3e-3, decay=DecayRates(g, g), s0=0.02)
    fit = fit_rotary_trace(tr)
    assert fit.converged
    assert fit.gamma1 == pytest.approx(g, rel=0.01)
    assert fit.gamma2 == pytest.approx(g, rel=0.01)
    assert fit.tau_d == pytest.approx(1 / (2 * g), rel=0.01)
    # constant part lives twice as long as the oscillation when the rates are tied
    assert fit.tau_mean == pytest.approx(2 * fit.tau_d, rel=1e-12)
    free = fit_rotary_trace(tr, tie_rates=False)
    assert free.gamma1 == pytest.approx(g, rel=0.01) and free.gamma2 == pytest.approx(g, rel=0.01)


def test_rotary_fit_on_inhomogeneous_echo(lattice_spec):
    g = 90.9
    seq = rotary_echo(2 * math.pi, 0.0, 40, CHI)
    tr = average_sequence_population(seq, lattice_spec, DecayRates(g, g), samples_per_period=10)
    fit = fit_rotary_trace(tr)
    assert fit.gamma1 == pytest.approx(g, rel=0.05)
    assert fit.gamma2 == pytest.approx(g, rel=0.05)


def test_coherence_saturation_round_trip():
    a, b = 0.5, 94.34
    tau_s = np.geomspace(0.5e-3, 50e-3, 8)
    fit = fit_coherence_saturation(np.column_stack([tau_s, 1 / (a / tau_s + b)]))
    assert fit.a == pytest.approx(a, rel=1e-9)
    assert fit.b == pytest.approx(b, rel=1e-9)
    assert fit.tau_asymptote == pytest.approx(10.6e-3, rel=1e-3)
    # proportional regime and saturated regime
    assert fit.tau_d(1e-6) == pytest.approx(1e-6 / a, rel=1e-3)
    assert fit.tau_d(10.0) == pytest.approx(1 / b, rel=1e-3)


def test_coherence_unsaturated_and_singular():
    tau_s = np.geomspace(1e-3, 1e-2, 5)
    fit = fit_coherence_saturation(np.column_stack([tau_s, tau_s / 0.7]))
    assert fit.b == 0.0 and fit.tau_asymptote == math.inf and not fit.saturated
    with pytest.raises(FitError, match="singular"):
        fit_coherence_saturation([(1e-3, 1e-3)] * 4)
    with pytest.raises(FitError):
        fit_coherence_saturation([(1e-3, 1e-3), (2e-3, 1e-3)])
    assert isinstance(fit, CoherenceFit)


# --- fidelity estimate ---------------------------------------------------------------

def _fit_from(spec):
    return FitResult(spec.chi0, spec.delta0, spec.dchi, spec.ddelta, 1.0, 0.0, 0.0, np.zeros((6, 6)), True, 1)


def test_estimate_pi_fidelity_perfect():
    assert estimate_pi_fidelity(_fit_from(EnsembleSpec(CHI)), NO_DECAY) == pytest.approx(1.0, abs=1e-15)


def test_estimate_pi_fidelity_paper_values(lattice_spec):
    f = estimate_pi_fidelity(_fit_from(lattice_spec), LATTICE, 18.0e-6)
    assert f == pytest.approx(0.990, abs=0.005)


def test_oscillation_amplitude():
    t = np.linspace(0, 1, 1001)
    tr = TimedTrace(t, 0.5 + 0.25 * np.cos(2 * np.pi * 10 * t))
    assert oscillation_amplitude(tr, 0.0, 0.5) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        oscillation_amplitude(tr, 2.0, 3.0)
