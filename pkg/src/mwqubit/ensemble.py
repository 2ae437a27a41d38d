"""Gaussian inhomogeneous averaging over (chi, delta) and signal synthesis."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import TWO_PI, BlochState, DecayRates, PulseSequence, NO_DECAY, khz_to_rad, state_from_logical
from .dynamics import SAMPLES_PER_PERIOD, TimedTrace, pi1_closed_form, propagate_members, sequence_grid

DEFAULT_ORDER = 21
#: per-axis orders tried by :func:`required_order`
ORDER_LADDER = (21, 31, 41, 61, 81, 121, 161, 241)
#: target change in the averaged population when refining an axis
ORDER_TOL = 1e-7
#: members per Monte Carlo chunk (bounds memory for long traces)
_MC_CHUNK = 20_000

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class EnsembleEvaluationError(RuntimeError):
    def __init__(self, index: int, chi: float, delta: float, cause: str):
        super().__init__(f"evaluator failed at node {index} (chi={chi!r} rad/s, delta={delta!r} rad/s): {cause}")
        self.index, self.chi, self.delta = index, chi, delta


@dataclass(frozen=True)
class EnsembleSpec:
    """Gaussian distribution of member Rabi rate and detuning (rad/s)."""

    chi0: float
    delta0: float = 0.0
    dchi: float = 0.0
    ddelta: float = 0.0
    correlation: float = 0.0

    def __post_init__(self):
        vals = (self.chi0, self.delta0, self.dchi, self.ddelta, self.correlation)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("EnsembleSpec fields must be finite")
        if self.chi0 <= 0:
            raise ValueError("EnsembleSpec.chi0 must be > 0")
        if self.dchi < 0 or self.ddelta < 0:
            raise ValueError("EnsembleSpec spreads must be >= 0")
        if not -1.0 < self.correlation < 1.0:
            raise ValueError("EnsembleSpec.correlation must lie in (-1, 1)")

    @classmethod
    def from_fractions(cls, chi0_khz: float, delta0_khz: float = 0.0, dchi_rel: float = 0.0, ddelta_rel: float = 0.0):
        chi0 = khz_to_rad(chi0_khz)
        return cls(chi0, khz_to_rad(delta0_khz), dchi_rel * chi0, ddelta_rel * chi0)

    @property
    def dchi_rel(self) -> float:
        return self.dchi / self.chi0

    @property
    def ddelta_rel(self) -> float:
        return self.ddelta / self.chi0

    def shifted(self, f: float = 0.0, eps: float = 0.0) -> "EnsembleSpec":
        """Deliberate errors: mean detuning += f chi0, mean Rabi *= 1 + eps.

        Spreads are left unchanged.
        """
        return EnsembleSpec(self.chi0 * (1.0 + eps), self.delta0 + f * self.chi0, self.dchi, self.ddelta, self.correlation)


@dataclass(frozen=True)
class SignalModel:
    s1: float = 1.0
    s0: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Nodes:
    chi: np.ndarray
    delta: np.ndarray
    weights: np.ndarray
    lost_weight: float = 0.0


def _correlate(spec: EnsembleSpec, x1, x2):
    chi = spec.chi0 + spec.dchi * x1
    rho = spec.correlation
    delta = spec.delta0 + spec.ddelta * (rho * x1 + math.sqrt(1.0 - rho * rho) * x2)
    return chi, delta


def axis_orders(order) -> tuple[int, int]:
    """Normalise an order (int or ``(n_chi, n_delta)``) to a pair."""
    pair = (order, order) if np.ndim(order) == 0 else tuple(order)
    if len(pair) != 2 or any(int(n) != n or n < 1 for n in pair):
        raise ValueError(f"quadrature order must be a positive int or a pair of them, got {order!r}")
    return int(pair[0]), int(pair[1])


def gauss_hermite(order: int):
    """Probabilists' Gauss-Hermite nodes with weights summing to one."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


def quadrature_nodes(spec: EnsembleSpec, order=DEFAULT_ORDER) -> Nodes:
    """Tensor-product Gauss-Hermite nodes with weights summing to one.

    ``order`` is an int or a per-axis pair ``(n_chi, n_delta)``. An axis
    with zero spread collapses to a single node. Nodes with chi <= 0 are
    dropped and the rest renormalised.
    """
    n1, n2 = axis_orders(order)
    one = (np.zeros(1), np.ones(1))
    # a correlated delta axis needs the chi axis resolved even if dchi == 0
    ax1 = gauss_hermite(n1) if spec.dchi > 0 else one
    ax2 = gauss_hermite(n2) if spec.ddelta > 0 else one
    x1, x2 = np.meshgrid(ax1[0], ax2[0], indexing="ij")
    w12 = np.outer(ax1[1], ax2[1])
    chi, delta = _correlate(spec, x1.ravel(), x2.ravel())
    weights = w12.ravel()
    keep = chi > 0
    lost = float(weights[~keep].sum())
    if lost > 1e-12:
        warnings.warn(f"dropping chi <= 0 nodes removes weight {lost:.3g}", RuntimeWarning, stacklevel=2)
    weights = weights[keep] / weights[keep].sum()
    return Nodes(chi[keep], delta[keep], weights, lost)


def monte_carlo_nodes(spec: EnsembleSpec, samples: int, seed) -> Nodes:
    if seed is None:
        raise ValueError("Monte Carlo averaging requires a seed")
    if samples < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal(samples)
    x2 = rng.standard_normal(samples)
    chi, delta = _correlate(spec, x1, x2)
    keep = chi > 0
    n = int(keep.sum())
    return Nodes(chi[keep], delta[keep], np.full(n, 1.0 / n), 1.0 - n / samples)


def closed_form_evaluator(decay: DecayRates = NO_DECAY, exact: bool = True) -> Evaluator:
    def evaluate(times, chi, delta):
        return pi1_closed_form(times[None, :], chi[:, None], delta[:, None], decay.gamma1, decay.gamma2, exact)

    return evaluate


def _evaluate(evaluator: Evaluator, times, chi, delta) -> np.ndarray:
    try:
        vals = np.asarray(evaluator(times, chi, delta), dtype=float)
        if vals.shape != (chi.size, times.size):
            raise ValueError(f"evaluator returned shape {vals.shape}, expected {(chi.size, times.size)}")
        bad = ~np.all(np.isfinite(vals), axis=1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EnsembleEvaluationError(i, float(chi[i]), float(delta[i]), "non-finite result")
        return vals
    except EnsembleEvaluationError:
        raise
    except Exception as exc:
        # locate the offending node
        for i in range(chi.size):
            try:
                evaluator(times, chi[i : i + 1], delta[i : i + 1])
            except Exception as node_exc:
                raise EnsembleEvaluationError(i, float(chi[i]), float(delta[i]), repr(node_exc)) from node_exc
        raise


def _reduce(nodes: Nodes, times, evaluator: Evaluator, monte_carlo: bool):
    total = np.zeros(times.size)
    total_sq = np.zeros(times.size)
    chunk = _MC_CHUNK if monte_carlo else nodes.chi.size
    for start in range(0, nodes.chi.size, max(chunk, 1)):
        sl = slice(start, start + chunk)
        vals = _evaluate(evaluator, times, nodes.chi[sl], nodes.delta[sl])
        total += nodes.weights[sl] @ vals
        if monte_carlo:
            total_sq += nodes.weights[sl] @ (vals * vals)
    if not monte_carlo:
        return total, None
    n = nodes.chi.size
    var = np.maximum(total_sq - total * total, 0.0) * n / (n - 1)
    return total, np.sqrt(var / n)


def required_order(
    times,
    spec: EnsembleSpec,
    decay: DecayRates = NO_DECAY,
    tol: float = ORDER_TOL,
    max_points: int = 400,
) -> tuple[int, int]:
    """Smallest per-axis orders on :data:`ORDER_LADDER` that are converged.

    An axis is refined while stepping it one rung up the ladder changes
    the closed-form average by more than ``tol`` anywhere on (a subsample
    of) ``times``. Long traces with a wide detuning spread need far more
    than :data:`DEFAULT_ORDER` nodes on the detuning axis, because each
    member's phase grows quadratically in its detuning offset.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size > max_points:
        t = t[np.linspace(0, t.size - 1, max_points).round().astype(int)]
    evaluator = closed_form_evaluator(decay)
    idx = [0, 0]
    active = [spec.dchi > 0 or spec.correlation != 0, spec.ddelta > 0]

    def mean(ix):
        nodes = quadrature_nodes(spec, (ORDER_LADDER[ix[0]], ORDER_LADDER[ix[1]]))
        return _reduce(nodes, t, evaluator, False)[0]

    current = mean(idx)
    while True:
        moved = False
        for axis in (0, 1):
            if not active[axis] or idx[axis] + 1 >= len(ORDER_LADDER):
                continue
            trial = list(idx)
            trial[axis] += 1
            refined = mean(trial)
            if np.max(np.abs(refined - current)) > tol:
                idx, current, moved = trial, refined, True
        if not moved:
            break
    for axis in (0, 1):
        if active[axis] and idx[axis] + 1 == len(ORDER_LADDER):
            warnings.warn(f"quadrature order capped at {ORDER_LADDER[-1]} on axis {axis}", RuntimeWarning, stacklevel=2)
    return ORDER_LADDER[idx[0]], ORDER_LADDER[idx[1]]


def average_population(
    times,
    spec: EnsembleSpec,
    decay: DecayRates = NO_DECAY,
    evaluator: Evaluator | None = None,
    method: str = "quadrature",
    order=None,
    samples: int = 100_000,
    seed=None,
) -> TimedTrace:
    """Ensemble-averaged logical-|1> population on ``times``.

    ``evaluator(times, chi, delta)`` returns an ``(len(chi), len(times))``
    array of member populations; the default is the exact closed form.
    Monte Carlo results carry per-sample standard errors in ``errors``.
    ``order=None`` picks converged per-axis orders with
    :func:`required_order` for the closed form and uses
    :data:`DEFAULT_ORDER` for a custom evaluator.
    """
    times = np.asarray(times, dtype=float)
    if order is None:
        order = DEFAULT_ORDER if evaluator is not None else required_order(times, spec, decay)
    evaluator = evaluator or closed_form_evaluator(decay)
    if method == "quadrature":
        nodes = quadrature_nodes(spec, order)
    elif method == "montecarlo":
        nodes = monte_carlo_nodes(spec, samples, seed)
    else:
        raise ValueError(f"unknown averaging method {method!r}")
    mean, err = _reduce(nodes, times, evaluator, method == "montecarlo")
    meta = {"method": method, "order": list(axis_orders(order)) if method == "quadrature" else None, "chi0": spec.chi0, "delta0": spec.delta0, "dchi": spec.dchi, "ddelta": spec.ddelta}
    return TimedTrace(times, mean, meta, err)


def synthesize_signal(population: TimedTrace, model: SignalModel, seed=None) -> TimedTrace:
    """``S(t) = s1 * population + s0`` plus white Gaussian noise."""
    values = model.s1 * population.values + model.s0
    if model.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + rng.normal(0.0, model.noise_sigma, size=values.shape)
    meta = dict(population.meta)
    meta.update(s1=model.s1, s0=model.s0, noise_sigma=model.noise_sigma, quantity="signal")
    return TimedTrace(population.times, values, meta)


def sequence_sample_dt(seq: PulseSequence, spec: EnsembleSpec, samples_per_period: float = SAMPLES_PER_PERIOD) -> float:
    """Common trace spacing for all members, from the spec's 4-sigma extremes."""
    nominal = seq.nominal_rabi or spec.chi0
    chi_hi = (spec.chi0 + 4.0 * spec.dchi) / nominal
    peak = 0.0
    for s in seq.segments:
        if s.duration > 0:
            det = abs(spec.delta0 + s.detuning_offset) + 4.0 * spec.ddelta
            peak = max(peak, math.hypot(s.rabi * chi_hi, det))
    return TWO_PI / (samples_per_period * peak) if peak > 0 else math.inf


def average_sequence_population(
    seq: PulseSequence,
    spec: EnsembleSpec,
    decay: DecayRates = NO_DECAY,
    method: str = "quadrature",
    order=DEFAULT_ORDER,
    samples: int = 10_000,
    seed=None,
    initial: BlochState | None = None,
    samples_per_period: float = SAMPLES_PER_PERIOD,
    **prop_kwargs,
) -> TimedTrace:
    """Ensemble average of the population trace of ``seq`` (boundaries sampled)."""
    x0 = (initial or state_from_logical(0)).as_array()
    sample_dt = prop_kwargs.pop("sample_dt", None) or sequence_sample_dt(seq, spec, samples_per_period)
    grid: dict = {}

    def evaluate(_times, chi, delta):
        prop = propagate_members(x0, seq, chi, delta, decay, record=True, sample_dt=sample_dt, **prop_kwargs)
        grid["times"] = prop.times
        st = prop.states
        return st[..., 3] * (1.0 + st[..., 2]) / 2.0

    times = sequence_grid(seq, sample_dt)
    trace = average_population(times, spec, decay, evaluate, method, order, samples, seed)
    if not np.array_equal(grid.get("times", times), times):
        raise RuntimeError("member sample grids disagree")
    trace.meta["label"] = seq.label
    return trace
