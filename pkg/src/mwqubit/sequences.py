"""Pulse families (plain, rotary echo, CORPSE, SCROFULOUS, BB1) and gate
fidelity functionals, for single members and Gaussian ensembles."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import (
    TWO_PI,
    DecayRates,
    PulseSegment,
    PulseSequence,
    Rotation,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
    state_from_logical,
)
from .dynamics import STEP_FACTOR, propagate_members
from .ensemble import DEFAULT_ORDER, EnsembleSpec, monte_carlo_nodes, quadrature_nodes

#: SCROFULOUS pi: three pi pulses at these phases
SCROFULOUS_PI_PHASES = (math.pi / 3.0, 5.0 * math.pi / 3.0, math.pi / 3.0)
WORKERS_ENV = "MWQUBIT_WORKERS"

STATE_OVERLAP = "state_overlap"
PROPAGATOR_OVERLAP = "propagator_overlap"


@dataclass(frozen=True)
class FidelityMeasure:
    kind: str = STATE_OVERLAP
    initial: int = 0

    def __post_init__(self):
        if self.kind not in (STATE_OVERLAP, PROPAGATOR_OVERLAP):
            raise ValueError(f"unknown fidelity measure {self.kind!r}")
        if self.initial not in (0, 1):
            raise ValueError("initial logical state must be 0 or 1")


STATE = FidelityMeasure(STATE_OVERLAP)
PROPAGATOR = FidelityMeasure(PROPAGATOR_OVERLAP)


@dataclass(frozen=True)
class ErrorPoint:
    """Fractional detuning error ``f = delta/chi0`` and Rabi error ``eps``."""

    f: float = 0.0
    eps: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.f) and math.isfinite(self.eps)):
            raise ValueError("ErrorPoint values must be finite")


def default_target(theta: float = math.pi) -> Rotation:
    return Rotation((1.0, 0.0, 0.0), theta)


# --- constructors -------------------------------------------------------------

def _check_chi0(chi0):
    if not (chi0 > 0 and math.isfinite(chi0)):
        raise ValueError("chi0 must be positive and finite")


def _segments(angles_phases, chi0) -> tuple[PulseSegment, ...]:
    return tuple(PulseSegment(a / chi0, chi0, p) for a, p in angles_phases)


def plain_pulse(theta: float, phase: float = 0.0, chi0: float = 1.0) -> PulseSequence:
    if not theta > 0:
        raise ValueError("theta must be > 0")
    _check_chi0(chi0)
    return PulseSequence(_segments([(theta, phase)], chi0), "plain", chi0)


def rotary_echo(theta: float, phase: float = 0.0, repeats: int = 1, chi0: float = 1.0) -> PulseSequence:
    """``repeats`` pairs of theta-pulses with phases phi, phi + pi."""
    if not theta > 0:
        raise ValueError("theta must be > 0")
    _check_chi0(chi0)
    if int(repeats) != repeats or repeats < 1:
        raise ValueError("repeats must be a positive integer")
    pairs = [(theta, phase), (theta, phase + math.pi)] * int(repeats)
    return PulseSequence(_segments(pairs, chi0), f"rotary{theta / math.pi:g}pi", chi0)


def corpse_angles(theta: float) -> tuple[float, float, float]:
    k = math.asin(math.sin(theta / 2.0) / 2.0)
    return (TWO_PI + theta / 2.0 - k, TWO_PI - 2.0 * k, theta / 2.0 - k)


def corpse(theta: float = math.pi, chi0: float = 1.0) -> PulseSequence:
    """CORPSE theta-rotation about the 1-axis; phases (0, pi, 0)."""
    if not 0 < theta <= math.pi:
        raise ValueError("CORPSE needs 0 < theta <= pi")
    _check_chi0(chi0)
    a1, a2, a3 = corpse_angles(theta)
    return PulseSequence(_segments([(a1, 0.0), (a2, math.pi), (a3, 0.0)], chi0), "corpse", chi0)


def scrofulous_pi(chi0: float = 1.0) -> PulseSequence:
    _check_chi0(chi0)
    return PulseSequence(_segments([(math.pi, p) for p in SCROFULOUS_PI_PHASES], chi0), "scrofulous", chi0)


def bb1_phase(theta: float) -> float:
    return math.acos(-theta / (4.0 * math.pi))


def bb1(theta: float = math.pi, chi0: float = 1.0, correction_first: bool = True) -> PulseSequence:
    """Target theta-pulse plus the (pi, 2pi, pi) correction at (p, 3p, p)."""
    if not 0 < theta <= math.pi:
        raise ValueError("BB1 needs 0 < theta <= pi")
    _check_chi0(chi0)
    p = bb1_phase(theta)
    correction = [(math.pi, p), (TWO_PI, 3.0 * p), (math.pi, p)]
    main = [(theta, 0.0)]
    parts = correction + main if correction_first else main + correction
    return PulseSequence(_segments(parts, chi0), "bb1", chi0)


FAMILIES = ("plain", "corpse", "scrofulous", "bb1", "rotary")


def build_sequence(family: str, theta: float = math.pi, chi0: float = 1.0, repeats: int = 1) -> PulseSequence:
    if family == "plain":
        return plain_pulse(theta, 0.0, chi0)
    if family == "corpse":
        return corpse(theta, chi0)
    if family == "scrofulous":
        if not math.isclose(theta, math.pi):
            raise ValueError("only the SCROFULOUS pi-pulse is provided")
        return scrofulous_pi(chi0)
    if family == "bb1":
        return bb1(theta, chi0)
    if family == "rotary":
        return rotary_echo(theta, 0.0, repeats, chi0)
    raise ValueError(f"unknown pulse family {family!r}; choose from {FAMILIES}")


# --- fidelities -----------------------------------------------------------------

def sequence_quaternions(seq: PulseSequence, chi, delta) -> np.ndarray:
    """Net coherent rotation for each member, as quaternions of shape (N, 4)."""
    chi = np.atleast_1d(np.asarray(chi, dtype=float))
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    chi, delta = np.broadcast_arrays(chi, delta)
    nominal = seq.nominal_rabi
    scale = chi / nominal if nominal > 0 else np.ones_like(chi)
    q = np.zeros(chi.shape + (4,))
    q[..., 0] = 1.0
    for seg in seq.segments:
        c = seg.rabi * scale
        d = delta + seg.detuning_offset
        omega = np.hypot(c, d)
        safe = np.where(omega > 0, omega, 1.0)
        axis = np.stack([c * math.cos(seg.phase) / safe, c * math.sin(seg.phase) / safe, d / safe], axis=-1)
        axis[omega == 0] = (1.0, 0.0, 0.0)
        q = quat_mul(quat_from_axis_angle(axis, omega * seg.duration), q)
    return q


def sequence_rotation(seq: PulseSequence, chi: float | None = None, delta: float = 0.0) -> Rotation:
    chi = seq.nominal_rabi if chi is None else chi
    return Rotation.from_quaternion(sequence_quaternions(seq, chi, delta)[0])


def _member_fidelities(seq, chi, delta, measure: FidelityMeasure, target: Rotation, decay, step_factor) -> np.ndarray:
    coherent = decay is None or decay.is_zero
    if measure.kind == PROPAGATOR_OVERLAP:
        if not coherent:
            raise ValueError("propagator fidelity undefined with dissipation")
        q = sequence_quaternions(seq, chi, delta)
        return np.abs(q @ target.quaternion)
    r0 = state_from_logical(measure.initial).vector
    r_target = target.matrix @ r0
    if coherent:
        r = quat_to_matrix(sequence_quaternions(seq, chi, delta)) @ r0
        return np.clip((1.0 + r @ r_target) / 2.0, 0.0, 1.0)
    x0 = np.append(r0, 1.0)
    final = propagate_members(x0, seq, chi, delta, decay, step_factor=step_factor).final
    return np.clip(final[:, 3] * (1.0 + final[:, :3] @ r_target) / 2.0, 0.0, 1.0)


def sequence_fidelity(
    seq: PulseSequence,
    error: ErrorPoint = ErrorPoint(),
    measure: FidelityMeasure = STATE,
    target: Rotation | None = None,
    decay: DecayRates | None = None,
    step_factor: float = STEP_FACTOR,
) -> float:
    """Fidelity of ``seq`` for one member with the given fractional errors.

    Without decay the net rotation is composed exactly. With decay the
    Bloch equations are integrated and only the state-overlap measure
    (on the final populations) is available.
    """
    target = target or default_target()
    chi0 = seq.nominal_rabi
    chi = chi0 * (1.0 + error.eps)
    delta = error.f * chi0
    return float(_member_fidelities(seq, [chi], [delta], measure, target, decay, step_factor)[0])


def ensemble_gate_fidelity(
    seq: PulseSequence,
    spec: EnsembleSpec,
    decay: DecayRates | None = None,
    measure: FidelityMeasure = STATE,
    target: Rotation | None = None,
    order: int = DEFAULT_ORDER,
    method: str = "quadrature",
    samples: int = 10_000,
    seed=None,
    step_factor: float = STEP_FACTOR,
) -> float:
    """Gaussian-weighted average of the member fidelity over (chi, delta)."""
    target = target or default_target()
    if method == "quadrature":
        nodes = quadrature_nodes(spec, order)
    elif method == "montecarlo":
        nodes = monte_carlo_nodes(spec, samples, seed)
    else:
        raise ValueError(f"unknown averaging method {method!r}")
    fid = _member_fidelities(seq, nodes.chi, nodes.delta, measure, target, decay, step_factor)
    return float(min(max(nodes.weights @ fid, 0.0), 1.0))


@dataclass
class ScanTable:
    family: str
    axis: str
    errors: np.ndarray
    fidelities: np.ndarray

    def rows(self):
        return list(zip(self.errors.tolist(), self.fidelities.tolist()))

    def window_width(self, threshold: float) -> float:
        """Width of the contiguous region around zero error with F > threshold.

        Edges are linearly interpolated between grid points.
        """
        x, y = self.errors, self.fidelities
        order = np.argsort(x)
        x, y = x[order], y[order]
        i0 = int(np.argmin(np.abs(x)))
        if y[i0] <= threshold:
            return 0.0

        def edge(step):
            i = i0
            while 0 <= i + step < x.size and y[i + step] > threshold:
                i += step
            j = i + step
            if not 0 <= j < x.size:
                return x[i]
            return x[i] + (x[j] - x[i]) * (y[i] - threshold) / (y[i] - y[j])

        return float(edge(1) - edge(-1))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def robustness_scan(
    family,
    axis: str,
    points: Iterable,
    spec: EnsembleSpec | None,
    decay: DecayRates | None = None,
    measure: FidelityMeasure = STATE,
    theta: float = math.pi,
    chi0: float | None = None,
    order: int = DEFAULT_ORDER,
    step_factor: float = STEP_FACTOR,
) -> ScanTable:
    """Fidelity versus a deliberate error added to the ensemble mean.

    ``points`` are :class:`ErrorPoint` objects or plain numbers read along
    ``axis`` ("detuning": f, "angle": eps). Without ``spec`` a single
    member at ``chi0`` is used.
    """
    if axis not in ("detuning", "angle"):
        raise ValueError("axis must be 'detuning' or 'angle'")
    pts = []
    for p in points:
        if isinstance(p, ErrorPoint):
            pts.append(p)
        else:
            p = float(p)
            pts.append(ErrorPoint(f=p) if axis == "detuning" else ErrorPoint(eps=p))
    if not pts:
        raise ValueError("robustness scan needs at least one error point")
    base_chi = spec.chi0 if spec is not None else (chi0 or 1.0)
    seq = family if isinstance(family, PulseSequence) else build_sequence(family, theta, base_chi)
    name = seq.label if isinstance(family, PulseSequence) else family
    target = default_target(theta)

    def run(p: ErrorPoint) -> float:
        if spec is None:
            return sequence_fidelity(seq, p, measure, target, decay, step_factor)
        return ensemble_gate_fidelity(seq, spec.shifted(p.f, p.eps), decay, measure, target, order, step_factor=step_factor)

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fids = list(pool.map(run, pts))
    else:
        fids = [run(p) for p in pts]
    errs = np.array([p.f if axis == "detuning" else p.eps for p in pts])
    return ScanTable(name, axis, errs, np.array(fids))


@dataclass(frozen=True)
class PresetErrorResult:
    """Fidelity averaged over Gaussian preset errors of the ensemble means.

    ``detuning_only`` averages over the mean-detuning errors alone with the
    gate timed for the actual chi0; ``timing_reduction`` is the further
    loss once chi0 is also off target, and ``total_reduction`` compares
    with the error-free ensemble.
    """

    error_free: float
    detuning_only: float
    mean: float

    @property
    def timing_reduction(self) -> float:
        return self.detuning_only - self.mean

    @property
    def total_reduction(self) -> float:
        return self.error_free - self.mean


def preset_error_fidelity(
    seq: PulseSequence,
    spec: EnsembleSpec,
    decay: DecayRates | None,
    chi_rms: float = 0.01,
    delta_rms: float = 0.048,
    outer_order: int = 7,
    order: int = DEFAULT_ORDER,
) -> PresetErrorResult:
    """Average the ensemble gate fidelity over preset errors of the means.

    ``chi_rms`` is relative to chi0, ``delta_rms`` is the rms of
    delta0/chi0; both are integrated with ``outer_order`` Gauss-Hermite
    nodes per axis. The sequence keeps its nominal timing throughout.
    """
    x, w = np.polynomial.hermite_e.hermegauss(outer_order)
    w = w / w.sum()

    def axis(rms):
        return (x * rms, w) if rms > 0 else (np.zeros(1), np.ones(1))

    eps_nodes, eps_w = axis(chi_rms)
    f_nodes, f_w = axis(delta_rms)
    grid = np.array(
        [[ensemble_gate_fidelity(seq, spec.shifted(f, e), decay, STATE, order=order) for f in f_nodes] for e in eps_nodes]
    )
    base = ensemble_gate_fidelity(seq, spec, decay, STATE, order=order)
    det_only = float(f_w @ [ensemble_gate_fidelity(seq, spec.shifted(f, 0.0), decay, STATE, order=order) for f in f_nodes])
    return PresetErrorResult(base, det_only, float(eps_w @ grid @ f_w))
