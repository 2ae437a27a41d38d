"""Time evolution of single ensemble members.

Closed-form Torrey solutions for driven, damped Rabi oscillation, a
fixed-step RK4 integrator of the dissipative Bloch equations, and a
Hamiltonian model for leakage out of the qubit pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import TWO_PI, BlochState, DecayRates, PulseSegment, PulseSequence, NO_DECAY

#: default RK4 steps per generalized Rabi period
STEP_FACTOR = 2000
#: default trace samples per (shortest) Rabi period
SAMPLES_PER_PERIOD = 200


@dataclass(frozen=True)
class DriveParams:
    rabi: float
    detuning: float = 0.0

    @property
    def generalized_rabi(self) -> float:
        return math.hypot(self.rabi, self.detuning)


@dataclass(frozen=True)
class LeakageChannel:
    """Off-resonant coupling from logical |0> to a level outside the qubit."""

    rabi: float
    detuning: float
    label: str = ""


@dataclass
class TimedTrace:
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    #: optional per-sample standard errors (Monte Carlo averages)
    errors: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if self.times.size and self.times[0] < 0:
            raise ValueError("times must start at t >= 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def value_at(self, t: float, atol: float = 1e-12) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol * max(1.0, abs(t)):
            raise KeyError(f"t={t} is not a sample of this trace")
        return float(self.values[i])

    def to_csv(self, path) -> None:
        from .io import write_trace_csv

        write_trace_csv(path, self)

    @classmethod
    def from_csv(cls, path) -> "TimedTrace":
        from .io import read_trace_csv

        return read_trace_csv(path)


def _check_omega(chi, delta):
    omega2 = np.asarray(chi, dtype=float) ** 2 + np.asarray(delta, dtype=float) ** 2
    if np.any(omega2 == 0):
        raise ValueError("generalized Rabi frequency is zero (chi = delta = 0)")
    return omega2


def torrey_inversion(t, drive: DriveParams, gamma1: float):
    """Strong-driving Torrey inversion, as conventionally printed.

    Returns ``-(D/W)^2 e^{-2 g t/3} + (X/W)^2 cos(W t) e^{-g t} + 2 (D/W)^2``.
    This expression starts at +1; the package's inversion convention
    (``w = Pi_1 - Pi_0``, |0> at ``w = -1``) is its negative, up to the
    relaxation of the detuned offset.
    """
    omega2 = _check_omega(drive.rabi, drive.detuning)
    t = np.asarray(t, dtype=float)
    omega = math.sqrt(omega2)
    d2 = drive.detuning**2 / omega2
    c2 = drive.rabi**2 / omega2
    out = -d2 * np.exp(-2.0 * gamma1 * t / 3.0) + c2 * np.cos(omega * t) * np.exp(-gamma1 * t) + 2.0 * d2
    return out if out.ndim else float(out)


def pi1_closed_form(t, chi, delta, gamma1: float = 0.0, gamma2: float = 0.0, exact: bool = True):
    """Broadcasting kernel behind :func:`torrey_population`."""
    omega2 = _check_omega(chi, delta)
    t = np.asarray(t, dtype=float)
    omega = np.sqrt(omega2)
    d2 = np.asarray(delta, dtype=float) ** 2 / omega2
    c2 = np.asarray(chi, dtype=float) ** 2 / omega2
    osc = 0.5 * c2 * np.cos(omega * t) * np.exp(-(gamma1 + gamma2) * t)
    if exact:
        return (
            0.5 * (1.0 - 2.0 * d2) * np.exp(-gamma2 * t)
            - osc
            + 0.5 * d2 * np.exp(-(2.0 * gamma1 / 3.0 + gamma2) * t)
        )
    return 0.5 * np.exp(-gamma2 * t) - osc


def torrey_population(t, drive: DriveParams, decay: DecayRates = NO_DECAY, exact: bool = True):
    """Logical-|1> population of a member started in |0>.

    ``exact=True`` is the three-term form; ``exact=False`` drops the
    detuning-dependent mean terms (error of order (D/W)^2).
    """
    out = pi1_closed_form(t, drive.rabi, drive.detuning, decay.gamma1, decay.gamma2, exact)
    if np.any(out < -1e-9) or np.any(out > 1.0 + 1e-9):
        raise ValueError("closed-form population left [0, 1]; parameters outside model validity")
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


# --- Bloch-equation integrator ---------------------------------------------

def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def bloch_generator(chi, delta, phase: float, decay: DecayRates) -> np.ndarray:
    """Matrix ``A`` with d(u, v, w, p)/dt = A (u, v, w, p).

    Broadcasts over ``chi`` and ``delta``; relaxation is towards w = 0
    with 1/T1 = 4 g1/3 and 1/T2' = 2 g1/3.
    """
    chi, delta = np.broadcast_arrays(np.asarray(chi, float), np.asarray(delta, float))
    ox, oy, oz = chi * math.cos(phase), chi * math.sin(phase), delta
    g_long = 4.0 * decay.gamma1 / 3.0
    g_trans = 2.0 * decay.gamma1 / 3.0
    a = np.zeros(chi.shape + (4, 4))
    a[..., 0, 0] = -g_trans
    a[..., 0, 1] = -oz
    a[..., 0, 2] = oy
    a[..., 1, 0] = oz
    a[..., 1, 1] = -g_trans
    a[..., 1, 2] = -ox
    a[..., 2, 0] = -oy
    a[..., 2, 1] = ox
    a[..., 2, 2] = -g_long
    a[..., 3, 3] = -decay.gamma2
    return a


def rk4_step_operator(a: np.ndarray, h: float) -> np.ndarray:
    """One RK4 step of the linear system ``x' = a x`` as a matrix."""
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    return rk4_step(lambda x: a @ x, eye, h)


def _segment_rates(seg: PulseSegment, scale, delta):
    chi = seg.rabi * np.asarray(scale, dtype=float)
    det = np.asarray(delta, dtype=float) + seg.detuning_offset
    return chi, det


def _max_rate(chi, det, decay: DecayRates) -> float:
    return float(max(np.max(np.hypot(chi, det)), 4.0 * decay.gamma1 / 3.0, decay.gamma2))


def _samples_in(duration: float, sample_dt: float) -> int:
    return max(1, math.ceil(duration / sample_dt - 1e-9))


def sequence_grid(seq: PulseSequence, sample_dt: float) -> np.ndarray:
    """Sample times used when recording ``seq`` at spacing ``sample_dt``."""
    times = [0.0]
    t0 = 0.0
    for seg in seq.segments:
        if seg.duration == 0:
            continue
        m = _samples_in(seg.duration, sample_dt)
        times.extend(t0 + seg.duration * j / m for j in range(1, m))
        t0 += seg.duration
        times.append(t0)
    return np.array(times)


class Propagation(NamedTuple):
    final: np.ndarray  # (N, 4)
    times: np.ndarray | None  # (S,)
    states: np.ndarray | None  # (N, S, 4)


def propagate_members(
    x0,
    seq: PulseSequence,
    chi,
    delta,
    decay: DecayRates = NO_DECAY,
    *,
    dt: float | None = None,
    step_factor: float = STEP_FACTOR,
    record: bool = False,
    samples_per_period: float = SAMPLES_PER_PERIOD,
    sample_dt: float | None = None,
) -> Propagation:
    """Evolve a batch of members through ``seq`` with fixed-step RK4.

    Member ``i`` sees Rabi rate ``segment.rabi * chi[i] / seq.nominal_rabi``
    and detuning ``delta[i] + segment.detuning_offset``. When ``record`` is
    set, all members are sampled on one grid that contains every segment
    boundary.
    """
    chi = np.atleast_1d(np.asarray(chi, dtype=float))
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    chi, delta = np.broadcast_arrays(chi, delta)
    if not (np.all(np.isfinite(chi)) and np.all(np.isfinite(delta))):
        raise ValueError("member parameters must be finite")
    x = np.broadcast_to(np.asarray(x0, dtype=float), chi.shape + (4,)).copy()
    nominal = seq.nominal_rabi
    scale = chi / nominal if nominal > 0 else np.ones_like(chi)

    if record and sample_dt is None:
        peak = max(
            (_max_rate(*_segment_rates(s, scale, delta), NO_DECAY) for s in seq.segments if s.duration > 0),
            default=0.0,
        )
        sample_dt = TWO_PI / (samples_per_period * peak) if peak > 0 else math.inf

    states = [x.copy()]
    for seg in seq.segments:
        if seg.duration == 0:
            continue
        seg_chi, seg_det = _segment_rates(seg, scale, delta)
        rate = _max_rate(seg_chi, seg_det, decay)
        hmax = TWO_PI / (step_factor * rate) if rate > 0 else seg.duration
        if dt is not None:
            hmax = min(hmax, dt) if dt > 0 else hmax
        m = _samples_in(seg.duration, sample_dt) if record else 1
        ds = seg.duration / m
        k = max(1, math.ceil(ds / hmax - 1e-9))
        step = rk4_step_operator(bloch_generator(seg_chi, seg_det, seg.phase, decay), ds / k)
        block = np.linalg.matrix_power(step, k)
        for j in range(1, m + 1):
            x = np.einsum("nij,nj->ni", block, x)
            if record:
                states.append(x)
    if not record:
        return Propagation(x, None, None)
    return Propagation(x, sequence_grid(seq, sample_dt), np.stack(states, axis=1))


def _state_array(state: BlochState) -> np.ndarray:
    return state.as_array()


def evolve_bloch(
    state: BlochState,
    segment: PulseSegment,
    member_detuning: float = 0.0,
    decay: DecayRates = NO_DECAY,
    *,
    dt: float | None = None,
    step_factor: float = STEP_FACTOR,
) -> BlochState:
    """Integrate one constant segment for a member at the segment's Rabi rate.

    For a recorded trajectory use :func:`evolve_sequence`.
    """
    vals = (segment.duration, segment.rabi, segment.phase, member_detuning, decay.gamma1, decay.gamma2)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite input to evolve_bloch")
    seq = PulseSequence((segment,), chi0=segment.rabi if segment.rabi > 0 else None)
    chi = segment.rabi if segment.rabi > 0 else 0.0
    prop = propagate_members(_state_array(state), seq, [chi], [member_detuning], decay, dt=dt, step_factor=step_factor)
    return BlochState.from_array(prop.final[0])


class Evolution(NamedTuple):
    state: BlochState
    trace: TimedTrace  # logical-|1> population
    trajectory: np.ndarray  # (S, 4) rows of (u, v, w, p)


def evolve_sequence(
    state: BlochState,
    seq: PulseSequence,
    member: tuple[float, float] | None = None,
    decay: DecayRates = NO_DECAY,
    **kwargs,
) -> Evolution:
    """Chain segments for one member ``(chi, delta)``.

    ``chi`` defaults to the sequence's nominal Rabi rate and ``delta`` to 0.
    Keyword arguments are passed to :func:`propagate_members`.
    """
    if member is None:
        member = (seq.nominal_rabi, 0.0)
    chi, delta = member
    kwargs.setdefault("record", True)
    prop = propagate_members(_state_array(state), seq, [chi], [delta], decay, **kwargs)
    final = BlochState.from_array(prop.final[0])
    if prop.times is None:
        traj = prop.final[0][None, :]
        times = np.array([seq.total_duration])
    else:
        traj, times = prop.states[0], prop.times
    pi1 = traj[:, 3] * (1.0 + traj[:, 2]) / 2.0
    trace = TimedTrace(times, pi1, {"label": seq.label, "chi": chi, "delta": delta})
    return Evolution(final, trace, traj)


# --- leakage ----------------------------------------------------------------

@dataclass
class LeakageResult:
    times: np.ndarray
    combined: np.ndarray
    per_channel: np.ndarray  # (S, n_channels)
    qubit_pi1: np.ndarray

    @property
    def max_combined(self) -> float:
        return float(self.combined.max()) if self.combined.size else 0.0

    @property
    def final_combined(self) -> float:
        return float(self.combined[-1]) if self.combined.size else 0.0

    def trace(self) -> TimedTrace:
        return TimedTrace(self.times, self.combined, {"quantity": "combined_leakage"})


def leakage_populations(
    qubit_rabi: float,
    gate_duration: float,
    channels: Sequence[LeakageChannel],
    samples: int = 2001,
) -> LeakageResult:
    """Populations leaked from |0> while the qubit is driven on resonance.

    Rotating-frame star model: |0> couples to |1> at ``qubit_rabi`` with no
    detuning and to each channel level at its own Rabi rate and detuning.
    No dissipation.
    """
    if not gate_duration > 0:
        raise ValueError("gate duration must be positive")
    times = np.linspace(0.0, gate_duration, samples)
    n = 2 + len(channels)
    h = np.zeros((n, n))
    h[0, 1] = h[1, 0] = qubit_rabi / 2.0
    for i, ch in enumerate(channels, start=2):
        h[0, i] = h[i, 0] = ch.rabi / 2.0
        h[i, i] = -ch.detuning
    energies, vecs = np.linalg.eigh(h)
    c0 = vecs.conj().T[:, 0]  # V^dagger |0>
    amps = np.exp(-1j * np.outer(times, energies)) * c0  # (S, n)
    psi = amps @ vecs.T
    pops = np.abs(psi) ** 2
    per = pops[:, 2:]
    return LeakageResult(times, per.sum(axis=1), per, pops[:, 1])
