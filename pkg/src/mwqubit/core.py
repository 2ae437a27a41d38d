"""Units, Bloch-vector states, rotations and pulse-sequence containers.

Conventions used throughout the package:

* Frequencies are angular (rad/s) internally. External interfaces quote
  cyclic kHz; convert with :func:`khz_to_rad` / :func:`rad_to_khz`.
* The inversion is ``w = Pi_1 - Pi_0``, so logical |0> sits at ``w = -1``.
* A drive with Rabi rate ``chi``, detuning ``delta`` and phase ``phi``
  rotates the Bloch vector right-handedly about
  ``(chi cos phi, chi sin phi, delta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def khz_to_rad(khz: float) -> float:
    """Cyclic kHz to angular rad/s."""
    return TWO_PI * 1e3 * khz


def rad_to_khz(rad_s: float) -> float:
    return rad_s / (TWO_PI * 1e3)


@dataclass(frozen=True)
class BlochState:
    """Pseudospin components plus the surviving two-level population ``p``."""

    u: float
    v: float
    w: float
    p: float = 1.0

    def __post_init__(self):
        vals = (self.u, self.v, self.w, self.p)
        if not all(math.isfinite(x) for x in vals):
            raise ValueError(f"non-finite Bloch state {vals}")
        if math.sqrt(self.u**2 + self.v**2 + self.w**2) > 1.0 + 1e-9:
            raise ValueError("Bloch vector longer than 1")
        if not -1e-12 <= self.p <= 1.0 + 1e-12:
            raise ValueError(f"population p={self.p} outside [0, 1]")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w])

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w, self.p])

    @classmethod
    def from_array(cls, arr) -> "BlochState":
        u, v, w, p = (float(x) for x in arr)
        # RK4 can overshoot the unit sphere at the 1e-13 level
        n = math.sqrt(u * u + v * v + w * w)
        if 1.0 < n <= 1.0 + 1e-9:
            u, v, w = u / n, v / n, w / n
        return cls(u, v, w, min(max(p, 0.0), 1.0))

    @property
    def pi1(self) -> float:
        """Population of logical |1>."""
        return self.p * (1.0 + self.w) / 2.0

    @property
    def pi0(self) -> float:
        return self.p * (1.0 - self.w) / 2.0


def state_from_logical(bit: int) -> BlochState:
    if bit not in (0, 1):
        raise ValueError(f"logical bit must be 0 or 1, got {bit!r}")
    return BlochState(0.0, 0.0, -1.0 if bit == 0 else 1.0, 1.0)


@dataclass(frozen=True)
class PulseSegment:
    """Constant drive over ``duration`` seconds.

    ``detuning_offset`` is added to the detuning of whichever ensemble
    member is being driven.
    """

    duration: float
    rabi: float
    phase: float = 0.0
    detuning_offset: float = 0.0

    def __post_init__(self):
        for name in ("duration", "rabi", "phase", "detuning_offset"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"PulseSegment.{name} must be finite")
        if self.duration < 0:
            raise ValueError("PulseSegment.duration must be >= 0")
        if self.rabi < 0:
            raise ValueError("PulseSegment.rabi must be >= 0")

    @property
    def angle(self) -> float:
        """Nominal (resonant) rotation angle."""
        return self.rabi * self.duration

    def same_phase(self, other: "PulseSegment", tol: float = 1e-12) -> bool:
        d = (self.phase - other.phase) % TWO_PI
        return min(d, TWO_PI - d) <= tol


@dataclass(frozen=True)
class PulseSequence:
    """Ordered segments; ``chi0`` is the nominal Rabi rate the sequence was
    designed for (used to scale segments for off-nominal ensemble members)."""

    segments: tuple[PulseSegment, ...] = ()
    label: str = ""
    chi0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not math.isfinite(self.total_duration):
            raise ValueError("sequence duration is not finite")

    @property
    def total_duration(self) -> float:
        return math.fsum(s.duration for s in self.segments)

    @property
    def nominal_rabi(self) -> float:
        if self.chi0 is not None:
            return self.chi0
        return max((s.rabi for s in self.segments), default=0.0)

    def boundaries(self) -> np.ndarray:
        """Segment start/end times, including 0 and the total duration."""
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    def __len__(self):
        return len(self.segments)

    def __add__(self, other: "PulseSequence") -> "PulseSequence":
        chi0 = self.chi0 if self.chi0 is not None else other.chi0
        label = "+".join(x for x in (self.label, other.label) if x)
        return PulseSequence(self.segments + other.segments, label, chi0)


@dataclass(frozen=True)
class DecayRates:
    """Homogeneous rates in 1/s: ``gamma1 = 3/(4 T1)`` damps the pseudospin
    and ``gamma2`` removes total two-level population. ``T2' = 2 T1``."""

    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma1) and math.isfinite(self.gamma2)):
            raise ValueError("decay rates must be finite")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("decay rates must be >= 0")

    @classmethod
    def from_tau_d(cls, tau_d: float) -> "DecayRates":
        """Rates from an echo decay time, taking gamma1 = gamma2 = 1/(2 tau_d)."""
        if tau_d <= 0:
            raise ValueError("tau_d must be positive")
        g = 1.0 / (2.0 * tau_d)
        return cls(g, g)

    @property
    def t1(self) -> float:
        return math.inf if self.gamma1 == 0 else 3.0 / (4.0 * self.gamma1)

    @property
    def t2_prime(self) -> float:
        return 2.0 * self.t1

    @property
    def is_zero(self) -> bool:
        return self.gamma1 == 0 and self.gamma2 == 0


NO_DECAY = DecayRates()


def rotation_axis(rabi: float, detuning: float, phase: float) -> np.ndarray:
    if rabi < 0:
        raise ValueError("rabi must be >= 0")
    omega = math.hypot(rabi, detuning)
    if omega == 0:
        raise ValueError("no rotation axis defined")
    c = abs(rabi) / omega
    return np.array([c * math.cos(phase), c * math.sin(phase), detuning / omega])


# --- quaternions, scalar-first, shape (..., 4) -----------------------------

def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a0, av = a[..., :1], a[..., 1:]
    b0, bv = b[..., :1], b[..., 1:]
    scalar = a0 * b0 - np.sum(av * bv, axis=-1, keepdims=True)
    vec = a0 * bv + b0 * av + np.cross(av, bv)
    return np.concatenate([scalar, vec], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


@dataclass(frozen=True)
class Rotation:
    """Rotation of the Bloch sphere by ``angle`` about the unit ``axis``.

    The SU(2) propagator is ``cos(angle/2) I - i sin(angle/2) axis.sigma``,
    carried as the unit quaternion :attr:`quaternion`.
    """

    axis: tuple[float, float, float]
    angle: float
    _q: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or not np.all(np.isfinite(axis)) or not math.isfinite(self.angle):
            raise ValueError("rotation axis must be a finite 3-vector and angle finite")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError(f"rotation axis {tuple(axis)} is not a unit vector")
        axis = axis / np.linalg.norm(axis)
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))
        if self._q is None:
            object.__setattr__(self, "_q", quat_from_axis_angle(axis, self.angle))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0), 0.0)

    @classmethod
    def from_quaternion(cls, q) -> "Rotation":
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        s = float(np.linalg.norm(q[1:]))
        if s < 1e-300:
            return cls((1.0, 0.0, 0.0), 0.0, q)
        angle = 2.0 * math.atan2(s, float(q[0]))
        return cls(tuple(q[1:] / s), angle, q)

    @property
    def quaternion(self) -> np.ndarray:
        return self._q.copy()

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self._q)

    @property
    def su2(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array([[w - 1j * z, -y - 1j * x], [y - 1j * x, w + 1j * z]])

    def inverse(self) -> "Rotation":
        return Rotation.from_quaternion(self._q * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, target):
        """Rotate a 3-vector or a :class:`BlochState` (``p`` is untouched)."""
        if isinstance(target, BlochState):
            u, v, w = self.matrix @ target.vector
            return BlochState.from_array([u, v, w, target.p])
        return self.matrix @ np.asarray(target, dtype=float)

    def close_to(self, other: "Rotation", tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.matrix - other.matrix)) <= tol)


def ideal_rotation(axis, angle: float) -> Rotation:
    return Rotation(tuple(np.asarray(axis, dtype=float)), float(angle))


def compose(first: Rotation, second: Rotation) -> Rotation:
    """Rotation that applies ``first`` and then ``second``."""
    return Rotation.from_quaternion(quat_mul(second.quaternion, first.quaternion))


def compose_all(rotations: Sequence[Rotation]) -> Rotation:
    out = Rotation.identity()
    for r in rotations:
        out = compose(out, r)
    return out
