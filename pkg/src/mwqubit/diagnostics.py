"""Fitting polarimetry traces and turning fits into gate-fidelity estimates.

Rabi traces are fitted with six free parameters (chi0, delta0, dchi,
ddelta, s1, s0); homogeneous decay rates are never fitted there and must
come from a rotary-echo fit. Fits use uniform weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import TWO_PI, DecayRates, NO_DECAY
from .dynamics import TimedTrace, pi1_closed_form
from .ensemble import DEFAULT_ORDER, EnsembleSpec, average_population, axis_orders, gauss_hermite, required_order
from .lm import LMResult, central_jacobian, levenberg_marquardt

PARAM_NAMES = ("chi0", "delta0", "dchi", "ddelta", "s1", "s0")
#: node block size for model evaluation (bounds memory on long traces)
_BLOCK = 64


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    chi0: float
    delta0: float
    dchi: float
    ddelta: float
    s1: float
    s0: float
    residual_rms: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    message: str = ""
    gradient_cosine: float = 0.0
    history: list = field(default_factory=list, repr=False)
    #: quadrature orders (n_chi, n_delta) used by the model
    order: tuple = (DEFAULT_ORDER, DEFAULT_ORDER)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.chi0, self.delta0, self.dchi, self.ddelta, self.s1, self.s0])

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def spec(self) -> EnsembleSpec:
        return EnsembleSpec(self.chi0, self.delta0, self.dchi, self.ddelta)

    def to_json(self) -> dict:
        """Report in cyclic Hz and chi0-relative spreads, covariance included."""
        c = self.chi0
        out = np.array([c / TWO_PI, self.delta0 / TWO_PI, self.dchi / c, self.ddelta / c, self.s1, self.s0])
        t = np.zeros((6, 6))
        t[0, 0] = t[1, 1] = 1.0 / TWO_PI
        t[2, 0], t[2, 2] = -self.dchi / c**2, 1.0 / c
        t[3, 0], t[3, 3] = -self.ddelta / c**2, 1.0 / c
        t[4, 4] = t[5, 5] = 1.0
        cov = t @ self.covariance @ t.T
        keys = ("chi0_hz_cyclic", "delta0_hz_cyclic", "dchi_rel", "ddelta_rel", "s1", "s0")
        doc = {k: float(v) for k, v in zip(keys, out)}
        doc.update(
            residual_rms=float(self.residual_rms),
            covariance=[[float(x) for x in row] for row in cov],
            converged=bool(self.converged),
            iterations=int(self.iterations),
            quadrature_order=list(self.order),
        )
        return doc


@dataclass
class RotaryFit:
    gamma1: float
    gamma2: float
    chi0: float
    s1: float
    s0: float
    residual_rms: float
    converged: bool
    iterations: int
    tied: bool = True

    @property
    def decay(self) -> DecayRates:
        return DecayRates(self.gamma1, self.gamma2)

    @property
    def tau_d(self) -> float:
        """Decay time of the oscillating part, 1/(gamma1 + gamma2)."""
        return 1.0 / (self.gamma1 + self.gamma2)

    @property
    def tau_mean(self) -> float:
        """Decay time of the constant part, 1/gamma2."""
        return 1.0 / self.gamma2 if self.gamma2 > 0 else math.inf

    def to_json(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "chi0_hz_cyclic": self.chi0 / TWO_PI,
            "s1": self.s1,
            "s0": self.s0,
            "tau_d_s": self.tau_d,
            "residual_rms": self.residual_rms,
            "converged": self.converged,
            "iterations": self.iterations,
            "tied": self.tied,
        }


@dataclass(frozen=True)
class CoherenceFit:
    a: float
    b: float

    @property
    def tau_asymptote(self) -> float:
        return 1.0 / self.b if self.b > 0 else math.inf

    @property
    def saturated(self) -> bool:
        return self.b > 0

    def tau_d(self, tau_s):
        return 1.0 / (self.a / np.asarray(tau_s, dtype=float) + self.b)


# --- Rabi model ---------------------------------------------------------------

def _spec_of(params) -> EnsembleSpec:
    chi0, delta0, dchi, ddelta = (float(p) for p in params[:4])
    return EnsembleSpec(chi0, delta0, abs(dchi), abs(ddelta))


def rabi_model(times, params, decay: DecayRates = NO_DECAY, order=DEFAULT_ORDER, jacobian: bool = False):
    """``s1 * <Pi_1>(t) + s0`` with analytic derivatives in the natural
    parameters (chi0, delta0, dchi, ddelta, s1, s0) when requested.

    ``order`` is an int or ``(n_chi, n_delta)``; ``None`` chooses converged
    orders for these parameters.
    """
    chi0, delta0, dchi, ddelta, s1, s0 = (float(p) for p in params)
    t = np.asarray(times, dtype=float)
    if order is None:
        order = required_order(t, _spec_of(params), decay)
    n1, n2 = axis_orders(order)
    xc, wc = gauss_hermite(n1) if dchi != 0 else (np.zeros(1), np.ones(1))
    xd, wd = gauss_hermite(n2) if ddelta != 0 else (np.zeros(1), np.ones(1))
    x1, x2 = (a.ravel() for a in np.meshgrid(xc, xd, indexing="ij"))
    wn = np.outer(wc, wd).ravel()
    chi = chi0 + dchi * x1
    dlt = delta0 + ddelta * x2
    g1, g2 = decay.gamma1, decay.gamma2
    e2 = np.exp(-g2 * t)
    eo = np.exp(-(g1 + g2) * t)
    e3 = np.exp(-(2.0 * g1 / 3.0 + g2) * t)

    pop = np.zeros_like(t)
    dchi_sum = np.zeros((4, t.size)) if jacobian else None
    for start in range(0, wn.size, _BLOCK):
        sl = slice(start, start + _BLOCK)
        c, d, ww = chi[sl, None], dlt[sl, None], wn[sl]
        om2 = c * c + d * d
        om = np.sqrt(om2)
        c2 = c * c / om2
        d2 = d * d / om2
        phase = om * t
        cos = np.cos(phase)
        pop += ww @ (0.5 * (1.0 - 2.0 * d2) * e2 - 0.5 * c2 * cos * eo + 0.5 * d2 * e3)
        if jacobian:
            sin = np.sin(phase)
            om4 = om2 * om2
            dd2_dc = -2.0 * c * d * d / om4
            dd2_dd = 2.0 * d * c * c / om4
            # d/dx of Pi_1 given d(d2)/dx and d(Omega)/dx, with dc2 = -dd2
            def deriv(dd2, dom):
                return -dd2 * e2 + 0.5 * dd2 * cos * eo + 0.5 * c2 * sin * t * dom * eo + 0.5 * dd2 * e3

            p_c = deriv(dd2_dc, c / om)
            p_d = deriv(dd2_dd, d / om)
            dchi_sum[0] += ww @ p_c
            dchi_sum[1] += ww @ p_d
            dchi_sum[2] += (ww * x1[sl]) @ p_c
            dchi_sum[3] += (ww * x2[sl]) @ p_d
    signal = s1 * pop + s0
    if not jacobian:
        return signal
    jac = np.empty((t.size, 6))
    jac[:, :4] = s1 * dchi_sum.T
    jac[:, 4] = pop
    jac[:, 5] = 1.0
    return signal, jac


# --- initial guesses ------------------------------------------------------------

def _uniform(trace: TimedTrace):
    t, y = trace.times, trace.values
    dt = np.diff(t)
    if np.allclose(dt, dt[0], rtol=1e-6):
        return t, y
    grid = np.linspace(t[0], t[-1], t.size)
    return grid, np.interp(grid, t, y)


def dominant_frequency(trace: TimedTrace) -> float:
    """Angular frequency of the strongest spectral line (zero-padded FFT
    with parabolic peak interpolation)."""
    t, y = _uniform(trace)
    y = (y - y.mean()) * np.hanning(y.size)
    n = 1 << int(math.ceil(math.log2(y.size * 8)))
    spec = np.abs(np.fft.rfft(y, n))
    spec[0] = 0.0
    k = int(np.argmax(spec))
    if 0 < k < spec.size - 1:
        a, b, c = np.log(spec[k - 1 : k + 2] + 1e-300)
        denom = a - 2 * b + c
        k = k + (0.5 * (a - c) / denom if denom != 0 else 0.0)
    return TWO_PI * k / (n * (t[1] - t[0]))


def _envelope(trace: TimedTrace, chi0: float):
    """Half peak-to-peak amplitude per Rabi period."""
    t, y = trace.times, trace.values
    period = TWO_PI / chi0
    edges = np.arange(t[0], t[-1] + period, period)
    centers, amps = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (t >= lo) & (t < hi)
        if m.sum() >= 4:
            centers.append(0.5 * (lo + hi))
            amps.append(0.5 * (y[m].max() - y[m].min()))
    return np.array(centers), np.array(amps)


def _linear_scale(times, y, core_params, decay, order):
    """Best (s1, s0) for fixed nonlinear parameters."""
    pop = rabi_model(times, (*core_params, 1.0, 0.0), decay, order)
    a = np.column_stack([pop, np.ones_like(pop)])
    (s1, s0), *_ = np.linalg.lstsq(a, y, rcond=None)
    r = a @ (s1, s0) - y
    return float(s1), float(s0), float(r @ r)


def initial_guess(trace: TimedTrace, decay: DecayRates = NO_DECAY, order: int = 11) -> np.ndarray:
    """Starting point from the trace: FFT peak for chi0, envelope decay for
    the spreads, linear least squares for (s1, s0) on a small candidate set."""
    t, y = trace.times, trace.values
    if np.ptp(y) == 0:
        raise FitError("trace is constant; nothing to fit")
    chi0 = dominant_frequency(trace)
    centers, amps = _envelope(trace, chi0)
    homog = np.exp(-(decay.gamma1 + decay.gamma2) * centers)
    env = amps / homog
    env = env / env[:3].mean() if env.size >= 3 else env
    below = np.flatnonzero(env < math.exp(-0.5))
    t_e = centers[below[0]] if below.size else 2.0 * (t[-1] - t[0])
    best = None
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        # frac of the envelope decay attributed to the Rabi spread, rest to detuning
        dchi = max(frac, 0.05) / t_e
        ddelta = math.sqrt(max(1.0 - frac, 0.05) * chi0 / t_e)
        core = (chi0, 0.3 * ddelta, dchi, ddelta)
        s1, s0, cost = _linear_scale(t, y, core, decay, order)
        if best is None or cost < best[0]:
            best = (cost, core, s1, s0)
    _, core, s1, s0 = best
    return np.array([*core, s1, s0])


# --- fits -----------------------------------------------------------------------

def fit_rabi_trace(
    trace: TimedTrace,
    decay: DecayRates = NO_DECAY,
    guess=None,
    order=None,
    jacobian: str = "analytic",
    max_iter: int = 500,
) -> FitResult:
    """Six-parameter least-squares fit of an ensemble Rabi signal.

    ``decay`` is held fixed. Spreads are kept non-negative by fitting their
    square roots. ``guess`` may be a :class:`FitResult` or a 6-sequence of
    natural parameters. The sign of delta0 is not identifiable; the
    magnitude is reported. With ``order=None`` the quadrature orders are
    chosen for the starting point and re-checked at the solution; the fit
    is repeated once if they were too low.
    """
    t, y = trace.times, trace.values
    if t.size < 8:
        raise FitError("trace too short to fit")
    if np.ptp(y) == 0:
        raise FitError("trace is constant; nothing to fit")
    if guess is None:
        p0 = initial_guess(trace, decay)
    elif isinstance(guess, FitResult):
        p0 = guess.params
    else:
        p0 = np.asarray(guess, dtype=float)
    if order is None:
        orders = required_order(t, _spec_of(p0), decay)
        fit = fit_rabi_trace(trace, decay, p0, orders, jacobian, max_iter)
        needed = required_order(t, fit.spec, decay)
        if any(n > m for n, m in zip(needed, orders)):
            fit = fit_rabi_trace(trace, decay, fit.params, tuple(map(max, needed, orders)), jacobian, max_iter)
        return fit
    c = float(p0[0])
    a = float(abs(p0[4])) or float(np.ptp(y))

    def to_natural(z):
        return np.array([z[0] * c, z[1] * c, z[2] ** 2 * c, z[3] ** 2 * c, z[4] * a, z[5] * a])

    def residual(z):
        return (rabi_model(t, to_natural(z), decay, order) - y) / a

    def jac_analytic(z):
        _, jn = rabi_model(t, to_natural(z), decay, order, jacobian=True)
        chain = np.array([c, c, 2.0 * z[2] * c, 2.0 * z[3] * c, a, a])
        return jn * chain / a

    z0 = np.array([p0[0] / c, p0[1] / c, math.sqrt(max(p0[2], 0.0) / c), math.sqrt(max(p0[3], 0.0) / c), p0[4] / a, p0[5] / a])
    # spreads of exactly zero have zero gradient in the square-root form
    z0[2:4] = np.maximum(z0[2:4], 1e-4)
    if jacobian == "analytic":
        jac = jac_analytic
    elif jacobian == "fd":
        jac = None
    else:
        raise ValueError("jacobian must be 'analytic' or 'fd'")
    res = levenberg_marquardt(residual, z0, jac, max_iter=max_iter)
    nat = to_natural(res.x)
    nat[1] = abs(nat[1])
    return _finish(t, y, nat, res, decay, order)


def _finish(t, y, nat, res: LMResult, decay, order) -> FitResult:
    model, jn = rabi_model(t, nat, decay, order, jacobian=True)
    r = model - y
    dof = max(t.size - 6, 1)
    s2 = float(r @ r) / dof
    cov = s2 * np.linalg.pinv(jn.T @ jn, hermitian=True)
    cov = 0.5 * (cov + cov.T)
    return FitResult(
        *(float(v) for v in nat),
        residual_rms=float(np.sqrt(np.mean(r * r))),
        covariance=cov,
        converged=res.converged,
        iterations=res.iterations,
        message=res.message,
        gradient_cosine=res.gradient_cosine,
        history=res.history,
        order=axis_orders(order),
    )


def fit_rotary_trace(trace: TimedTrace, tie_rates: bool = True, max_iter: int = 500) -> RotaryFit:
    """Fit a rotary-2pi echo trace as dephasing-free Rabi oscillation.

    The model is the exact homogeneous population with zero detuning;
    ``tie_rates`` enforces gamma1 = gamma2.
    """
    t, y = trace.times, trace.values
    if t.size < 8:
        raise FitError("trace too short to fit")
    if np.ptp(y) == 0:
        raise FitError("trace is constant; nothing to fit")
    chi0 = dominant_frequency(trace)
    centers, amps = _envelope(trace, chi0)
    good = amps > 0
    if good.sum() >= 2:
        slope = np.polyfit(centers[good], np.log(amps[good]), 1)[0]
        rate = max(-slope, 1.0 / (10.0 * (t[-1] - t[0])))
    else:
        rate = 1.0 / (t[-1] - t[0])
    g = rate / 2.0
    a = float(np.ptp(y))

    def unpack(z):
        if tie_rates:
            chi, gam, s1, s0 = z
            g1 = g2 = gam**2 * g
        else:
            chi, q1, q2, s1, s0 = z
            g1, g2 = q1**2 * g, q2**2 * g
        return chi * chi0, g1, g2, s1 * a, s0 * a

    def residual(z):
        chi, g1, g2, s1, s0 = unpack(z)
        return (s1 * pi1_closed_form(t, chi, 0.0, g1, g2) + s0 - y) / a

    pop = pi1_closed_form(t, chi0, 0.0, g, g)
    (s1, s0), *_ = np.linalg.lstsq(np.column_stack([pop, np.ones_like(pop)]), y, rcond=None)
    z0 = [1.0, 1.0, s1 / a, s0 / a] if tie_rates else [1.0, 1.0, 1.0, s1 / a, s0 / a]
    res = levenberg_marquardt(residual, np.array(z0), max_iter=max_iter)
    chi, g1, g2, s1, s0 = unpack(res.x)
    rms = float(np.sqrt(np.mean((res.residual * a) ** 2)))
    return RotaryFit(g1, g2, chi, s1, s0, rms, res.converged, res.iterations, tie_rates)


def fit_coherence_saturation(points) -> CoherenceFit:
    """Fit ``tau_d = 1/(a/tau_s + b)`` to (tau_s, tau_d) pairs.

    Solved as the linear problem 1/tau_d = a/tau_s + b, then refined by
    least squares on tau_d itself.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise FitError("need at least three (tau_s, tau_d) points")
    tau_s, tau_d = pts[:, 0], pts[:, 1]
    if np.any(tau_s <= 0) or np.any(tau_d <= 0):
        raise FitError("times must be positive")
    gs = 1.0 / tau_s
    if np.ptp(gs) <= 1e-12 * np.max(gs):
        raise FitError("singular design: all scattering times are equal")
    design = np.column_stack([gs, np.ones_like(gs)])
    (a, b), *_ = np.linalg.lstsq(design, 1.0 / tau_d, rcond=None)
    scale = np.max(tau_d)

    def residual(z):
        return (1.0 / (z[0] * gs + z[1]) - tau_d) / scale

    if np.all(a * gs + b > 0):
        res = levenberg_marquardt(residual, np.array([a, b]), jac=lambda z: _coh_jac(z, gs, scale))
        if res.cost <= float(residual(np.array([a, b])) @ residual(np.array([a, b]))):
            a, b = res.x
    # b indistinguishable from zero: no saturation within the data
    if abs(b) <= 1e-9 * abs(a) * np.max(gs):
        b = 0.0
    return CoherenceFit(float(a), float(b))


def _coh_jac(z, gs, scale):
    denom = (z[0] * gs + z[1]) ** 2
    return np.column_stack([-gs / denom, -1.0 / denom]) / scale


def estimate_pi_fidelity(
    fit: FitResult,
    decay: DecayRates = NO_DECAY,
    gate_time: float | None = None,
    order=None,
) -> float:
    """Ensemble-averaged logical-|1> population at the intended pi time.

    ``gate_time`` defaults to pi/chi0 of the fit. Use the lattice-only decay
    rates here, not those measured with the probe on.
    """
    if not fit.converged:
        raise FitError("cannot estimate a fidelity from an unconverged fit")
    gate_time = math.pi / fit.chi0 if gate_time is None else gate_time
    trace = average_population(np.array([gate_time]), fit.spec, decay, order=order)
    return float(np.clip(trace.values[0], 0.0, 1.0))


def oscillation_amplitude(trace: TimedTrace, t_start: float, t_end: float) -> float:
    """Peak-to-peak excursion of the trace inside [t_start, t_end]."""
    m = (trace.times >= t_start) & (trace.times <= t_end)
    if not np.any(m):
        raise ValueError("no samples in window")
    return float(np.ptp(trace.values[m]))


def finite_difference_rabi_jacobian(times, params, decay=NO_DECAY, order=DEFAULT_ORDER, rel_step=1e-6):
    """Central-difference Jacobian of :func:`rabi_model` (natural parameters)."""
    p = np.asarray(params, dtype=float)
    scale = np.abs(p)
    # zero parameters: spreads and detuning scale with chi0, the offset with s1
    scale[:4] = np.maximum(scale[:4], 1e-2 * abs(p[0]))
    scale[4:] = np.maximum(scale[4:], max(abs(p[4]), 1e-300))
    f = lambda z: rabi_model(times, z * scale, decay, order)  # noqa: E731
    return central_jacobian(f, p / scale, rel_step, floor=1.0) / scale
