"""Damped Gauss-Newton (Levenberg-Marquardt) least squares."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    jacobian: np.ndarray
    cost: float
    converged: bool
    iterations: int
    message: str
    #: objective after each accepted step, starting with the initial point
    history: list = field(default_factory=list)

    @property
    def gradient_cosine(self) -> float:
        """max_j |J_j . r| / (|J_j| |r|): scale-free stationarity measure."""
        rn = np.linalg.norm(self.residual)
        if rn == 0:
            return 0.0
        cn = np.linalg.norm(self.jacobian, axis=0)
        cn[cn == 0] = 1.0
        return float(np.max(np.abs(self.jacobian.T @ self.residual) / (cn * rn)))


def central_jacobian(fun: Callable, x: np.ndarray, rel_step: float = 1e-6, floor: float = 1e-3) -> np.ndarray:
    """Central differences with step ``rel_step * max(|x_j|, floor)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), floor)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fun(xp) - fun(xm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    x0,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    *,
    rel_step: float = 1e-6,
    ftol: float = 1e-10,
    gtol: float = 1e-8,
    max_iter: int = 500,
    lam0: float = 1e-3,
    max_rejects: int = 30,
    rtol_residual: float = 1e-13,
) -> LMResult:
    """Minimise ``sum(fun(x)**2)``.

    The damping ``lam`` is divided by 10 on an accepted step and multiplied
    by 10 on a rejected one; steps solve ``(J^T J + lam diag(J^T J)) dx = -J^T r``.
    Stops when an accepted step changes the objective by less than ``ftol``
    (relative), the gradient cosine drops below ``gtol``, or the rms
    residual falls below ``rtol_residual`` (exact data; residuals are
    assumed to be scaled to order one).
    """
    x = np.asarray(x0, dtype=float).copy()
    jac = jac or (lambda z: central_jacobian(fun, z, rel_step))
    r = fun(x)
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    J = jac(x)
    message = "maximum iterations reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        res = LMResult(x, r, J, cost, False, it, "")
        if cost <= r.size * rtol_residual**2:
            converged, message = True, "residual at working precision"
            break
        if res.gradient_cosine < gtol:
            converged, message = True, "gradient criterion met"
            break
        A = J.T @ J
        # floor the Marquardt scaling so near-zero columns are still damped
        diag = np.maximum(np.diag(A), 1e-8 * max(float(np.diag(A).max()), 1e-300))
        accepted = False
        for _ in range(max_rejects):
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # stalled: only call it converged if the point is (nearly) stationary
            converged = res.gradient_cosine < np.sqrt(gtol) or cost <= r.size * (1e3 * rtol_residual) ** 2
            message = "no further decrease possible" + ("" if converged else " away from a stationary point")
            break
        rel_change = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-15)
        J = jac(x)
        if rel_change < ftol:
            converged, message = True, "relative objective change below tolerance"
            break
    return LMResult(x, r, J, cost, converged, it, message, history)
