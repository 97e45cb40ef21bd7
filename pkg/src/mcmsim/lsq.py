"""Damped Gauss-Newton (Levenberg-Marquardt) least squares shared by the fitters."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np


@dataclass
class LsqResult:
    params: np.ndarray
    cov: np.ndarray
    residual_norm: float
    n_iter: int
    converged: bool
    dof: int

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))


def _numeric_jacobian(fun, p, r0, lower, upper):
    J = np.empty((r0.size, p.size))
    for j in range(p.size):
        h = 1e-7 * max(1.0, abs(p[j]))
        step = p.copy()
        # step away from an active upper bound
        if step[j] + h > upper[j]:
            h = -h
        step[j] += h
        J[:, j] = (fun(step) - r0) / h
    return J


def levenberg_marquardt(fun: Callable[[np.ndarray], np.ndarray], p0, jac: Callable | None = None,
                        bounds=None, rtol: float = 1e-9, max_iter: int = 200,
                        absolute_sigma: bool = False) -> LsqResult:
    """Minimize ||fun(p)||^2.

    ``fun`` returns weighted residuals. Steps are projected onto ``bounds``
    ((lower, upper) arrays). The damping grows tenfold whenever a trial step
    increases the residual and shrinks threefold after an accepted step.
    Stops once the relative change of the residual sum of squares falls
    below ``rtol`` or after ``max_iter`` iterations. The covariance is the
    linearized one at the optimum, scaled by the reduced chi-square unless
    ``absolute_sigma`` is set.
    """
    p = np.array(p0, dtype=float)
    n = p.size
    lower, upper = (np.full(n, -np.inf), np.full(n, np.inf)) if bounds is None else (
        np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    p = np.clip(p, lower, upper)
    jacobian = (lambda q, r: np.asarray(jac(q), float)) if jac else (
        lambda q, r: _numeric_jacobian(fun, q, r, lower, upper))

    r = np.asarray(fun(p), float)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = jacobian(p, r)
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(30):
            D = np.diag(np.diag(A)) + 1e-12 * np.eye(n)
            try:
                step = np.linalg.solve(A + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = np.clip(p + step, lower, upper)
            r_new = np.asarray(fun(p_new), float)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            converged = True  # no downhill step left
            break
        rel = (cost - cost_new) / max(cost, 1e-300)
        p, r, cost = p_new, r_new, cost_new
        lam = max(lam / 3, 1e-12)
        if rel < rtol:
            converged = True
            break

    J = jacobian(p, r)
    dof = max(r.size - n, 1)
    cov = np.linalg.pinv(J.T @ J)
    singular = np.linalg.matrix_rank(J.T @ J) < n
    if not absolute_sigma:
        cov = cov * (cost / dof)
    if singular:
        # directions the data cannot constrain get an infinite error
        null = np.abs(np.diag(J.T @ J)) < 1e-12 * max(np.abs(np.diag(J.T @ J)).max(), 1e-300)
        cov[null, :] = np.inf
        cov[:, null] = np.inf
    return LsqResult(p, cov, float(np.sqrt(cost)), it, converged, dof)
