"""Damped Gauss-Newton (Levenberg-Marquardt) on manifolds with IRLS weighting.

Every nonlinear refinement in the package goes through :func:`levenberg_marquardt`.
Steps are only accepted when the true cost decreases, so the returned cost
history is non-increasing regardless of how approximate the weighting is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

MAX_ITERATIONS = 100
STEP_TOL = 1e-12
COST_TOL = 1e-12


@dataclass
class Refinement:
    value: Any
    converged: bool
    iterations: int
    costs: list = field(default_factory=list)

    @property
    def cost(self):
        return self.costs[-1]


def sum_of_squares(res):
    return float(np.sum(res * res))


def sum_of_norms(res):
    return float(np.sum(np.linalg.norm(res, axis=1)))


def inverse_norm_weights(res, floor=1e-12):
    """IRLS weights turning a squared objective into a sum of norms."""
    return 1.0 / np.maximum(np.linalg.norm(res, axis=1), floor)


def _as2d(res):
    res = np.asarray(res, dtype=float)
    return res[:, None] if res.ndim == 1 else res


def numeric_jacobian(residual_fn, x, retract, dim, h=1e-7):
    cols = []
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = h
        rp = residual_fn(retract(x, d)).ravel()
        rm = residual_fn(retract(x, -d)).ravel()
        cols.append((rp - rm) / (2 * h))
    return np.column_stack(cols)


def levenberg_marquardt(
    residual_fn: Callable[[Any], np.ndarray],
    x0,
    retract: Callable[[Any, np.ndarray], Any],
    dim: int,
    *,
    cost_fn: Callable[[np.ndarray], float] = sum_of_squares,
    weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    jacobian_fn=None,
    max_iterations: int = MAX_ITERATIONS,
    step_tol: float = STEP_TOL,
    cost_tol: float = COST_TOL,
    lam: float = 1e-4,
) -> Refinement:
    """Minimize ``cost_fn(residual_fn(x))`` over a manifold.

    ``residual_fn`` returns an (m, k) array of per-term residual vectors.
    ``weight_fn`` maps those residuals to per-term IRLS weights; it lets a
    robust or unsquared cost be minimized with squared-residual steps.
    """
    x = x0
    res = _as2d(residual_fn(x))
    cost = cost_fn(res)
    costs = [cost]
    converged = False
    it = 0
    while it < max_iterations:
        if cost == 0.0:
            converged = True
            break
        it += 1
        k = res.shape[1]
        w = np.ones(res.shape[0]) if weight_fn is None else weight_fn(res)
        if jacobian_fn is None:
            J = numeric_jacobian(residual_fn, x, retract, dim)
        else:
            J = jacobian_fn(x, res)
        wr = np.repeat(w, k)
        JtW = J.T * wr
        H = JtW @ J
        g = JtW @ res.ravel()
        diag = np.diag(H).copy()
        diag += 1e-12 * max(diag.max(), 1e-300)
        accepted = False
        while lam < 1e16:
            try:
                step = -np.linalg.solve(H + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = retract(x, step)
            res_new = _as2d(residual_fn(x_new))
            cost_new = cost_fn(res_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True
            break
        drop = cost - cost_new
        x, res, cost = x_new, res_new, cost_new
        costs.append(cost)
        lam = max(lam / 10, 1e-12)
        if np.linalg.norm(step) < step_tol or drop <= cost_tol * costs[-2]:
            converged = True
            break
    return Refinement(x, converged, it, costs)
