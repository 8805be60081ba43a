"""Batched Levenberg-Marquardt for many small independent least-squares problems.

Each problem ``b`` minimises ``0.5 * ||r_b(x_b)||^2``.  The residual callback
returns residuals and analytic Jacobians for the whole batch at once, so a
thousand per-pixel fits cost one vectorised evaluation per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray            # (B, P)
    cost: np.ndarray         # (B,) 0.5 * sum of squared residuals
    initial_cost: np.ndarray
    iterations: np.ndarray   # (B,) accepted steps
    converged: np.ndarray    # (B,) bool


def levenberg_marquardt(
    fun: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    max_iter: int = 100,
    ftol: float = 1e-12,
    xtol: float = 1e-12,
    cost_tol: np.ndarray | float = 0.0,
    lam0: float = 1e-3,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> LMResult:
    """Minimise each row of ``x0`` independently.

    ``fun(x, idx)`` evaluates the problems ``idx`` at parameters ``x``
    (``len(idx)`` rows) and returns ``(r, J)`` shaped ``(k, R)``, ``(k, R, P)``.
    ``project`` maps trial points back into the feasible set (bounds).  A
    problem stops once its cost is at or below ``cost_tol``, its relative
    cost decrease falls under ``ftol``, or its step under ``xtol``.  Steps
    that do not lower the cost are rejected, so the final cost never exceeds
    the initial one.
    """
    x = np.array(x0, dtype=float)
    B, P = x.shape
    r, J = fun(x, np.arange(B))
    cost = 0.5 * np.einsum("br,br->b", r, r)
    cost0 = cost.copy()
    lam = np.full(B, lam0)
    iters = np.zeros(B, dtype=int)
    cost_tol = np.broadcast_to(np.asarray(cost_tol, dtype=float), (B,))
    done = cost <= cost_tol
    converged = done.copy()
    eye = np.eye(P)
    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        Ja, ra = J[act], r[act]
        JaT = Ja.transpose(0, 2, 1)
        A = JaT @ Ja
        g = (JaT @ ra[..., None])[..., 0]
        diag = np.einsum("bpp->bp", A)
        diag = np.maximum(diag, 1e-12 * np.maximum(diag.max(axis=1, keepdims=True), 1e-300))
        H = A + lam[act, None, None] * diag[:, :, None] * eye
        try:
            step = -np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(g)
            for k in range(act.size):
                step[k] = -np.linalg.lstsq(H[k], g[k], rcond=None)[0]
        xt = x[act] + step
        if project is not None:
            xt = project(xt)
        rt, Jt = fun(xt, act)
        ct = 0.5 * np.einsum("br,br->b", rt, rt)
        ok = np.isfinite(ct) & (ct < cost[act])
        acc = act[ok]
        rej = act[~ok]
        dec = cost[acc] - ct[ok]
        small_f = dec <= ftol * cost[acc]
        real_step = xt[ok] - x[acc]
        small_x = np.linalg.norm(real_step, axis=1) <= xtol * (np.linalg.norm(x[acc], axis=1) + xtol)
        x[acc] = xt[ok]
        r[acc] = rt[ok]
        J[acc] = Jt[ok]
        cost[acc] = ct[ok]
        iters[acc] += 1
        lam[acc] = np.maximum(lam[acc] * 0.3, 1e-12)
        lam[rej] *= 10.0
        fin = small_f | small_x | (cost[acc] <= cost_tol[acc])
        done[acc[fin]] = True
        converged[acc[fin]] = True
        stalled = rej[lam[rej] > 1e12]
        done[stalled] = True
        converged[stalled] = True  # no descent direction left at this point
    return LMResult(x, cost, cost0, iters, converged)
