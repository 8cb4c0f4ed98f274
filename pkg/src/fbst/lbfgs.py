"""Limited-memory BFGS with a strong Wolfe line search.

The objective may return ``inf`` (or ``nan``) at points outside its domain,
e.g. where a log barrier is violated. The line search treats such points as
failed trials and shrinks the step, so no explicit constraint handling is
needed as long as the starting point is feasible.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

__all__ = ["LBFGSParams", "LBFGSResult", "lbfgs_minimize", "strong_wolfe_search"]


@dataclass(frozen=True)
class LBFGSParams:
    """Solver settings.

    Attributes
    ----------
    memory : int
        Number of stored curvature pairs.
    max_iterations : int
        Maximum number of accepted steps.
    gradient_tolerance : float
        Stop once ``max |grad| <= gradient_tolerance``.
    c1, c2 : float
        Sufficient-decrease and curvature constants, ``0 < c1 < c2 < 1``.
    max_line_search : int
        Maximum objective evaluations per line search.
    """

    memory: int = 10
    max_iterations: int = 20
    gradient_tolerance: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 40

    def __post_init__(self):
        if self.memory < 1 or self.max_iterations < 1 or self.max_line_search < 1:
            raise ValueError("memory, max_iterations and max_line_search must be positive")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants must satisfy 0 < c1 < c2 < 1")


@dataclass
class LBFGSResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    line_search_failed: bool = False


def _cubic_min(a, fa, da, b, fb, db):
    # minimizer of the cubic interpolating (a, fa, da), (b, fb, db); None if undefined
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def strong_wolfe_search(phi, f0, d0, alpha0, c1=1e-4, c2=0.9, max_evals=40, alpha_max=1e10):
    """Find a step satisfying the strong Wolfe conditions.

    Parameters
    ----------
    phi : callable
        ``phi(alpha) -> (value, payload, slope)``; `value` may be ``inf``.
    f0, d0 : float
        Value and (negative) slope at ``alpha = 0``.

    Returns
    -------
    alpha, value, payload, evals
        `alpha` is ``None`` when no acceptable step was found.
    """
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0

    def zoom(lo, f_lo, d_lo, p_lo, hi, f_hi, d_hi):
        nonlocal evals
        while evals < max_evals:
            width = hi - lo
            if abs(width) <= 1e-14 * max(1.0, abs(lo)):
                break
            trial = None
            if math.isfinite(f_hi) and d_hi is not None and math.isfinite(d_hi):
                trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            elif math.isfinite(f_hi):
                # quadratic through f_lo, d_lo, f_hi
                denom = 2 * (f_hi - f_lo - d_lo * width)
                if denom > 0:
                    trial = lo - d_lo * width * width / denom
            inner_lo = min(lo, hi) + 0.1 * abs(width)
            inner_hi = max(lo, hi) - 0.1 * abs(width)
            if trial is None or not math.isfinite(trial) or not inner_lo <= trial <= inner_hi:
                trial = lo + 0.5 * width
            f_t, p_t, d_t = phi(trial)
            evals += 1
            if not math.isfinite(f_t) or f_t > f0 + c1 * trial * d0 or f_t >= f_lo:
                hi, f_hi, d_hi = trial, f_t, d_t if math.isfinite(f_t) else None
            else:
                if abs(d_t) <= -c2 * d0:
                    return trial, f_t, p_t
                if d_t * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, p_lo = trial, f_t, d_t, p_t
        return None, f_lo, p_lo

    p_prev = None
    for i in range(max_evals):
        f_a, p_a, d_a = phi(alpha)
        evals += 1
        if not math.isfinite(f_a) or f_a > f0 + c1 * alpha * d0 or (i > 0 and f_a >= f_prev):
            a, f, p = zoom(a_prev, f_prev, d_prev, p_prev, alpha, f_a,
                           d_a if math.isfinite(f_a) else None)
            return a, f, p, evals
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a, p_a, evals
        if d_a >= 0:
            a, f, p = zoom(alpha, f_a, d_a, p_a, a_prev, f_prev, d_prev)
            return a, f, p, evals
        a_prev, f_prev, d_prev, p_prev = alpha, f_a, d_a, p_a
        if alpha >= alpha_max:
            break
        alpha = min(2.0 * alpha, alpha_max)
    return None, f_prev, p_prev, evals


def lbfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    params: LBFGSParams | None = None,
) -> LBFGSResult:
    """Minimize ``fun`` from ``x0`` with L-BFGS.

    ``fun(x)`` returns ``(value, gradient)`` for an array `x` of the same shape
    as `x0`. Every accepted step satisfies the strong Wolfe conditions. If the
    line search fails along both the quasi-Newton and the steepest-descent
    direction, the current iterate is returned with ``line_search_failed``
    set.
    """
    params = params or LBFGSParams()
    shape = np.shape(x0)
    x = np.array(x0, dtype=np.float64).ravel()

    def flat_fun(v):
        val, g = fun(v.reshape(shape))
        return float(val), np.asarray(g, dtype=np.float64).ravel()

    f, g = flat_fun(x)
    evals = 1
    if not math.isfinite(f):
        raise ValueError("starting point is infeasible (objective is not finite)")

    def result(it, converged, failed=False):
        return LBFGSResult(x.reshape(shape), f, g.reshape(shape), it, evals, converged, failed)

    if np.max(np.abs(g)) <= params.gradient_tolerance:
        return result(0, True)

    s_hist: deque = deque(maxlen=params.memory)
    y_hist: deque = deque(maxlen=params.memory)
    rho_hist: deque = deque(maxlen=params.memory)

    for it in range(1, params.max_iterations + 1):
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        slope = float(d @ g)
        if not slope < 0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = float(d @ g)

        def phi(alpha, d=d):
            val, grad = flat_fun(x + alpha * d)
            if not math.isfinite(val):
                return math.inf, None, math.nan
            return val, grad, float(grad @ d)

        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / float(np.linalg.norm(g)))
        alpha, f_new, g_new, n = strong_wolfe_search(
            phi, f, slope, alpha0, params.c1, params.c2, params.max_line_search
        )
        evals += n
        if alpha is None and s_hist:
            log.debug("line search failed along quasi-Newton direction; restarting")
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = float(d @ g)
            alpha, f_new, g_new, n = strong_wolfe_search(
                lambda a: phi(a, d), f, slope, min(1.0, 1.0 / float(np.linalg.norm(g))),
                params.c1, params.c2, params.max_line_search,
            )
            evals += n
        if alpha is None:
            log.warning("L-BFGS line search failed at iteration %d", it)
            return result(it - 1, False, True)

        step = alpha * d
        x = x + step
        yk = g_new - g
        f, g = f_new, g_new
        sy = float(step @ yk)
        if sy > 1e-12 * float(np.linalg.norm(step)) * float(np.linalg.norm(yk)):
            s_hist.append(step)
            y_hist.append(yk)
            rho_hist.append(1.0 / sy)
        if np.max(np.abs(g)) <= params.gradient_tolerance:
            return result(it, True)
    return result(params.max_iterations, False)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = -g.copy()
    if not s_hist:
        return q
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
