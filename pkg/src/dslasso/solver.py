"""Generic L1-penalized minimization of smooth convex objectives.

Solves problems of the form

    minimize  f(beta) + lam * sum_j w_j * |beta_j|

where ``f`` is smooth and convex and ``w`` is a vector of per-coordinate
penalty weights.  The weight conventions are:

* ``w_j == 0``    -- coordinate j is unpenalized,
* ``w_j == inf``  -- coordinate j is constrained to exactly 0 (the
  coordinate is dropped before optimization and re-inserted afterwards,
  so no arithmetic with infinities ever happens).

The solver's contract is a KKT certificate rather than a named algorithm:
a report is ``converged`` when the subgradient optimality conditions hold
within ``tol``,

    |grad_j f + lam * w_j * sign(beta_j)| <= tol      if beta_j != 0,
    max(0, |grad_j f| - lam * w_j)        <= tol      if beta_j == 0.

Internally a monotone accelerated proximal-gradient iteration with
backtracking is used, wrapped in a working-set loop when the objective
supports restriction to a coordinate subset (see below).  Accepted
iterates are non-increasing in the penalized objective.

Objectives are duck-typed.  They must provide

* ``dim`` -- number of coordinates,
* ``value(beta) -> float``,
* ``gradient(beta) -> ndarray``,

and may provide

* ``value_and_grad(beta) -> (float, ndarray)`` (saves work when the two
  share an intermediate product),
* ``restrict(indices) -> objective`` returning the same function with all
  coordinates outside ``indices`` frozen at zero.  Design-composed
  objectives implement this by slicing design columns, which makes the
  working-set loop worthwhile; objectives without it are solved over all
  free coordinates at once,
* ``cd_refine(x, lam, w, sweeps) -> x_new`` running safeguarded cyclic
  coordinate-descent sweeps that never increase the penalized objective.
  When present it is alternated with the accelerated iteration, which
  rescues the poorly conditioned dense end of regularization paths.

Objectives must be safe to share read-only across concurrent solves; the
solver itself holds no state between calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolveReport",
    "soft_threshold",
    "kkt_residual",
    "solve_l1",
    "lambda_max",
    "l1_center",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000


def soft_threshold(z, t):
    """Proximal operator of ``t * |.|``: sign(z) * max(|z| - t, 0).

    Works elementwise on arrays; ``t`` may be a scalar or an array of the
    same shape.  Requires ``t >= 0``.
    """
    if np.any(np.asarray(t) < 0):
        raise ValueError("soft threshold requires t >= 0")
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def kkt_residual(gradient, coef, lam, weights):
    """Maximal violation of the subgradient optimality conditions.

    Coordinates with infinite weight are excluded (they are fixed at zero
    by construction and carry no optimality condition).  Unpenalized
    coordinates (weight 0) reduce to the plain stationarity condition
    ``|grad_j| <= tol``.
    """
    g = np.asarray(gradient, dtype=float)
    x = np.asarray(coef, dtype=float)
    w = np.asarray(weights, dtype=float)
    finite = np.isfinite(w)
    if not np.any(finite):
        return 0.0
    g, x, w = g[finite], x[finite], w[finite]
    nz = x != 0.0
    res = 0.0
    if np.any(nz):
        res = float(np.max(np.abs(g[nz] + lam * w[nz] * np.sign(x[nz]))))
    if np.any(~nz):
        slack = np.abs(g[~nz]) - lam * w[~nz]
        res = max(res, float(np.max(np.maximum(slack, 0.0))))
    return res


@dataclass
class SolveReport:
    """Outcome of one penalized solve."""

    coefficients: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    objective_trace: list | None = None


class _Restricted:
    """Fallback restriction: embeds sub-coordinates into the full space.

    Each call costs a full-dimension evaluation, so this is only used to
    drop pinned (infinite-weight) coordinates of objectives that have no
    native ``restrict``.
    """

    def __init__(self, obj, indices, full_dim):
        self._obj = obj
        self._idx = np.asarray(indices, dtype=int)
        self._full_dim = full_dim
        self.dim = len(self._idx)

    def _embed(self, u):
        x = np.zeros(self._full_dim)
        x[self._idx] = u
        return x

    def value(self, u):
        return self._obj.value(self._embed(u))

    def gradient(self, u):
        return np.asarray(self._obj.gradient(self._embed(u)))[self._idx]

    def value_and_grad(self, u):
        v, g = _value_and_grad(self._obj, self._embed(u))
        return v, g[self._idx]


def _restrict(obj, indices):
    if hasattr(obj, "restrict"):
        return obj.restrict(np.asarray(indices, dtype=int))
    return _Restricted(obj, indices, obj.dim)


def _value_and_grad(obj, x):
    if hasattr(obj, "value_and_grad"):
        return obj.value_and_grad(x)
    return obj.value(x), np.asarray(obj.gradient(x), dtype=float)


def _check_finite_grad(g):
    if not np.all(np.isfinite(g)):
        raise ValueError("objective gradient is not finite")


def _mfista(obj, weights, lam, x0, tol, max_iter, trace=None, lip0=1.0):
    """Accelerated proximal gradient with backtracking.

    Monotone up to floating-point noise in the penalized objective.
    Returns ``(x, n_iter, resid, lip)`` where ``resid`` is the KKT
    residual at ``x`` (recomputed from a fresh gradient) and ``lip`` the
    final step-size estimate.  ``weights`` must be finite.
    """
    w = weights
    thresh = lam * w

    def penalty(v):
        return float(lam * np.dot(w, np.abs(v))) if lam > 0 else 0.0

    x = x0.copy()
    fx = obj.value(x)
    big_f = fx + penalty(x)
    if trace is not None:
        trace.append(big_f)
    y = x.copy()
    t = 1.0
    lip = max(lip0, 1e-10)
    n_iter = 0
    check_every = 8
    big_fz_prev = np.inf
    while n_iter < max_iter:
        n_iter += 1
        fy, gy = _value_and_grad(obj, y)
        _check_finite_grad(gy)
        # backtracking on the quadratic upper bound; the slack only covers
        # floating-point noise, and the step size never grows back within
        # one solve, so the iteration cannot drift below the curvature
        while True:
            z = soft_threshold(y - gy / lip, thresh / lip)
            dz = z - y
            fz = obj.value(z)
            gap = fy + float(gy @ dz) + 0.5 * lip * float(dz @ dz) - fz
            if gap >= -1e-15 * (abs(fy) + abs(fz)) or lip > 1e20:
                break
            lip *= 2.0
        step_move = lip * float(np.max(np.abs(z - y)))
        big_fz = fz + penalty(z)
        x_prev = x
        # monotone up to floating-point noise: a strict comparison freezes
        # the iterate once true objective gaps drop below fp resolution,
        # while the KKT residual can still improve
        if big_fz <= big_f + 1e-14 * (1.0 + abs(big_f)):
            x, big_f = z, big_fz
        # else keep x, momentum still built from z
        if trace is not None:
            trace.append(big_f)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if big_fz > big_fz_prev + 1e-14 * (1.0 + abs(big_fz_prev)):
            # candidate sequence stopped descending: reset momentum at the
            # best point (function-value restart)
            t_next = 1.0
            y = x.copy()
        else:
            y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        big_fz_prev = big_fz
        t = t_next
        if n_iter % check_every == 0 or step_move <= 0.5 * tol:
            g = np.asarray(obj.gradient(x), dtype=float)
            _check_finite_grad(g)
            resid = kkt_residual(g, x, lam, w)
            if resid <= tol:
                return x, n_iter, resid, lip
            if z is not x:
                # the prox candidate may satisfy the certificate even when
                # objective comparisons are below floating-point resolution
                gz = np.asarray(obj.gradient(z), dtype=float)
                _check_finite_grad(gz)
                resid_z = kkt_residual(gz, z, lam, w)
                if resid_z <= tol:
                    return z, n_iter, resid_z, lip
    g = np.asarray(obj.gradient(x), dtype=float)
    _check_finite_grad(g)
    return x, n_iter, kkt_residual(g, x, lam, w), lip


def _validate_weights(weights, dim):
    w = np.asarray(weights, dtype=float)
    if w.shape != (dim,):
        raise ValueError(f"weights must have shape ({dim},), got {w.shape}")
    if np.any(w < 0) or np.any(np.isnan(w)):
        raise ValueError("penalty weights must be in [0, inf]")
    if not np.any(np.isfinite(w)):
        raise ValueError("at least one penalty weight must be finite")
    return w


def solve_l1(obj, weights, lam, init=None, tol=DEFAULT_TOL,
             max_iter=DEFAULT_MAX_ITER, track_objective=False):
    """Minimize ``obj(beta) + lam * sum_j weights_j * |beta_j|``.

    Parameters
    ----------
    obj : objective
        See the module docstring for the expected interface.
    weights : array of shape (obj.dim,)
        Per-coordinate penalty weights in ``[0, inf]``.
    lam : float
        Penalty strength, ``>= 0``.
    init : array, optional
        Warm-start coefficients.  Pinned coordinates are zeroed.
    tol : float
        KKT residual defining convergence.
    max_iter : int
        Total inner-iteration budget.
    track_objective : bool
        When set, the report carries the penalized objective at every
        accepted iterate (non-increasing by construction).

    Returns
    -------
    SolveReport
        With ``converged=False`` when the budget is exhausted before the
        certificate holds; the caller decides how to proceed.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    dim = obj.dim
    w = _validate_weights(weights, dim)
    pinned = np.isinf(w)
    free = np.flatnonzero(~pinned)

    x_full = np.zeros(dim)
    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.shape != (dim,):
            raise ValueError(f"init must have shape ({dim},)")
        x_full = init.copy()
        x_full[pinned] = 0.0

    if pinned.any():
        obj_free = _restrict(obj, free)
    else:
        obj_free = obj
    wf = w[free]
    xf = x_full[free]

    trace = [] if track_objective else None
    use_working_set = lam > 0 and hasattr(obj, "restrict")

    used = 0
    if not use_working_set:
        xf, used, resid = _solve_block(obj_free, wf, lam, xf, tol, max_iter,
                                       trace)
    else:
        active = np.flatnonzero((xf != 0) | (wf == 0))
        resid = np.inf
        for _ in range(100):
            if len(active) > 0 and used < max_iter:
                sub = _restrict(obj_free, active)
                xa, it, _ = _solve_block(sub, wf[active], lam, xf[active],
                                         tol, max_iter - used, trace)
                used += it
                xf = xf.copy()
                xf[active] = xa
            g = np.asarray(obj_free.gradient(xf), dtype=float)
            _check_finite_grad(g)
            resid = kkt_residual(g, xf, lam, wf)
            if resid <= tol or used >= max_iter:
                break
            viol = _violations(g, xf, lam, wf)
            new = np.setdiff1d(np.flatnonzero(viol > tol), active)
            if len(new) == 0:
                break
            active = np.union1d(active, new)

    x_full = np.zeros(dim)
    x_full[free] = xf
    value = obj.value(x_full)
    objective = value + (float(lam * np.dot(wf, np.abs(xf))) if lam > 0 else 0.0)
    return SolveReport(
        coefficients=x_full,
        objective=objective,
        kkt_residual=float(resid),
        iterations=used,
        converged=bool(resid <= tol),
        objective_trace=trace,
    )


def _violations(g, x, lam, w):
    viol = np.abs(g + lam * w * np.sign(x))
    zero = x == 0.0
    viol[zero] = np.maximum(np.abs(g[zero]) - lam * w[zero], 0.0)
    return viol


def _solve_block(obj, weights, lam, x, tol, budget, trace=None):
    """Drive one coordinate block to the certificate within ``budget``.

    Runs the accelerated iteration in chunks; between chunks, objectives
    that expose ``cd_refine`` get cyclic coordinate sweeps, which handle
    the ill-conditioned regimes where a pure gradient scheme crawls.
    """
    used = 0
    lip = 1.0
    chunk = 500
    resid = np.inf
    has_cd = hasattr(obj, "cd_refine") and lam >= 0
    while used < budget:
        x, it, resid, lip = _mfista(obj, weights, lam, x, tol,
                                    min(chunk, budget - used), trace,
                                    lip0=lip)
        used += it
        if resid <= tol or used >= budget:
            break
        if has_cd:
            sweeps = 10
            x = obj.cd_refine(x, lam, weights, sweeps, tol=tol)
            used += sweeps
            if trace is not None:
                trace.append(obj.value(x)
                             + float(lam * np.dot(weights, np.abs(x))))
            g = np.asarray(obj.gradient(x), dtype=float)
            _check_finite_grad(g)
            resid = kkt_residual(g, x, lam, weights)
            if resid <= tol:
                break
    return x, used, resid


def lambda_max(obj, weights, tol=1e-10, max_iter=DEFAULT_MAX_ITER):
    """Smallest penalty at which all penalized coordinates are zero.

    Unpenalized coordinates (weight 0) are first brought to their
    restricted optimum with everything else held at zero; the anchor is
    then ``max_j |grad_j| / w_j`` over the penalized coordinates.  Raises
    when the restricted smooth solve fails to converge.
    """
    w = _validate_weights(weights, obj.dim)
    penalized = np.isfinite(w) & (w > 0)
    if not np.any(penalized):
        raise ValueError("lambda_max requires at least one finite positive weight")
    beta = np.zeros(obj.dim)
    unpen = np.flatnonzero(w == 0)
    if len(unpen) > 0:
        sub = _restrict(obj, unpen)
        u, _, resid, _ = _mfista(sub, np.zeros(len(unpen)), 0.0,
                                 np.zeros(len(unpen)), tol, max_iter)
        if resid > tol:
            raise RuntimeError(
                f"restricted solve over unpenalized coordinates did not "
                f"converge (residual {resid:.3e} > {tol:.1e})")
        beta[unpen] = u
    g = np.asarray(obj.gradient(beta), dtype=float)
    _check_finite_grad(g)
    idx = np.flatnonzero(penalized)
    return float(np.max(np.abs(g[idx]) / w[idx]))


def l1_center(values, weights=None):
    """Representative minimizer of ``u -> sum_i w_i * |values_i - u|``.

    Returns the unique minimizer when there is one, otherwise the midpoint
    of the minimizing interval.  With unit weights this coincides with the
    conventional median (middle order statistic for odd counts, midpoint
    of the two middle values for even counts).
    """
    v = np.asarray(values, dtype=float)
    if weights is None:
        w = np.ones_like(v)
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("l1_center weights must be finite and positive")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cw = np.cumsum(w)
    total = cw[-1]
    half = 0.5 * total
    i = int(np.searchsorted(cw, half, side="left"))
    if abs(cw[i] - half) <= 1e-12 * total and i + 1 < len(v):
        return 0.5 * (v[i] + v[i + 1])
    return float(v[i])
