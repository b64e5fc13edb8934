"""Matched 1:1 case-control data and the four penalized fitting strategies.

A matched dataset is split into strata, one per case subtype: stratum k
holds the pairs whose case has subtype k.  Within each pair only the
covariate difference ``x_case - x_control`` matters; the within-pair
log-loss for stratum k is

    sum_l log(1 + exp(delta_k' (x_case_l - x_control_l)))

(no intercept: pair-level effects cancel in the difference).  The sum is
not normalized by the number of pairs, so penalty strengths scale with
sample size.

Four strategies estimate the per-subtype vectors delta_1..delta_{K-1}:

* ``indep``       -- each stratum on its own, penalty lam * ||delta_k||_1.
* ``pooled``      -- one shared vector for all strata.
* ``ref``         -- subtype r anchors the shared part: delta_r = mu and
                     delta_k = mu + gamma_k for k != r, with penalty
                     lam * (||mu||_1 + sum_{k != r} tau_k ||gamma_k||_1).
* ``datashared``  -- every subtype deviates: delta_k = mu + gamma_k with
                     penalty lam * (||mu||_1 + sum_k tau_k ||gamma_k||_1).

The shared/deviation problems are solved through an augmented design: the
stratum difference blocks are stacked in a leading column block (for mu)
and laid out block-diagonally, scaled by 1/tau_k, in trailing blocks (for
tau_k * gamma_k).  A single unit-weight lasso on that matrix is exactly
the decomposed criterion; infinite tau_k are realized by giving the
corresponding columns infinite penalty weight, which pins them to zero.

With all tau finite the decomposition has a penalty-flat direction per
covariate (shift mu_j and all gamma_.j oppositely, delta fixed); fits are
reported at the representative where mu_j is the weighted median of
{0, delta_1j, ..., delta_{K-1,j}}, the point the optimality conditions
single out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .solver import (DEFAULT_MAX_ITER, DEFAULT_TOL, kkt_residual as _kkt,
                     l1_center, lambda_max, soft_threshold, solve_l1)

__all__ = [
    "MatchedDataset",
    "DiffMatrix",
    "PenaltySpec",
    "SharedFit",
    "LogisticSumObjective",
    "build_diff_matrix",
    "cond_nll",
    "cond_nll_grad",
    "augment_design",
    "recover_estimates",
    "fit_matched",
    "lambda_max_matched",
]

STRATEGIES = ("indep", "pooled", "ref", "datashared")


class MatchedDataset:
    """1:1 matched case-control pairs grouped into subtype strata.

    Parameters
    ----------
    case, control : sequences of arrays
        One ``(m_k, p)`` block per stratum; row l of stratum k holds the
        covariates of the case (resp. its matched control) of pair l.
    """

    def __init__(self, case, control):
        if len(case) != len(control) or len(case) == 0:
            raise ValueError("case and control must hold one block per stratum")
        self.case = [np.atleast_2d(np.asarray(b, dtype=float)) for b in case]
        self.control = [np.atleast_2d(np.asarray(b, dtype=float)) for b in control]
        p = self.case[0].shape[1]
        for k, (a, b) in enumerate(zip(self.case, self.control)):
            if a.shape != b.shape or a.shape[1] != p or a.shape[0] < 1:
                raise ValueError(f"stratum {k + 1}: case/control blocks must "
                                 f"be nonempty with matching shape (., {p})")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError(f"stratum {k + 1}: covariates must be finite")
        self.p = p

    @property
    def n_strata(self):
        return len(self.case)

    @property
    def n_categories(self):
        """Number of outcome categories K (subtypes plus controls)."""
        return self.n_strata + 1

    @property
    def pair_counts(self):
        return [b.shape[0] for b in self.case]

    @property
    def n_pairs(self):
        return sum(self.pair_counts)

    def subset_pairs(self, keep):
        """New dataset restricted to the given pairs.

        ``keep`` is one boolean mask per stratum; every stratum must keep
        at least one pair.
        """
        case = [b[m] for b, m in zip(self.case, keep)]
        control = [b[m] for b, m in zip(self.control, keep)]
        return MatchedDataset(case, control)


@dataclass
class DiffMatrix:
    """Within-pair covariate differences, one block per stratum."""

    blocks: list

    @property
    def p(self):
        return self.blocks[0].shape[1]

    @property
    def n_strata(self):
        return len(self.blocks)

    @property
    def pair_counts(self):
        return [b.shape[0] for b in self.blocks]

    @property
    def n_pairs(self):
        return sum(self.pair_counts)

    def stacked(self):
        """All difference rows stacked, shape (m, p)."""
        return np.vstack(self.blocks)

    def block_diagonal(self):
        """Block-diagonal layout, shape (m, (K-1) * p).

        Row l of stratum k carries its difference vector in column block k
        and zeros elsewhere, so a stacked coefficient vector
        (delta_1, ..., delta_{K-1}) acts stratum by stratum.
        """
        m, p, s = self.n_pairs, self.p, self.n_strata
        out = np.zeros((m, s * p))
        row = 0
        for k, b in enumerate(self.blocks):
            out[row:row + b.shape[0], k * p:(k + 1) * p] = b
            row += b.shape[0]
        return out


def build_diff_matrix(d: MatchedDataset) -> DiffMatrix:
    """Difference blocks ``x_case - x_control`` per stratum."""
    return DiffMatrix([a - b for a, b in zip(d.case, d.control)])


@dataclass
class PenaltySpec:
    """Penalty strength plus strategy selector for matched fits.

    ``tau`` applies to the deviation blocks of the ref/datashared
    strategies: a scalar is broadcast over strata, entries may be ``inf``
    (which pins the corresponding deviations to zero).  ``ref`` is the
    1-based index of the anchoring subtype for the ref strategy.
    """

    lam: float
    strategy: str = "datashared"
    ref: int | None = None
    tau: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "ref" and self.ref is None:
            raise ValueError("ref strategy requires a reference subtype")

    def tau_vector(self, n_strata):
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float),
                              (n_strata,)).copy()
        if np.any(np.isnan(tau)) or np.any(tau <= 0):
            raise ValueError("tau entries must be positive (inf allowed)")
        if self.strategy == "ref":
            if not (1 <= self.ref <= n_strata):
                raise ValueError(f"reference subtype must be in 1..{n_strata}")
            tau[self.ref - 1] = np.inf
        elif self.strategy == "pooled":
            tau[:] = np.inf
        elif self.strategy == "indep":
            tau[:] = 1.0
        return tau


@dataclass
class SharedFit:
    """Fitted shared/deviation decomposition for a matched model.

    ``delta`` always equals ``mu + gamma`` row-wise.  ``tau`` records the
    effective deviation weights (inf marks rows pinned to zero).
    """

    mu: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    objective: float
    kkt_residual: float
    lam: float
    strategy: str
    tau: np.ndarray
    converged: bool = True
    iterations: int = 0
    ref: int | None = None

    @property
    def n_strata(self):
        return self.gamma.shape[0]


def cond_nll(diff: DiffMatrix, delta) -> float:
    """Within-pair log-loss at stacked coefficients (delta_1..delta_{K-1}).

    Overflow-safe: each term is log(1 + exp(z)) evaluated through
    ``logaddexp``, which switches to the linear asymptote for large z.
    """
    D = _as_delta_matrix(diff, delta)
    total = 0.0
    for k, b in enumerate(diff.blocks):
        total += float(np.logaddexp(0.0, b @ D[k]).sum())
    return total


def cond_nll_grad(diff: DiffMatrix, delta) -> np.ndarray:
    """Gradient of :func:`cond_nll` with respect to the stacked vector."""
    D = _as_delta_matrix(diff, delta)
    out = np.empty_like(D)
    for k, b in enumerate(diff.blocks):
        out[k] = b.T @ expit(b @ D[k])
    return out.ravel()


def _as_delta_matrix(diff, delta):
    D = np.asarray(delta, dtype=float)
    s, p = diff.n_strata, diff.p
    if D.shape == (s * p,):
        D = D.reshape(s, p)
    if D.shape != (s, p):
        raise ValueError(f"delta must have {s * p} entries ({s} x {p})")
    return D


class LogisticSumObjective:
    """``sum_i log(1 + exp((A beta)_i))`` composed with a fixed design."""

    def __init__(self, design):
        self.design = np.ascontiguousarray(design, dtype=float)
        self.dim = self.design.shape[1]

    def value(self, beta):
        return float(np.logaddexp(0.0, self.design @ beta).sum())

    def value_and_grad(self, beta):
        z = self.design @ beta
        return float(np.logaddexp(0.0, z).sum()), self.design.T @ expit(z)

    def gradient(self, beta):
        return self.design.T @ expit(self.design @ beta)

    def restrict(self, indices):
        return LogisticSumObjective(self.design[:, indices])

    def cd_refine(self, x, lam, w, sweeps, tol=1e-9):
        """Cyclic coordinate sweeps solving each 1-D subproblem.

        A prox-Newton step with the exact local curvature handles the
        well-conditioned coordinates in one evaluation; coordinates in
        exponentially flat regions (near-separated fits) fall back to a
        bracketed bisection on the 1-D subgradient equation.  Sweeps never
        increase the penalized objective.
        """
        A = self.design
        sq = A * A
        x = x.copy()
        z = A @ x
        for _ in range(sweeps):
            moved = 0.0
            sig = expit(z)
            for j in range(self.dim):
                col = A[:, j]
                g = float(col @ sig)
                t = lam * w[j]
                if x[j] != 0.0:
                    viol = abs(g + t * np.sign(x[j]))
                else:
                    viol = max(abs(g) - t, 0.0)
                if viol <= 0.25 * tol:
                    continue
                h = float(sq[:, j] @ (sig * (1.0 - sig)))
                u = None
                if h > 1e-10:
                    cand = float(soft_threshold(x[j] - g / h, t / h))
                    z_c = z + col * (cand - x[j])
                    s_c = float(col @ expit(z_c))
                    if cand != 0.0:
                        viol_c = abs(s_c + t * np.sign(cand))
                    else:
                        viol_c = max(abs(s_c) - t, 0.0)
                    if viol_c <= 0.5 * viol:
                        u = cand
                if u is None:
                    u = self._cd_root(col, z, x[j], t)
                d = u - x[j]
                if d != 0.0:
                    z = z + col * d
                    x[j] = u
                    moved = max(moved, abs(d))
                    sig = expit(z)
            if moved == 0.0:
                break
        return x

    def _cd_root(self, col, z, xj, t):
        """Exact minimizer of the 1-D restriction via bracketed bisection.

        The smooth part's derivative ``s(u) = col' sigmoid(z + col (u -
        xj))`` is increasing; the minimizer is 0 when ``|s(0)| <= t`` and
        otherwise the root of ``s(u) + t * sign(u)``.
        """

        def deriv(u):
            return float(col @ expit(z + col * (u - xj)))

        s0 = deriv(0.0)
        if abs(s0) <= t:
            return 0.0
        step = max(1.0, 2.0 * abs(xj))
        if s0 < -t:
            # minimizer is positive: root of s(u) + t, increasing in u
            shift = t
            lo, hi = 0.0, step
            for _ in range(80):
                if deriv(hi) + shift > 0 or hi > 1e10:
                    break
                hi *= 2.0
        else:
            # minimizer is negative: root of s(u) - t
            shift = -t
            lo, hi = -step, 0.0
            for _ in range(80):
                if deriv(lo) + shift < 0 or lo < -1e10:
                    break
                lo *= 2.0
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            if deriv(mid) + shift > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-13 * (1.0 + abs(lo) + abs(hi)):
                break
        return 0.5 * (lo + hi)


def augment_design(diff: DiffMatrix, tau) -> np.ndarray:
    """Augmented design realizing the shared/deviation decomposition.

    Shape ``(m, K * p)``: the leading column block stacks every stratum's
    differences (it multiplies mu); column block k holds stratum k's
    differences divided by tau_k in its own rows and zeros elsewhere (it
    multiplies tau_k * gamma_k).  All tau entries must be finite and
    positive; infinite values are handled by the caller through column
    pinning.
    """
    tau = np.asarray(tau, dtype=float)
    s, p, m = diff.n_strata, diff.p, diff.n_pairs
    if tau.shape != (s,):
        raise ValueError(f"tau must have one entry per stratum ({s})")
    if np.any(tau <= 0) or not np.all(np.isfinite(tau)):
        raise ValueError("augment_design requires finite positive tau")
    out = np.zeros((m, (s + 1) * p))
    row = 0
    for k, b in enumerate(diff.blocks):
        mk = b.shape[0]
        out[row:row + mk, :p] = b
        out[row:row + mk, (k + 1) * p:(k + 2) * p] = b / tau[k]
        row += mk
    return out


def recover_estimates(mu, gamma_tilde, tau, *, lam=np.nan, objective=np.nan,
                      kkt_residual=np.nan, strategy="datashared",
                      converged=True, iterations=0, ref=None) -> SharedFit:
    """Map augmented-design coefficients back to the decomposition.

    The solved vector on the augmented design is (mu, tau_1 * gamma_1,
    ..., tau_{K-1} * gamma_{K-1}); deviations are recovered as
    ``gamma_k = gamma_tilde_k / tau_k`` and ``delta_k = mu + gamma_k``.
    """
    mu = np.asarray(mu, dtype=float)
    gt = np.atleast_2d(np.asarray(gamma_tilde, dtype=float))
    tau = np.asarray(tau, dtype=float)
    if gt.shape[1] != mu.shape[0] or tau.shape != (gt.shape[0],):
        raise ValueError("mu, gamma_tilde and tau dimensions disagree")
    with np.errstate(invalid="ignore"):
        gamma = np.where(np.isfinite(tau)[:, None], gt / np.where(
            np.isfinite(tau), tau, 1.0)[:, None], 0.0)
    delta = mu[None, :] + gamma
    return SharedFit(mu=mu, gamma=gamma, delta=delta, objective=objective,
                     kkt_residual=kkt_residual, lam=lam, strategy=strategy,
                     tau=tau, converged=converged, iterations=iterations,
                     ref=ref)


def fit_matched(d: MatchedDataset, spec: PenaltySpec, init=None,
                tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                strict=False) -> SharedFit:
    """Fit one of the four strategies on a matched dataset.

    ``init`` warm-starts the solver with the packed coefficients of a
    previous fit of the same strategy (see :func:`pack_coefficients`).
    With ``strict`` a non-converged solve raises instead of being flagged
    on the returned fit.
    """
    diff = build_diff_matrix(d)
    return fit_matched_diff(diff, spec, init=init, tol=tol,
                            max_iter=max_iter, strict=strict)


def fit_matched_diff(diff: DiffMatrix, spec: PenaltySpec, init=None,
                     tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                     strict=False) -> SharedFit:
    """Same as :func:`fit_matched` but starting from difference blocks."""
    s, p = diff.n_strata, diff.p
    tau = spec.tau_vector(s)
    if spec.strategy == "indep":
        fit = _fit_indep(diff, spec.lam, init, tol, max_iter)
    else:
        fit = _fit_shared(diff, spec.lam, tau, spec.strategy, init, tol,
                          max_iter, ref=spec.ref)
    if strict and not fit.converged:
        from .errors import ConvergenceError
        raise ConvergenceError(
            f"{spec.strategy} fit did not converge: KKT residual "
            f"{fit.kkt_residual:.3e} after {fit.iterations} iterations")
    return fit


def _fit_indep(diff, lam, init, tol, max_iter):
    s, p = diff.n_strata, diff.p
    init = None if init is None else np.asarray(init, dtype=float).reshape(s, p)
    delta = np.zeros((s, p))
    resid, iters, ok = 0.0, 0, True
    for k, b in enumerate(diff.blocks):
        rep = solve_l1(LogisticSumObjective(b), np.ones(p), lam,
                       init=None if init is None else init[k],
                       tol=tol, max_iter=max_iter)
        delta[k] = rep.coefficients
        resid = max(resid, rep.kkt_residual)
        iters += rep.iterations
        ok = ok and rep.converged
    mu = np.zeros(p)
    return SharedFit(mu=mu, gamma=delta, delta=delta.copy(),
                     objective=_shared_objective(diff, mu, delta, lam,
                                                 np.ones(s)),
                     kkt_residual=resid, lam=lam, strategy="indep",
                     tau=np.ones(s), converged=ok, iterations=iters)


def _fit_shared(diff, lam, tau, strategy, init, tol, max_iter, ref=None):
    s, p = diff.n_strata, diff.p
    finite = np.isfinite(tau)
    tau_fill = np.where(finite, tau, 1.0)
    design = augment_design(diff, tau_fill)
    weights = np.ones((s + 1) * p)
    for k in range(s):
        if not finite[k]:
            weights[(k + 1) * p:(k + 2) * p] = np.inf
    obj = LogisticSumObjective(design)
    rep = solve_l1(obj, weights, lam, init=init, tol=tol, max_iter=max_iter)
    used = rep.iterations
    coefs = rep.coefficients
    resid = rep.kkt_residual
    canonical = strategy == "datashared" and bool(np.all(finite))
    if canonical:
        for _ in range(3):
            shifted = _canonical_coefs(coefs, tau, s, p)
            if np.array_equal(shifted, coefs):
                break
            g = obj.gradient(shifted)
            resid = _kkt(g, shifted, lam, weights)
            coefs = shifted
            if resid <= tol or used >= max_iter:
                break
            rep = solve_l1(obj, weights, lam, init=coefs, tol=tol,
                           max_iter=max_iter - used)
            coefs, resid = rep.coefficients, rep.kkt_residual
            used += rep.iterations
    mu = coefs[:p]
    gamma_tilde = coefs[p:].reshape(s, p)
    fit = recover_estimates(mu, gamma_tilde, tau, lam=lam,
                            kkt_residual=resid, strategy=strategy,
                            converged=bool(resid <= tol), iterations=used,
                            ref=ref)
    fit.objective = _shared_objective(diff, fit.mu, fit.gamma, lam, tau)
    return fit


def _canonical_coefs(coefs, tau, s, p):
    """Shift each covariate along its penalty-flat direction.

    The shared coefficient becomes the weighted median of
    {0 (weight 1), delta_k (weight tau_k)}; deltas are unchanged.
    """
    mu = coefs[:p].copy()
    gamma_tilde = coefs[p:].reshape(s, p).copy()
    delta = mu[None, :] + gamma_tilde / tau[:, None]
    w = np.concatenate([[1.0], tau])
    for j in range(p):
        u = l1_center(np.concatenate([[0.0], delta[:, j]]), w)
        mu[j] = u
        gamma_tilde[:, j] = (delta[:, j] - u) * tau
    return np.concatenate([mu, gamma_tilde.ravel()])


def _shared_objective(diff, mu, gamma, lam, tau):
    delta = mu[None, :] + gamma
    finite = np.isfinite(tau)
    pen = np.abs(mu).sum() + float(
        (tau[finite] * np.abs(gamma[finite]).sum(axis=1)).sum())
    return cond_nll(diff, delta.ravel()) + lam * pen


def pack_coefficients(fit: SharedFit) -> np.ndarray:
    """Solver-space coefficients of a fit, usable as a warm start."""
    if fit.strategy == "indep":
        return fit.delta.ravel().copy()
    tau_fill = np.where(np.isfinite(fit.tau), fit.tau, 1.0)
    return np.concatenate([fit.mu, (fit.gamma * tau_fill[:, None]).ravel()])


def lambda_max_matched(d, spec: PenaltySpec) -> float:
    """Penalty anchor for a strategy: above it every coefficient is zero."""
    diff = d if isinstance(d, DiffMatrix) else build_diff_matrix(d)
    s, p = diff.n_strata, diff.p
    if spec.strategy == "indep":
        return max(lambda_max(LogisticSumObjective(b), np.ones(p))
                   for b in diff.blocks)
    tau = spec.tau_vector(s)
    finite = np.isfinite(tau)
    design = augment_design(diff, np.where(finite, tau, 1.0))
    weights = np.ones((s + 1) * p)
    for k in range(s):
        if not finite[k]:
            weights[(k + 1) * p:(k + 2) * p] = np.inf
    return lambda_max(LogisticSumObjective(design), weights)
