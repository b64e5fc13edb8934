"""Regularization paths and model selection (cross-validation and BIC).

Both selection procedures share one refit mechanism: after choosing a
penalty, the model is refit without penalty on the selected support (the
"hybrid" refit), so the reported coefficients are maximum-likelihood on
the chosen sparsity pattern.

* ``select_bic`` walks the path, refits every support, and scores
  ``2 * total_nll + df * log(n_units)`` with df the support size in the
  fitted parameterization (shared/deviation coordinates for the
  data-shared strategies) and n_units the number of independent
  likelihood terms (pairs for matched data, observations otherwise).
* ``select_cv`` picks the penalty minimizing the mean held-out log-loss
  over stratified folds (folds never split a pair and are balanced within
  each stratum/category), then refits on the full data at the chosen
  penalty and applies the hybrid refit to its support.

Ties in either criterion resolve toward the larger penalty.  Fold
assignment is a pure function of the seed, so results do not depend on
execution order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .matched import (LogisticSumObjective, MatchedDataset, PenaltySpec,
                      SharedFit, augment_design, build_diff_matrix, cond_nll,
                      fit_matched_diff, lambda_max_matched,
                      pack_coefficients, recover_estimates)
from .multinom import (FORMULATIONS, MultinomFit, UnmatchedDataset,
                       _penalty_weights, _RefObjective, _SharedRefObjective,
                       _SymObjective, fit_multinom_datashared_ref,
                       fit_multinom_sparse_ref, fit_multinom_sparse_sym,
                       lambda_max_multinom)
from .solver import DEFAULT_TOL, solve_l1
from .support import SUPPORT_EPS

__all__ = [
    "LambdaGrid",
    "PathResult",
    "SelectionResult",
    "lambda_grid",
    "make_grid",
    "fit_path",
    "hybrid_refit",
    "select_bic",
    "select_cv",
    "driver_for",
]

logger = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-6
SEPARATION_BOUND = 50.0


@dataclass
class LambdaGrid:
    """Strictly descending geometric penalty grid."""

    values: np.ndarray
    anchor: float
    ratio: float

    @property
    def count(self):
        return len(self.values)


def make_grid(anchor, count=100, ratio=1e-3) -> LambdaGrid:
    """Geometric grid from ``anchor`` down to ``anchor * ratio``."""
    if count < 2:
        raise ValueError("count must be >= 2")
    if not (0 < ratio < 1):
        raise ValueError("ratio must lie strictly between 0 and 1")
    if anchor <= 0:
        raise DataError("penalty anchor is zero; the data carry no signal "
                        "for a grid")
    return LambdaGrid(values=anchor * np.geomspace(1.0, ratio, count),
                      anchor=anchor, ratio=ratio)


def lambda_grid(data, spec, count=100, ratio=1e-3) -> LambdaGrid:
    """Grid anchored at the strategy's own penalty anchor."""
    return make_grid(driver_for(data, spec).anchor(), count, ratio)


@dataclass
class PathResult:
    grid: LambdaGrid
    fits: list
    support_sizes: list
    converged: list
    warm_started: bool
    driver: object = field(repr=False, default=None)

    def n_failures(self):
        return sum(1 for c in self.converged if not c)


@dataclass
class SelectionResult:
    method: str
    chosen_lambda: float
    chosen_index: int
    criterion_curve: np.ndarray
    grid: LambdaGrid
    final_fit: object
    support: np.ndarray
    ridge_fallback: bool = False
    fold_curves: np.ndarray | None = None
    refit_nlls: np.ndarray | None = None
    dfs: np.ndarray | None = None
    stored_fits: list | None = None


class _MatchedDriver:
    """Fit/refit plumbing for one matched strategy on one dataset."""

    kind = "matched"

    def __init__(self, data: MatchedDataset, spec: PenaltySpec):
        self.data = data
        self.spec = spec
        self.diff = build_diff_matrix(data)
        self.tau = spec.tau_vector(self.diff.n_strata)

    def anchor(self):
        return lambda_max_matched(self.diff, self.spec)

    def fit(self, lam, init=None, tol=DEFAULT_TOL, max_iter=None):
        spec = PenaltySpec(lam=lam, strategy=self.spec.strategy,
                           ref=self.spec.ref, tau=self.spec.tau)
        kw = {} if max_iter is None else {"max_iter": max_iter}
        return fit_matched_diff(self.diff, spec, init=init, tol=tol, **kw)

    def warm_vector(self, fit):
        return pack_coefficients(fit)

    def support_of(self, fit):
        """Nonzero coordinates in the full (mu, gamma) parameterization
        (pinned blocks are exactly zero and never appear)."""
        if self.spec.strategy == "indep":
            vec = fit.delta.ravel()
        else:
            vec = np.concatenate([fit.mu, fit.gamma.ravel()])
        return np.flatnonzero(np.abs(vec) > SUPPORT_EPS)

    def n_units(self, data=None):
        return self.diff.n_pairs if data is None else data.n_pairs

    def total_nll(self, coef_or_fit, data=None):
        delta = coef_or_fit.delta if isinstance(coef_or_fit, SharedFit) \
            else coef_or_fit
        diff = self.diff if data is None else build_diff_matrix(data)
        return cond_nll(diff, np.asarray(delta).ravel())

    def _design_weights(self):
        s, p = self.diff.n_strata, self.diff.p
        if self.spec.strategy == "indep":
            return self.diff.block_diagonal(), np.ones(s * p)
        finite = np.isfinite(self.tau)
        design = augment_design(self.diff, np.ones(s))
        w = np.ones((s + 1) * p)
        for k in range(s):
            if not finite[k]:
                w[(k + 1) * p:(k + 2) * p] = np.inf
        return design, w

    def refit(self, support, tol=DEFAULT_TOL):
        """Unpenalized refit on the support; ridge fallback on separation.

        For the shared/deviation strategies the support lives in (mu,
        gamma) coordinates on the unit-scaled augmented design (the
        unpenalized objective does not depend on the deviation weights).
        """
        design, w = self._design_weights()
        pinned = np.isinf(w)
        coef, fallback = _smooth_refit(LogisticSumObjective(design), support,
                                       pinned, tol)
        return self._unpack(coef), fallback

    def _unpack(self, vec):
        s, p = self.diff.n_strata, self.diff.p
        if self.spec.strategy == "indep":
            delta = vec.reshape(s, p)
            return SharedFit(mu=np.zeros(p), gamma=delta, delta=delta.copy(),
                             objective=np.nan, kkt_residual=np.nan,
                             lam=0.0, strategy="indep", tau=np.ones(s))
        return recover_estimates(vec[:p], vec[p:].reshape(s, p),
                                 np.ones(s), lam=0.0,
                                 strategy=self.spec.strategy,
                                 ref=self.spec.ref)

    def fold_masks(self, folds, seed):
        """Per-stratum fold labels; every fold keeps every stratum."""
        for attempt in range(2):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), attempt]))
            labels = []
            ok = True
            for m_k in self.diff.pair_counts:
                perm = rng.permutation(m_k)
                lab = np.empty(m_k, dtype=int)
                lab[perm] = np.arange(m_k) % folds
                labels.append(lab)
                ok = ok and (np.bincount(lab, minlength=folds) > 0).all()
            if ok:
                return labels
        raise DataError(f"cannot build {folds} folds: a stratum has too "
                        "few pairs")

    def split(self, labels, fold):
        train = self.data.subset_pairs([lab != fold for lab in labels])
        valid = self.data.subset_pairs([lab == fold for lab in labels])
        return train, valid

    def valid_nll(self, fit, valid: MatchedDataset):
        diff = build_diff_matrix(valid)
        return cond_nll(diff, fit.delta.ravel()) / diff.n_pairs

    def subdriver(self, train):
        return _MatchedDriver(train, self.spec)


class _MultinomDriver:
    """Fit/refit plumbing for one multinomial formulation."""

    kind = "unmatched"

    def __init__(self, data: UnmatchedDataset, formulation, ref=None):
        if formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")
        self.data = data
        self.formulation = formulation
        self.ref = data.K if ref is None else int(ref)

    def anchor(self):
        return lambda_max_multinom(self.data, self.formulation, self.ref)

    def fit(self, lam, init=None, tol=DEFAULT_TOL, max_iter=None):
        kw = {"init": init, "tol": tol}
        if max_iter is not None:
            kw["max_iter"] = max_iter
        if self.formulation == "sparse_ref":
            return fit_multinom_sparse_ref(self.data, lam, ref=self.ref, **kw)
        if self.formulation == "sparse_sym":
            return fit_multinom_sparse_sym(self.data, lam, **kw)
        return fit_multinom_datashared_ref(self.data, lam, **kw)

    def warm_vector(self, fit: MultinomFit):
        wi = self.data.with_intercept

        def rows(coef, intercepts):
            return np.hstack([intercepts[:, None], coef]) if wi else coef

        if self.formulation == "datashared_ref":
            mu = np.concatenate([[fit.mu_intercept], fit.mu]) if wi else fit.mu
            gam = rows(fit.gamma, fit.gamma_intercepts)
            return np.concatenate([mu, gam.ravel()])
        return rows(fit.coef, fit.intercepts).ravel()

    def support_of(self, fit: MultinomFit):
        if self.formulation == "datashared_ref":
            vec = np.concatenate([fit.mu, fit.gamma.ravel()])
        else:
            vec = fit.coef.ravel()
        return np.flatnonzero(np.abs(vec) > SUPPORT_EPS)

    def n_units(self, data=None):
        return (self.data if data is None else data).n

    def total_nll(self, fit, data=None):
        data = self.data if data is None else data
        P = fit.predict_proba(data.X)
        return -float(np.log(P[np.arange(data.n), data.y - 1]).sum())

    def _objective_weights(self, data):
        Xt = data.design()
        if self.formulation == "sparse_ref":
            categories = [c for c in range(1, data.K + 1) if c != self.ref]
            relabel = np.empty(data.K + 1, dtype=int)
            for i, c in enumerate(categories):
                relabel[c] = i + 1
            relabel[self.ref] = data.K
            obj = _RefObjective(Xt, relabel[data.y], data.K)
            w = _penalty_weights(data.K - 1, Xt.shape[1], data.with_intercept)
        elif self.formulation == "sparse_sym":
            obj = _SymObjective(Xt, data.y, data.K)
            w = _penalty_weights(data.K, Xt.shape[1], data.with_intercept)
        else:
            obj = _SharedRefObjective(Xt, data.y, data.K)
            w = _penalty_weights(data.K, Xt.shape[1], data.with_intercept)
        return obj, w

    def refit(self, support, tol=DEFAULT_TOL):
        """Unpenalized refit over support plus intercept coordinates."""
        obj, w = self._objective_weights(self.data)
        penalized = np.flatnonzero(w == 1.0)
        keep = np.zeros(obj.dim, dtype=bool)
        keep[np.flatnonzero(w == 0.0)] = True     # intercepts stay free
        keep[penalized[support]] = True
        coef, fallback = _smooth_refit(obj, np.flatnonzero(keep), None, tol)
        return self._unpack(coef), fallback

    def _unpack(self, theta):
        data = self.data
        Xt_cols = data.p + (1 if data.with_intercept else 0)

        def split(mat):
            if data.with_intercept:
                return mat[:, 1:], mat[:, 0].copy()
            return mat, None

        if self.formulation == "sparse_ref":
            D = theta.reshape(data.K - 1, Xt_cols)
            coef, intercepts = split(D)
            categories = [c for c in range(1, data.K + 1) if c != self.ref]
            return MultinomFit(formulation="sparse_ref", K=data.K, coef=coef,
                               intercepts=intercepts, lam=0.0,
                               objective=np.nan, kkt_residual=np.nan,
                               converged=True, iterations=0, ref=self.ref,
                               categories=categories)
        if self.formulation == "sparse_sym":
            B = theta.reshape(data.K, Xt_cols)
            coef, intercepts = split(B)
            return MultinomFit(formulation="sparse_sym", K=data.K, coef=coef,
                               intercepts=intercepts, lam=0.0,
                               objective=np.nan, kkt_residual=np.nan,
                               converged=True, iterations=0)
        mu_full = theta[:Xt_cols]
        gamma_full = theta[Xt_cols:].reshape(data.K - 1, Xt_cols)
        delta = mu_full[None, :] + gamma_full
        coef, intercepts = split(delta)
        gamma, gamma_int = split(gamma_full)
        mu, mu_int = (mu_full[1:], float(mu_full[0])) \
            if data.with_intercept else (mu_full, None)
        return MultinomFit(formulation="datashared_ref", K=data.K, coef=coef,
                           intercepts=intercepts, lam=0.0, objective=np.nan,
                           kkt_residual=np.nan, converged=True, iterations=0,
                           ref=data.K, mu=mu, gamma=gamma,
                           mu_intercept=mu_int, gamma_intercepts=gamma_int)

    def fold_masks(self, folds, seed):
        y = self.data.y
        for attempt in range(2):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), attempt]))
            lab = np.empty(len(y), dtype=int)
            for c in range(1, self.data.K + 1):
                idx = np.flatnonzero(y == c)
                perm = rng.permutation(len(idx))
                lab[idx[perm]] = np.arange(len(idx)) % folds
            ok = all((np.bincount(lab[y == c], minlength=folds) > 0).all()
                     for c in range(1, self.data.K + 1))
            if ok:
                return lab
        raise DataError(f"cannot build {folds} folds: a category has too "
                        "few observations")

    def split(self, labels, fold):
        return (self.data.subset(labels != fold),
                self.data.subset(labels == fold))

    def valid_nll(self, fit, valid: UnmatchedDataset):
        P = fit.predict_proba(valid.X)
        return -float(np.log(P[np.arange(valid.n), valid.y - 1]).mean())

    def subdriver(self, train):
        return _MultinomDriver(train, self.formulation, self.ref)


def driver_for(data, spec, ref=None):
    """Dispatch on dataset type; ``spec`` is a PenaltySpec for matched
    data or a formulation name for unmatched data."""
    if isinstance(data, MatchedDataset):
        if not isinstance(spec, PenaltySpec):
            spec = PenaltySpec(lam=0.0, strategy=spec, ref=ref)
        return _MatchedDriver(data, spec)
    if isinstance(data, UnmatchedDataset):
        name = spec.strategy if isinstance(spec, PenaltySpec) else spec
        return _MultinomDriver(data, name, ref)
    raise TypeError("data must be a MatchedDataset or UnmatchedDataset")


def _ridged(obj, strength):
    class _Ridged:
        dim = obj.dim

        def value(self, x):
            return obj.value(x) + 0.5 * strength * float(x @ x)

        def value_and_grad(self, x):
            v, g = obj.value_and_grad(x) if hasattr(obj, "value_and_grad") \
                else (obj.value(x), obj.gradient(x))
            return v + 0.5 * strength * float(x @ x), g + strength * x

        def gradient(self, x):
            return np.asarray(obj.gradient(x)) + strength * x

    return _Ridged()


def _smooth_refit(obj, keep, pinned, tol):
    """Unpenalized solve over the kept coordinates, zeros elsewhere.

    Detects separation (diverging coefficients or non-convergence) and
    falls back to a lightly ridge-stabilized solve, flagging it.
    """
    dim = obj.dim
    w = np.full(dim, np.inf)
    keep = np.asarray(keep, dtype=int)
    w[keep] = 0.0
    if pinned is not None:
        w[np.asarray(pinned, dtype=bool)] = np.inf
    if len(keep) == 0:
        return np.zeros(dim), False
    rep = solve_l1(obj, w, 0.0, tol=tol, max_iter=20_000)
    ok = rep.converged and np.max(np.abs(rep.coefficients)) < SEPARATION_BOUND
    if ok:
        return rep.coefficients, False
    logger.warning("refit unstable (converged=%s, max |coef| = %.2g); "
                   "retrying with ridge %.1e", rep.converged,
                   np.max(np.abs(rep.coefficients)), RIDGE_FALLBACK)
    rep = solve_l1(_ridged(obj, RIDGE_FALLBACK), w, 0.0, tol=tol,
                   max_iter=20_000)
    return rep.coefficients, True


def fit_path(data, spec, grid: LambdaGrid, tol=DEFAULT_TOL,
             max_iter_per_point=8000, ref=None, driver=None,
             warm_start=True) -> PathResult:
    """One fit per grid value, each warm-started from the previous one.

    Non-converged points are recorded (``converged``) and the path
    continues; their fits are still usable as warm starts and for
    validation scoring.
    """
    drv = driver_for(data, spec, ref) if driver is None else driver
    fits, sizes, conv = [], [], []
    init = None
    for lam in grid.values:
        fit = drv.fit(lam, init=init, tol=tol, max_iter=max_iter_per_point)
        fits.append(fit)
        sizes.append(len(drv.support_of(fit)))
        conv.append(bool(fit.converged))
        if warm_start:
            init = drv.warm_vector(fit)
    return PathResult(grid=grid, fits=fits, support_sizes=sizes,
                      converged=conv, warm_started=warm_start, driver=drv)


def hybrid_refit(data, support, spec, ref=None, tol=DEFAULT_TOL):
    """Unpenalized maximum-likelihood refit restricted to ``support``.

    Returns ``(fit, ridge_fallback_used)``.  The support indexes the
    penalized coordinates of the strategy's parameterization; intercepts
    (when the model has them) are always refit.
    """
    drv = driver_for(data, spec, ref)
    return drv.refit(np.asarray(support, dtype=int), tol=tol)


def select_bic(path: PathResult, keep_fits=False) -> SelectionResult:
    """Penalty minimizing ``2 * total_nll(refit) + df * log(n_units)``."""
    drv = path.driver
    n_units = drv.n_units()
    logn = np.log(n_units)
    curve = np.empty(path.grid.count)
    nlls = np.empty(path.grid.count)
    dfs = np.empty(path.grid.count, dtype=int)
    refits = []
    any_fallback = False
    for i, fit in enumerate(path.fits):
        support = drv.support_of(fit)
        refit, fb = drv.refit(support)
        any_fallback = any_fallback or fb
        nll = drv.total_nll(refit)
        nlls[i] = nll
        dfs[i] = len(support)
        curve[i] = 2.0 * nll + dfs[i] * logn
        refits.append(refit)
    best = int(np.argmin(curve))  # argmin takes the first, largest-lambda tie
    support = drv.support_of(path.fits[best])
    return SelectionResult(method="bic",
                           chosen_lambda=float(path.grid.values[best]),
                           chosen_index=best, criterion_curve=curve,
                           grid=path.grid, final_fit=refits[best],
                           support=support, ridge_fallback=any_fallback,
                           refit_nlls=nlls, dfs=dfs,
                           stored_fits=refits if keep_fits else None)


def select_cv(data, spec, folds=5, seed=0, count=100, ratio=1e-3,
              tol=DEFAULT_TOL, fold_tol=1e-6, ref=None,
              max_iter_per_point=8000, keep_fold_fits=False,
              grid=None) -> SelectionResult:
    """Two-stage selection: held-out log-loss picks the penalty, then the
    full-data fit at that penalty is refit unpenalized on its support.

    Fold fits use the (looser) ``fold_tol``: their only role is scoring
    held-out log-loss.  The final full-data fit uses ``tol``.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    drv = driver_for(data, spec, ref)
    if grid is None:
        grid = make_grid(drv.anchor(), count, ratio)
    labels = drv.fold_masks(folds, seed)
    fold_curves = np.empty((folds, grid.count))
    stored = [] if keep_fold_fits else None
    for f in range(folds):
        train, valid = drv.split(labels, f)
        sub = drv.subdriver(train)
        path = fit_path(None, None, grid, tol=fold_tol,
                        max_iter_per_point=max_iter_per_point, driver=sub)
        fold_curves[f] = [drv.valid_nll(fit, valid) for fit in path.fits]
        if keep_fold_fits:
            stored.append(path)
    curve = fold_curves.mean(axis=0)
    best = int(np.argmin(curve))
    lam_star = float(grid.values[best])
    full_fit = drv.fit(lam_star, tol=tol)
    support = drv.support_of(full_fit)
    final, fb = drv.refit(support)
    return SelectionResult(method="cv", chosen_lambda=lam_star,
                           chosen_index=best, criterion_curve=curve,
                           grid=grid, final_fit=final, support=support,
                           ridge_fallback=fb, fold_curves=fold_curves,
                           stored_fits=stored)
