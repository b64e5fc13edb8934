"""Evaluation criteria: support recovery, heterogeneity identification,
prediction error.

All support decisions use the shared magnitude threshold from
:mod:`dslasso.support`.  The two accuracy criteria compare an estimated
(K-1) x p coefficient matrix in the reference-formulation scale against
the true one:

* ``acc_support`` -- fraction of entries whose zero/nonzero status is
  right.  With ``per_covariate`` a covariate counts as one unit and is
  correct only when its whole column's status matches.
* ``acc_het`` -- for every covariate and every unordered pair of
  subtypes, whether the two coefficients differ is compared between
  estimate and truth; the score is the matching fraction.

Prediction error is model-specific.  Matched: each held-out pair is shown
in a random order and the fitted within-pair probability picks which
member is the case (ties predict the first member shown); the error is
the misclassification rate.  Unmatched: highest-probability category
against the observed one (ties to the lowest index), plus twice the mean
negative log-probability of the observed categories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .matched import MatchedDataset, SharedFit
from .multinom import MultinomFit, UnmatchedDataset
from .support import SUPPORT_EPS, support_mask

__all__ = [
    "MetricsReport",
    "acc_support",
    "acc_het",
    "pred_err_matched",
    "pred_err_unmatched",
    "evaluate_matched",
    "evaluate_unmatched",
]


@dataclass
class MetricsReport:
    acc_s: float
    acc_h: float
    pred_err: float
    deviance: float | None = None
    counts: dict | None = None


def _check_shapes(est, truth_matrix):
    est = np.atleast_2d(np.asarray(est, dtype=float))
    tru = np.atleast_2d(np.asarray(truth_matrix, dtype=float))
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {tru.shape}")
    return est, tru


def acc_support(est, truth, eps=SUPPORT_EPS, per_covariate=False) -> float:
    """Fraction of coefficient entries with the correct zero status."""
    tru = truth.delta_star if hasattr(truth, "delta_star") else truth
    est, tru = _check_shapes(est, tru)
    match = support_mask(est, eps) == support_mask(tru, eps)
    if per_covariate:
        return float(match.all(axis=0).mean())
    return float(match.mean())


def acc_het(est, truth, eps=SUPPORT_EPS, per_covariate=False) -> float:
    """Agreement on which subtype pairs differ, per covariate."""
    tru = truth.delta_star if hasattr(truth, "delta_star") else truth
    est, tru = _check_shapes(est, tru)
    s = est.shape[0]
    if s < 2:
        raise ValueError("heterogeneity needs at least two subtypes")
    iu, ju = np.triu_indices(s, k=1)
    diff_est = np.abs(est[iu] - est[ju]) > eps     # (pairs, p)
    diff_tru = np.abs(tru[iu] - tru[ju]) > eps
    match = diff_est == diff_tru
    if per_covariate:
        return float(match.all(axis=0).mean())
    return float(match.mean())


def pred_err_matched(fit: SharedFit, test: MatchedDataset, rng=None) -> float:
    """Within-pair case-identification error on held-out pairs.

    Pairs are presented in a random order (seeded; pass an rng for
    control): the prediction is "the first member shown is the case" when
    the fitted probability is at least one half, and the truth is known
    from the dataset's case-first storage.
    """
    if fit.delta.shape[0] != test.n_strata:
        raise ValueError("fit and test stratum counts disagree")
    rng = np.random.default_rng(0) if rng is None else rng
    wrong = 0
    total = 0
    for k in range(test.n_strata):
        d = test.case[k] - test.control[k]
        flip = rng.random(d.shape[0]) < 0.5
        shown = np.where(flip[:, None], -d, d)
        prob_first = expit(-(shown @ fit.delta[k]))
        predict_first = prob_first >= 0.5
        truth_first = ~flip
        wrong += int(np.count_nonzero(predict_first != truth_first))
        total += d.shape[0]
    return wrong / total


def pred_err_unmatched(fit: MultinomFit, test: UnmatchedDataset):
    """(misclassification rate, mean deviance) on held-out observations."""
    if fit.K != test.K:
        raise ValueError("fit and test category counts disagree")
    P = fit.predict_proba(test.X)
    picked = np.argmax(P, axis=1) + 1
    mis = float(np.mean(picked != test.y))
    dev = -2.0 * float(np.log(P[np.arange(test.n), test.y - 1]).mean())
    return mis, dev


def evaluate_matched(fit: SharedFit, truth, test: MatchedDataset,
                     rng=None) -> MetricsReport:
    a_s = acc_support(fit.delta, truth)
    a_h = acc_het(fit.delta, truth)
    err = pred_err_matched(fit, test, rng=rng)
    return MetricsReport(acc_s=a_s, acc_h=a_h, pred_err=err,
                         counts={"pairs": test.n_pairs})


def evaluate_unmatched(fit: MultinomFit, truth,
                       test: UnmatchedDataset) -> MetricsReport:
    est = fit.delta_vs_controls()
    a_s = acc_support(est, truth)
    a_h = acc_het(est, truth)
    mis, dev = pred_err_unmatched(fit, test)
    return MetricsReport(acc_s=a_s, acc_h=a_h, pred_err=mis, deviance=dev,
                         counts={"observations": test.n})
