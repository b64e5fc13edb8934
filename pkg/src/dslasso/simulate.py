"""Synthetic data generators for the matched and unmatched designs.

Covariates are multivariate Gaussian with covariance
``Sigma[i, j] = 0.25^2 * 0.3^|i - j|``.  A random subset J1 of covariates
carries signal; outside J1 every true coefficient is zero.  Four
configurations grade how much the per-subtype coefficient vectors differ
on J1 (K is the total number of outcome categories, subtypes plus
controls):

1. full homogeneity    -- delta_kj = s_j * delta for every subtype k,
2. weak heterogeneity  -- one randomly chosen subtype per covariate is
                          perturbed,
3. moderate            -- three distinct subtypes perturbed,
4. full heterogeneity  -- every subtype perturbed.

Signs ``s`` are Rademacher; a perturbed entry is s * delta * (1 + U) with
an independent sign and U uniform on [sqrt(K)/2, 2 sqrt(K)].

Matched data: pairs are assigned to subtype strata with the configured
sizes, both members draw covariates independently, and the first member
is labeled the case with probability 1 / (1 + exp(delta_k' (x_a - x_b))).
Datasets store the case first in every pair.

Unmatched data: outcomes follow the reference-formulation multinomial
model with intercepts calibrated by a Monte-Carlo fixed point so the
marginal category probabilities hit their targets (controls 0.5; case
categories spread linearly over [0.05, 0.2] and rescaled to sum to 0.5).

All output is a pure function of the configuration (including its seed);
replicate r of a study derives its child seed from (seed, r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import expit, softmax

from .errors import DataError
from .matched import MatchedDataset
from .multinom import UnmatchedDataset

__all__ = [
    "SimConfig",
    "GroundTruth",
    "gen_covariance",
    "gen_truth",
    "gen_matched",
    "gen_unmatched",
    "child_rng",
]

DEFAULT_STRATA = (200, 100, 50, 50, 50, 50)
DELTA_LEVELS = (0.4, 1.0, 2.0, 3.0)


@dataclass
class SimConfig:
    """Design of one synthetic study.

    For the matched setting ``strata_sizes`` gives the pairs per subtype
    stratum (so K - 1 entries and n = 2 * sum(strata_sizes)); for the
    unmatched setting ``n`` observations are drawn with K categories.
    """

    setting: str = "matched"
    config: int = 1
    delta: float = 1.0
    p: int = 100
    K: int = 7
    n: int | None = None
    strata_sizes: tuple = DEFAULT_STRATA
    j1_size: int | None = None
    seed: int = 0
    config2_shared_sign: bool = True

    def __post_init__(self):
        if self.setting not in ("matched", "unmatched"):
            raise ValueError("setting must be matched or unmatched")
        if self.config not in (1, 2, 3, 4):
            raise ValueError("config must be 1..4")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.setting == "matched":
            self.strata_sizes = tuple(int(m) for m in self.strata_sizes)
            if len(self.strata_sizes) != self.K - 1:
                # a custom K overrides the default stratum layout
                if self.strata_sizes == DEFAULT_STRATA:
                    raise ValueError(
                        f"K={self.K} needs {self.K - 1} strata sizes")
                raise ValueError("strata_sizes must have K - 1 entries")
            if any(m < 1 for m in self.strata_sizes):
                raise ValueError("every stratum needs at least one pair")
            expected = 2 * sum(self.strata_sizes)
            if self.n is None:
                self.n = expected
            elif self.n != expected:
                raise ValueError(
                    f"n={self.n} inconsistent with strata sizes "
                    f"(2 * {sum(self.strata_sizes)} = {expected})")
        else:
            if self.n is None:
                self.n = 1000
        if self.j1_size is None:
            self.j1_size = min(10, self.p // 2)
        if not (0 < self.j1_size <= self.p):
            raise ValueError("j1_size must be in 1..p")
        if self.K < 2:
            raise ValueError("K must be >= 2")

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence(self.seed))


def child_rng(seed, replicate):
    """Deterministic generator for one replicate of a seeded study."""
    return np.random.default_rng(np.random.SeedSequence([int(seed),
                                                         int(replicate)]))


@dataclass
class GroundTruth:
    """True coefficients behind one synthetic dataset."""

    delta_star: np.ndarray          # (K-1, p), reference-formulation scale
    j1: np.ndarray                  # sorted signal covariate indices
    het_mask: np.ndarray            # per covariate: rows not all equal
    config: int
    delta: float
    intercepts: np.ndarray | None = None   # unmatched only
    targets: np.ndarray | None = None      # marginal category targets


def gen_covariance(p: int) -> np.ndarray:
    """Banded covariance 0.25^2 * 0.3^|i-j|; symmetric positive definite."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return 0.25 ** 2 * toeplitz(0.3 ** np.arange(p))


def gen_truth(cfg: SimConfig, rng=None) -> GroundTruth:
    """Draw the true coefficient matrix for one configuration."""
    rng = cfg.rng() if rng is None else rng
    s, p, K = cfg.K - 1, cfg.p, cfg.K
    j1 = np.sort(rng.choice(p, size=cfg.j1_size, replace=False))
    signs = rng.choice([-1.0, 1.0], size=p)
    D = np.zeros((s, p))
    lo, hi = np.sqrt(K) / 2.0, 2.0 * np.sqrt(K)

    def perturbed(n_draws):
        sign = rng.choice([-1.0, 1.0], size=n_draws)
        u = rng.uniform(lo, hi, size=n_draws)
        return sign * cfg.delta * (1.0 + u)

    for j in j1:
        if cfg.config == 1:
            D[:, j] = signs[j] * cfg.delta
        elif cfg.config == 2:
            kj = rng.integers(s)
            if cfg.config2_shared_sign:
                D[:, j] = signs[j] * cfg.delta
            else:
                D[:, j] = rng.choice([-1.0, 1.0], size=s) * cfg.delta
            D[kj, j] = perturbed(1)[0]
        elif cfg.config == 3:
            ks = rng.choice(s, size=min(3, s), replace=False)
            D[:, j] = signs[j] * cfg.delta
            D[ks, j] = perturbed(len(ks))
        else:
            D[:, j] = perturbed(s)
    het = np.array([not np.all(D[:, j] == D[0, j]) for j in range(p)])
    return GroundTruth(delta_star=D, j1=j1, het_mask=het, config=cfg.config,
                       delta=cfg.delta)


def _draw_gaussian(rng, n, chol):
    return rng.standard_normal((n, chol.shape[0])) @ chol.T


def gen_matched(cfg: SimConfig, rng=None, return_assignment=False):
    """Matched dataset plus its ground truth.

    With ``return_assignment`` also returns, per stratum, a boolean array
    telling whether the first-drawn member ended up being the case.
    """
    if cfg.setting != "matched":
        raise ValueError("gen_matched needs a matched configuration")
    rng = cfg.rng() if rng is None else rng
    truth = gen_truth(cfg, rng)
    chol = np.linalg.cholesky(gen_covariance(cfg.p))
    case, control, assignment = [], [], []
    for k, m_k in enumerate(cfg.strata_sizes):
        xa = _draw_gaussian(rng, m_k, chol)
        xb = _draw_gaussian(rng, m_k, chol)
        p_first = expit(-((xa - xb) @ truth.delta_star[k]))
        a_is_case = rng.random(m_k) < p_first
        case.append(np.where(a_is_case[:, None], xa, xb))
        control.append(np.where(a_is_case[:, None], xb, xa))
        assignment.append(a_is_case)
    d = MatchedDataset(case, control)
    if return_assignment:
        return d, truth, assignment
    return d, truth


def marginal_targets(K: int) -> np.ndarray:
    """Target marginal probabilities: controls 0.5, cases a linear ramp
    over [0.05, 0.2] rescaled to total 0.5."""
    if K == 2:
        ramp = np.array([0.5])
    else:
        ramp = np.linspace(0.05, 0.2, K - 1)
        ramp = ramp * (0.5 / ramp.sum())
    return np.concatenate([ramp, [0.5]])


def calibrate_intercepts(delta_star, chol, targets, rng, mc_size=100_000,
                         max_iter=100, tol=5e-4):
    """Intercepts making the marginal category probabilities hit their
    targets, by fixed-point iteration on a fixed Monte-Carlo sample."""
    s = delta_star.shape[0]
    Z = _draw_gaussian(rng, mc_size, chol)
    scores = Z @ delta_star.T
    alpha = np.log(targets[:s] / targets[s])
    for _ in range(max_iter):
        P = softmax(np.hstack([scores + alpha[None, :],
                               np.zeros((mc_size, 1))]), axis=1)
        marg = P.mean(axis=0)
        if np.max(np.abs(marg - targets)) < tol:
            return alpha
        alpha = alpha + np.log(targets[:s] / marg[:s])
    raise DataError("intercept calibration did not converge within "
                    f"{max_iter} iterations")


def gen_unmatched(cfg: SimConfig, rng=None, targets=None):
    """Unmatched dataset plus ground truth with calibrated intercepts."""
    if cfg.setting != "unmatched":
        raise ValueError("gen_unmatched needs an unmatched configuration")
    rng = cfg.rng() if rng is None else rng
    truth = gen_truth(cfg, rng)
    chol = np.linalg.cholesky(gen_covariance(cfg.p))
    targets = marginal_targets(cfg.K) if targets is None \
        else np.asarray(targets, dtype=float)
    if targets.shape != (cfg.K,) or abs(targets.sum() - 1.0) > 1e-9:
        raise ValueError("targets must be K probabilities summing to 1")
    alpha = calibrate_intercepts(truth.delta_star, chol, targets, rng)
    X = _draw_gaussian(rng, cfg.n, chol)
    scores = np.hstack([X @ truth.delta_star.T + alpha[None, :],
                        np.zeros((cfg.n, 1))])
    P = softmax(scores, axis=1)
    u = rng.random(cfg.n)
    y = 1 + (P.cumsum(axis=1) < u[:, None]).sum(axis=1)
    y = np.minimum(y, cfg.K)
    truth.intercepts = alpha
    truth.targets = targets
    return UnmatchedDataset(X, y, K=cfg.K, with_intercept=True), truth
