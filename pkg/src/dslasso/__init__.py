"""Data-shared lasso and sparse multinomial logit for subtype case-control studies."""

__version__ = "0.1.0"

from .matched import (MatchedDataset, DiffMatrix, PenaltySpec, SharedFit,
                      build_diff_matrix, cond_nll, cond_nll_grad,
                      augment_design, recover_estimates, fit_matched,
                      lambda_max_matched)
from .solver import SolveReport, soft_threshold, solve_l1, lambda_max

__all__ = [
    "MatchedDataset", "DiffMatrix", "PenaltySpec", "SharedFit",
    "build_diff_matrix", "cond_nll", "cond_nll_grad", "augment_design",
    "recover_estimates", "fit_matched", "lambda_max_matched",
    "SolveReport", "soft_threshold", "solve_l1", "lambda_max",
]
