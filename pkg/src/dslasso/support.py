"""Shared definition of a coefficient's zero/nonzero status.

Every consumer of support patterns (recovery metrics, model-complexity
counts, degrees of freedom) uses the same magnitude threshold so their
notions of "zero" agree.
"""

import numpy as np

SUPPORT_EPS = 1e-8


def support_mask(coef, eps=SUPPORT_EPS):
    """Boolean mask of entries with magnitude above ``eps``."""
    return np.abs(np.asarray(coef, dtype=float)) > eps


def support_size(coef, eps=SUPPORT_EPS):
    """Number of entries with magnitude above ``eps``."""
    return int(np.count_nonzero(support_mask(coef, eps)))
