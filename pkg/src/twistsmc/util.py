"""Small numeric helpers used throughout the library.

All probability arithmetic is done in log space; sums of exponentials go
through max-shifted accumulation (scipy's logsumexp) so that weights spanning
many orders of magnitude stay representable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

__all__ = ["logsumexp", "logmeanexp", "log_normalize", "normalized_from_log"]


def logmeanexp(log_values) -> float:
    """log of the arithmetic mean of exp(log_values)."""
    lv = np.asarray(log_values, dtype=float)
    return float(logsumexp(lv) - np.log(lv.size))


def log_normalize(log_weights) -> np.ndarray:
    """Shift log weights so that their exponentials sum to one."""
    lw = np.asarray(log_weights, dtype=float)
    return lw - logsumexp(lw)


def normalized_from_log(log_weights) -> np.ndarray:
    """Linear-space normalized weights from log weights."""
    return np.exp(log_normalize(log_weights))
