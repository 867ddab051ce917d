"""Exact optimal twist via backward recursion, and its value-function view.

The optimal twist satisfies psi*_T = g_T and

    psi*_t(x) = g_t(x) * sum_{x'} f_{t+1}(x'|x) psi*_{t+1}(x')

which renders every residual importance weight equal to Z: a zero-variance
sampler.  In log space the same recursion is a soft Bellman backup for the
soft values V*_t = alpha * log psi*_t.  These facts are the strongest oracle
in the library, so this module also ships the numerical checks for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fk import FkModel, exact_log_Z
from .twist import TwistFunction, build_twisted, residual_log_weights_batch
from .util import logsumexp


@dataclass(frozen=True)
class OptimalTwistResult:
    """Optimal twist, its soft values, and the log Z the recursion implies."""

    psi_star: TwistFunction
    soft_values: tuple[np.ndarray, ...]
    log_Z_from_recursion: float


def backward_recursion(model: FkModel) -> OptimalTwistResult:
    """Compute psi* exactly; log_Z_from_recursion equals exact_log_Z."""
    T = model.horizon
    log_psi = [None] * (T + 1)
    log_psi[T] = np.asarray(model.potential_log[T], dtype=float)
    for t in range(T - 1, -1, -1):
        log_psi[t] = model.potential_log[t] + logsumexp(
            model.transition_log_probs[t] + log_psi[t + 1][None, :], axis=1
        )
    log_Z = float(logsumexp(model.initial_log_probs + log_psi[0]))
    return OptimalTwistResult(
        psi_star=TwistFunction.tabular(log_psi),
        soft_values=tuple(model.alpha * v for v in log_psi),
        log_Z_from_recursion=log_Z,
    )


def soft_bellman_residual(model: FkModel, values, alpha: float) -> float:
    """Max deviation of per-step values from the soft Bellman recursion.

    Checks V_t(x) = alpha log g_t(x) + alpha log sum_{x'} exp(V_{t+1}(x')/alpha)
    f_{t+1}(x'|x) for t < T, and the terminal condition V_T = alpha log g_T.
    Zero (up to float noise) exactly when the values solve the recursion.
    """
    vals = [np.asarray(v, dtype=float) for v in values]
    if len(vals) != model.horizon + 1:
        raise ValueError(f"expected {model.horizon + 1} value vectors, got {len(vals)}")
    for t, v in enumerate(vals):
        if v.shape != (model.state_sizes[t],):
            raise ValueError(f"values[{t}] has shape {v.shape}, expected ({model.state_sizes[t]},)")
    worst = float(np.max(np.abs(vals[-1] - alpha * model.potential_log[-1])))
    for t in range(model.horizon):
        backup = alpha * model.potential_log[t] + alpha * logsumexp(
            model.transition_log_probs[t] + vals[t + 1][None, :] / alpha, axis=1
        )
        worst = max(worst, float(np.max(np.abs(vals[t] - backup))))
    return worst


def zero_variance_check(
    model: FkModel, twist: TwistFunction, n_samples: int, seed: int
) -> dict:
    """Sample i.i.d. twisted paths and compare residual weights to exact log Z.

    Returns ``max_abs_dev_from_logZ`` for the log weights, plus the mean and
    (ddof=1) variance of the linear-space weights.  Under psi* the deviation
    is zero up to float error regardless of the seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    from .smc import sample_twisted_paths  # local import: smc builds on twist

    tm = build_twisted(model, twist)
    paths = sample_twisted_paths(tm, n_samples, seed)
    lw = residual_log_weights_batch(tm, paths)
    w = np.exp(lw)
    return {
        "max_abs_dev_from_logZ": float(np.max(np.abs(lw - exact_log_Z(model)))),
        "mean": float(np.mean(w)),
        "variance": float(np.var(w, ddof=1)) if n_samples > 1 else 0.0,
    }
