"""KL trust-region update: dual solve, tempered weights, escort diagnostics.

Given residual log weights lw_k of trajectories sampled from the current
proposal, the empirical dual of the KL-constrained update is

    J(lambda) = lambda * eps + (1 + lambda) * log[(1/K) sum_k exp(lw_k / (1 + lambda))]

minimized over lambda >= 0; the tempering exponent is tau = 1 / (1 + lambda)
and the update reweights trajectories by exp(tau * lw_k), normalized.
Unnormalized weights are fine here: normalizing shifts J by a
lambda-independent constant.

The solver works in tau-space on (0, 1] by golden-section search (the
objective is smooth and unimodal there), with the admissible lambda range
implied by TAU_MIN.

On enumerable models the same update is computed exactly: the escort family
q_tau tilts the proposal by the tau-th power of the density ratio to the
target, and this module evaluates its log partition Lambda(tau), both KL
divergences and chi^2(pi || q_tau) by full path enumeration, independent of
the recursion code paths those quantities are used to validate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fk import DEFAULT_PATH_CAP, FkModel, enumerate_log_gamma
from .twist import TwistFunction, build_twisted, enumerate_twisted_log_probs
from .util import logsumexp

#: Smallest tempering exponent the dual solver will return (caps lambda).
TAU_MIN = 1e-6

_BRACKET_TOL = 1e-10
_INVGOLD = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TrustRegionResult:
    """Solution of the empirical dual problem."""

    lambda_hat: float
    tau_hat: float
    tempered_weights: np.ndarray
    dual_value: float


@dataclass(frozen=True)
class EscortDiagnostics:
    """Exact escort-path curves over a tau grid (enumeration-based)."""

    taus: np.ndarray
    Lambda: np.ndarray
    kl_to_proposal: np.ndarray
    kl_to_target: np.ndarray
    chi2_to_target: np.ndarray


def dual_objective(lam: float, residual_log_weights, epsilon: float) -> float:
    """Empirical dual objective at multiplier ``lam`` (max-shifted arithmetic)."""
    lw = np.asarray(residual_log_weights, dtype=float)
    tau = 1.0 / (1.0 + lam)
    return float(
        lam * epsilon + (1.0 / tau) * (logsumexp(tau * lw) - np.log(lw.size))
    )


def tempered_weights(residual_log_weights, tau: float) -> np.ndarray:
    """Normalized tau-th powers of the residual weights."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    lw = tau * np.asarray(residual_log_weights, dtype=float)
    return np.exp(lw - logsumexp(lw))


def solve_dual(
    residual_log_weights,
    epsilon: float,
    log_base_weights=None,
) -> TrustRegionResult:
    """Minimize the empirical dual and return the tempered-weight update.

    ``log_base_weights`` generalizes the equal-mass empirical measure: when
    given (log masses, need not be normalized), the sample mean inside the
    objective becomes a weighted mean and the tempered weights carry the
    same masses.  This is how enumerable models feed the exact update
    through the identical code path.
    """
    lw = np.asarray(residual_log_weights, dtype=float)
    if lw.size < 1:
        raise ValueError("need at least one residual weight")
    if not np.all(np.isfinite(lw)):
        raise ValueError("residual log weights must be finite")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if log_base_weights is None:
        log_b = np.full(lw.size, -np.log(lw.size))
    else:
        log_b = np.asarray(log_base_weights, dtype=float)
        log_b = log_b - logsumexp(log_b)

    def objective(tau: float) -> float:
        return (1.0 - tau) / tau * epsilon + logsumexp(log_b + tau * lw) / tau

    spread = float(lw.max() - lw.min())
    if spread <= 1e-13 * max(1.0, abs(float(lw.max()))):
        tau_hat, lambda_hat = 1.0, 0.0
    else:
        tau_hat = _golden_section(objective, TAU_MIN, 1.0)
        if 1.0 - tau_hat <= 5.0 * _BRACKET_TOL:
            tau_hat, lambda_hat = 1.0, 0.0
        else:
            lambda_hat = 1.0 / tau_hat - 1.0
            tau_hat = 1.0 / (1.0 + lambda_hat)  # keep the pair exactly consistent

    w = np.exp(log_b + tau_hat * lw - logsumexp(log_b + tau_hat * lw))
    return TrustRegionResult(
        lambda_hat=float(lambda_hat),
        tau_hat=float(tau_hat),
        tempered_weights=w,
        dual_value=float(objective(tau_hat)),
    )


def _golden_section(f, lo: float, hi: float) -> float:
    """Golden-section minimizer; converges to boundary minima as well."""
    x1 = hi - _INVGOLD * (hi - lo)
    x2 = lo + _INVGOLD * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > _BRACKET_TOL:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _INVGOLD * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _INVGOLD * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def _log_ratio_support(model, twist, path_cap):
    """(log pi, log P^psi, log R, support mask, log Z) over all paths."""
    log_gamma = enumerate_log_gamma(model, path_cap)
    log_Z = float(logsumexp(log_gamma))
    log_pi = log_gamma - log_Z
    tm = build_twisted(model, twist)
    log_p = enumerate_twisted_log_probs(tm, path_cap)
    support = log_p > -np.inf
    log_r = np.where(support, log_pi - log_p, -np.inf)
    return log_pi, log_p, log_r, support, log_Z


def escort_log_probs(
    model: FkModel, twist: TwistFunction, tau: float, path_cap: int = DEFAULT_PATH_CAP
) -> np.ndarray:
    """Exact log q_tau for every path (proposal tilted by R^tau, normalized)."""
    _, log_p, log_r, support, _ = _log_ratio_support(model, twist, path_cap)
    tilted = np.where(support, log_p + tau * log_r, -np.inf)
    return tilted - logsumexp(tilted[support])


def escort_diagnostics(
    model: FkModel,
    twist: TwistFunction,
    tau_grid,
    path_cap: int = DEFAULT_PATH_CAP,
) -> EscortDiagnostics:
    """Exact Lambda, KL and chi^2 curves along the escort path."""
    taus = np.asarray(tau_grid, dtype=float)
    _, log_p, log_r, support, _ = _log_ratio_support(model, twist, path_cap)
    lp, lr = log_p[support], log_r[support]

    def Lambda(tau: float) -> float:
        return float(logsumexp(lp + tau * lr))

    lam_vals = np.empty(taus.size)
    kl_prop = np.empty(taus.size)
    kl_targ = np.empty(taus.size)
    chi2 = np.empty(taus.size)
    for i, tau in enumerate(taus):
        lam = Lambda(tau)
        log_q = lp + tau * lr - lam
        mean_log_r = float(np.sum(np.exp(log_q) * lr))
        lam_vals[i] = lam
        kl_prop[i] = tau * mean_log_r - lam
        kl_targ[i] = (tau - 1.0) * mean_log_r - lam
        chi2[i] = np.expm1(lam + Lambda(2.0 - tau))
    return EscortDiagnostics(
        taus=taus,
        Lambda=lam_vals,
        kl_to_proposal=kl_prop,
        kl_to_target=kl_targ,
        chi2_to_target=chi2,
    )


def chi2_variance_identity_check(
    model: FkModel,
    twist: TwistFunction,
    tau: float,
    path_cap: int = DEFAULT_PATH_CAP,
) -> dict:
    """Compare Var_{q_tau}[gamma / q_tau] / Z^2 with chi^2(pi || q_tau).

    The left side is a direct enumeration of the variance; the right side is
    the log-partition closed form exp(Lambda(tau) + Lambda(2 - tau)) - 1.
    """
    log_pi, log_p, log_r, support, log_Z = _log_ratio_support(model, twist, path_cap)
    lp, lr = log_p[support], log_r[support]
    lam_tau = float(logsumexp(lp + tau * lr))
    log_q = lp + tau * lr - lam_tau
    log_gamma = log_pi[support] + log_Z
    second_moment = float(logsumexp(2.0 * log_gamma - log_q))
    lhs = float(np.expm1(second_moment - 2.0 * log_Z))
    rhs = float(np.expm1(lam_tau + logsumexp(lp + (2.0 - tau) * lr)))
    return {"lhs": lhs, "rhs": rhs, "abs_diff": abs(lhs - rhs)}


def exact_twisted_divergences(
    model: FkModel,
    twist: TwistFunction,
    path_cap: int = DEFAULT_PATH_CAP,
) -> tuple[float, float]:
    """(D_KL(P^psi || pi), chi^2(pi || P^psi)) by enumeration."""
    log_pi, log_p, log_r, support, _ = _log_ratio_support(model, twist, path_cap)
    lp, lr = log_p[support], log_r[support]
    kl = float(np.sum(np.exp(lp) * -lr))
    chi2 = float(np.expm1(logsumexp(lp + 2.0 * lr)))
    return kl, chi2


def annealing_beta_sequence(lambdas: Sequence[float]) -> np.ndarray:
    """Positions beta_i on the geometric path implied by dual multipliers.

    beta_0 = 0 and beta_{i+1} = beta_i + (1 - beta_i) / (1 + lambda_i),
    equivalently 1 - prod_m lambda_m / (1 + lambda_m).
    """
    betas = [0.0]
    for lam in lambdas:
        lam = float(lam)
        if lam < 0:
            raise ValueError(f"multipliers must be nonnegative, got {lam}")
        betas.append(betas[-1] + (1.0 - betas[-1]) / (1.0 + lam))
    return np.array(betas)
