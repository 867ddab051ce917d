"""Twist fitting by tempered-weight maximum likelihood.

The fit minimizes L(theta) = -sum_k w_hat_k log P^{psi(theta)}(xi^k) over the
twist parameters, where the trajectory log-likelihood decomposes through the
twisted kernels (including the -log c_psi and -log psi_tilde normalizer
terms, which depend on theta and are retained).

Gradients are analytical.  For tabular parameters the derivative with
respect to log psi_t(y) combines the weighted occupancy of y at step t with
softmax-style pullbacks through the normalizers:

    d L / d log psi_t(y) = E_model[step-t occupancy of y] - E_data[...]

where the model expectation routes each particle's step-(t-1) state through
the twisted kernel row (and the twisted initial distribution at t = 0).
Log-linear parameters chain through their feature tables.  Per-step constant
shifts of log psi are a null direction of the loss; tabular fits remove it
by pinning state 0 of every step to log value 0 after each update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DivergenceError
from .fk import FkModel
from .twist import TwistFunction, build_twisted, one_hot_features, twisted_path_log_probs_batch


@dataclass
class TwistParams:
    """Learnable representation behind a TwistFunction."""

    kind: str
    tables: list | None = None
    thetas: list | None = None
    features: tuple | None = None
    n_updates: int = 0

    def to_twist(self) -> TwistFunction:
        if self.kind == "tabular":
            return TwistFunction.tabular([v.copy() for v in self.tables])
        return TwistFunction.log_linear([v.copy() for v in self.thetas], self.features)

    def copy(self) -> "TwistParams":
        if self.kind == "tabular":
            return TwistParams("tabular", tables=[v.copy() for v in self.tables],
                               n_updates=self.n_updates)
        return TwistParams("log_linear", thetas=[v.copy() for v in self.thetas],
                           features=self.features, n_updates=self.n_updates)

    def vectors(self) -> list:
        return self.tables if self.kind == "tabular" else self.thetas

    @staticmethod
    def identity(state_sizes: Sequence[int]) -> "TwistParams":
        return TwistParams("tabular", tables=[np.zeros(s) for s in state_sizes])

    @staticmethod
    def from_twist(tw: TwistFunction) -> "TwistParams":
        if tw.kind == "tabular":
            return TwistParams("tabular", tables=[v.copy() for v in tw.tables])
        return TwistParams("log_linear", thetas=[v.copy() for v in tw.thetas],
                           features=tw.features)

    @staticmethod
    def log_linear_zeros(feature_tables: Sequence[np.ndarray]) -> "TwistParams":
        feats = tuple(np.asarray(f, dtype=float) for f in feature_tables)
        return TwistParams("log_linear", thetas=[np.zeros(f.shape[1]) for f in feats],
                           features=feats)


@dataclass
class FitConfig:
    """Optimizer settings for fit_twist.

    ``optimizer`` is one of ``"gd"`` (plain gradient descent) or
    ``"adagrad"`` (momentum-free adaptive scaling).  ``tol`` stops the loop
    early once the per-step loss decrease falls below it; 0 disables early
    stopping.
    """

    step_size: float = 0.1
    n_steps: int = 200
    gradient_clip_norm: float = 10.0
    optimizer: str = "gd"
    tol: float = 0.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.optimizer not in ("gd", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FitResult:
    """Fitted parameters plus the per-step (step, loss, grad_norm, step_size) trace."""

    params: TwistParams
    loss_trace: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][1]


def _validate_batch(params, trajectories, weights, model):
    trajs = np.asarray(trajectories, dtype=np.intp)
    if trajs.ndim != 2 or trajs.shape[1] != model.horizon + 1:
        raise ValueError(f"trajectories must be (K, {model.horizon + 1}), got {trajs.shape}")
    w = np.asarray(weights, dtype=float)
    if w.shape != (trajs.shape[0],):
        raise ValueError(f"weights shape {w.shape} does not match {trajs.shape[0]} trajectories")
    return trajs, w


def weighted_mle_loss(
    params: TwistParams, trajectories, tempered_weights, model: FkModel
) -> float:
    """-sum_k w_hat_k log P^{psi(params)}(xi^k)."""
    trajs, w = _validate_batch(params, trajectories, tempered_weights, model)
    tm = build_twisted(model, params.to_twist())
    return float(-np.sum(w * twisted_path_log_probs_batch(tm, trajs)))


def loss_gradient(
    params: TwistParams, trajectories, tempered_weights, model: FkModel
) -> list:
    """Exact gradient of weighted_mle_loss, shaped like ``params.vectors()``."""
    trajs, w = _validate_batch(params, trajectories, tempered_weights, model)
    tm = build_twisted(model, params.to_twist())
    T = model.horizon

    grad_tables = []
    for t in range(T + 1):
        occupancy = np.bincount(trajs[:, t], weights=w, minlength=model.state_sizes[t])
        if t == 0:
            pullback = np.exp(tm.log_initial) * w.sum()
        else:
            w_prev = np.bincount(trajs[:, t - 1], weights=w, minlength=model.state_sizes[t - 1])
            pullback = w_prev @ np.exp(tm.log_kernels[t - 1])
        grad_tables.append(pullback - occupancy)

    if params.kind == "tabular":
        return grad_tables
    return [f.T @ g for f, g in zip(params.features, grad_tables)]


def _global_norm(vectors) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in vectors)))


def _pin_gauge(params: TwistParams) -> None:
    # remove the per-step constant null direction (tabular only)
    if params.kind == "tabular":
        for v in params.tables:
            v -= v[0]


def _stepped(params: TwistParams, direction, scale: float) -> TwistParams:
    out = params.copy()
    for v, d in zip(out.vectors(), direction):
        v += scale * d
    _pin_gauge(out)
    return out


def fit_twist(
    params_init: TwistParams,
    trajectories,
    tempered_weights,
    model: FkModel,
    config: FitConfig | None = None,
) -> FitResult:
    """Gradient-descent fit of the weighted MLE objective, warm-started.

    Each step backtracks (halving the step size up to 30 times) until the
    loss does not increase; if that fails, or the loss turns non-finite, a
    DivergenceError names the step.  The returned parameters never have a
    larger loss than the initial ones.
    """
    cfg = config or FitConfig()
    params = params_init.copy()
    _pin_gauge(params)  # start from the same gauge the steps will keep
    loss = weighted_mle_loss(params, trajectories, tempered_weights, model)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite initial loss {loss}", step=0)
    trace = [(0, loss, np.nan, 0.0)]
    adagrad_acc = None

    for step in range(1, cfg.n_steps + 1):
        grad = loss_gradient(params, trajectories, tempered_weights, model)
        gnorm = _global_norm(grad)
        if not np.isfinite(gnorm):
            raise DivergenceError("non-finite gradient", step=step)
        scale = 1.0
        if cfg.gradient_clip_norm and gnorm > cfg.gradient_clip_norm:
            scale = cfg.gradient_clip_norm / gnorm
        if cfg.optimizer == "adagrad":
            if adagrad_acc is None:
                adagrad_acc = [np.zeros_like(g) for g in grad]
            for acc, g in zip(adagrad_acc, grad):
                acc += g * g
            direction = [
                -scale * g / np.sqrt(acc + 1e-12) for g, acc in zip(grad, adagrad_acc)
            ]
        else:
            direction = [-scale * g for g in grad]

        step_size = cfg.step_size
        accepted = False
        for _ in range(31):
            candidate = _stepped(params, direction, step_size)
            cand_loss = weighted_mle_loss(candidate, trajectories, tempered_weights, model)
            if np.isfinite(cand_loss) and cand_loss <= loss:
                params, loss, accepted = candidate, cand_loss, True
                break
            step_size *= 0.5
        if not accepted:
            raise DivergenceError("backtracking failed to find a non-increasing step", step=step)

        prev_loss = trace[-1][1]
        trace.append((step, loss, gnorm, step_size))
        params.n_updates += 1
        if cfg.tol > 0 and prev_loss - loss < cfg.tol:
            break

    return FitResult(params=params, loss_trace=trace)


def projection_error_bound_check(
    model: FkModel,
    q_log_probs,
    fitted: TwistParams,
    prev: TwistParams,
    path_cap: int | None = None,
) -> dict:
    """Verify the projection error bound on an enumerable instance.

    ``q_log_probs`` is the exact intermediate target (log probabilities per
    path, in the shared row-major path order).  With P_i and P_{i+1} the
    twisted measures of ``prev`` and ``fitted``, the bound asserts

        KL(P_{i+1}||pi) <= KL(P_i||pi) - Delta + delta_rev + M * sqrt(2 delta_fwd)

    where Delta = KL(P_i||pi) - KL(q||pi), delta_fwd = KL(q||P_{i+1}),
    delta_rev = KL(P_{i+1}||q) and M = max |log q - log pi| over the support.
    """
    from .fk import DEFAULT_PATH_CAP, enumerate_log_gamma
    from .twist import enumerate_twisted_log_probs
    from .util import logsumexp

    cap = DEFAULT_PATH_CAP if path_cap is None else path_cap
    log_gamma = enumerate_log_gamma(model, cap)
    log_pi = log_gamma - logsumexp(log_gamma)
    log_q = np.asarray(q_log_probs, dtype=float)
    if log_q.shape != log_pi.shape:
        raise ValueError(f"q has {log_q.shape} entries, expected {log_pi.shape}")
    log_prev = enumerate_twisted_log_probs(build_twisted(model, prev.to_twist()), cap)
    log_next = enumerate_twisted_log_probs(build_twisted(model, fitted.to_twist()), cap)

    def kl(a, b):
        support = a > -np.inf
        return float(np.sum(np.exp(a[support]) * (a[support] - b[support])))

    kl_prev = kl(log_prev, log_pi)
    kl_next = kl(log_next, log_pi)
    kl_q = kl(log_q, log_pi)
    delta = kl_prev - kl_q
    delta_fwd = kl(log_q, log_next)
    delta_rev = kl(log_next, log_q)
    q_support = log_q > -np.inf
    M = float(np.max(np.abs(log_q[q_support] - log_pi[q_support])))
    rhs = kl_prev - delta + delta_rev + M * np.sqrt(2.0 * delta_fwd)
    return {
        "lhs": kl_next,
        "rhs": float(rhs),
        "holds": bool(kl_next <= rhs + 1e-10),
        "slack": float(rhs - kl_next),
    }
