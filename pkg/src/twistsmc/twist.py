"""Twisting functions and the twisted path measure they induce.

A twist is a sequence of positive state functions ``psi_t``.  It reshapes the
base chain into the twisted initial distribution and kernels

    mu^psi(x_0)        = psi_0(x_0) mu(x_0) / c_psi
    f_t^psi(x_t|x_...) = psi_t(x_t) f_t(x_t|x_{t-1}) / psi_tilde_{t-1}(x_{t-1})

where ``psi_tilde_{t-1}(x) = sum_{x'} psi_t(x') f_t(x'|x)`` and
``c_psi = sum_x psi_0(x) mu(x)``.  The mismatch that remains between the
twisted proposal and the unnormalized target is the residual weight

    w^psi(x_{0:T}) = c_psi * prod_t g_t(x_t) psi_tilde_t(x_t) / psi_t(x_t)

with the convention psi_tilde_T = 1.  On finite spaces the normalizers are
exact sums, computed once at construction so kernel evaluation inside
particle loops is table lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fk import DEFAULT_PATH_CAP, FkModel, Trajectory, check_path_cap, expand_path_logs
from .util import logsumexp


@dataclass(frozen=True)
class TwistFunction:
    """Per-step positive twisting values, log-parameterized.

    Two kinds share one evaluation interface:

    - ``tabular``: a log-value per (step, state), in ``tables``.
    - ``log_linear``: per-step weights ``thetas[t]`` and feature tables
      ``features[t]`` of shape (S_t, d_t), with
      log psi_t(x) = <thetas[t], features[t][x]>.
    """

    kind: str
    tables: tuple[np.ndarray, ...] | None = None
    thetas: tuple[np.ndarray, ...] | None = None
    features: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.kind == "tabular":
            if self.tables is None:
                raise ValueError("tabular twist requires tables")
            tables = tuple(np.asarray(v, dtype=float) for v in self.tables)
            for t, v in enumerate(tables):
                if v.ndim != 1 or not np.all(np.isfinite(v)):
                    raise ValueError(f"log psi table {t} must be 1-D and finite")
            object.__setattr__(self, "tables", tables)
        elif self.kind == "log_linear":
            if self.thetas is None or self.features is None:
                raise ValueError("log_linear twist requires thetas and features")
            thetas = tuple(np.asarray(v, dtype=float) for v in self.thetas)
            feats = tuple(np.asarray(f, dtype=float) for f in self.features)
            if len(thetas) != len(feats):
                raise ValueError("thetas and features must have one entry per step")
            for t, (th, f) in enumerate(zip(thetas, feats)):
                if f.ndim != 2 or th.shape != (f.shape[1],):
                    raise ValueError(f"step {t}: theta shape {th.shape} vs features {f.shape}")
                if not (np.all(np.isfinite(th)) and np.all(np.isfinite(f))):
                    raise ValueError(f"step {t}: non-finite twist parameters")
            object.__setattr__(self, "thetas", thetas)
            object.__setattr__(self, "features", feats)
        else:
            raise ValueError(f"unknown twist kind {self.kind!r}")

    @property
    def n_steps(self) -> int:
        return len(self.tables if self.kind == "tabular" else self.thetas)

    def log_psi_table(self, t: int) -> np.ndarray:
        """Vector of log psi_t over the whole step-t state space."""
        if self.kind == "tabular":
            return self.tables[t]
        return self.features[t] @ self.thetas[t]

    def log_psi(self, t: int, x: int) -> float:
        return float(self.log_psi_table(t)[x])

    @staticmethod
    def identity(state_sizes: Sequence[int]) -> "TwistFunction":
        """psi == 1 everywhere (twisted model equals the base model)."""
        return TwistFunction("tabular", tables=tuple(np.zeros(s) for s in state_sizes))

    @staticmethod
    def tabular(tables: Sequence[np.ndarray]) -> "TwistFunction":
        return TwistFunction("tabular", tables=tuple(tables))

    @staticmethod
    def log_linear(thetas: Sequence[np.ndarray], features: Sequence[np.ndarray]) -> "TwistFunction":
        return TwistFunction("log_linear", thetas=tuple(thetas), features=tuple(features))


def one_hot_features(state_sizes: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Default log-linear features: one-hot per state (recovers tabular)."""
    return tuple(np.eye(s) for s in state_sizes)


@dataclass(frozen=True)
class TwistedModel:
    """A model/twist pair with all normalizer tables precomputed.

    Immutable and shareable across concurrent readers.  ``log_tilde_psi[T]``
    is stored as zeros per the psi_tilde_T = 1 convention.
    """

    base: FkModel
    twist: TwistFunction
    log_c_psi: float
    log_psi: tuple[np.ndarray, ...]
    log_tilde_psi: tuple[np.ndarray, ...]
    log_initial: np.ndarray
    log_kernels: tuple[np.ndarray, ...]
    log_incr_weights: tuple[np.ndarray, ...]
    # linear-space cumulative rows, for inverse-CDF sampling
    initial_cdf: np.ndarray = field(repr=False, default=None)
    kernel_cdfs: tuple[np.ndarray, ...] = field(repr=False, default=None)

    @property
    def horizon(self) -> int:
        return self.base.horizon


def build_twisted(model: FkModel, twist: TwistFunction) -> TwistedModel:
    """Precompute the twisted initial distribution, kernels and weight tables."""
    T = model.horizon
    if twist.n_steps != T + 1:
        raise ValueError(f"twist covers {twist.n_steps} steps, model needs {T + 1}")
    log_psi = []
    for t, size in enumerate(model.state_sizes):
        v = np.asarray(twist.log_psi_table(t), dtype=float)
        if v.shape != (size,):
            raise ValueError(f"twist table {t} has shape {v.shape}, expected ({size},)")
        log_psi.append(v)

    log_tilde = [None] * (T + 1)
    log_tilde[T] = np.zeros(model.state_sizes[T])
    for t in range(T - 1, -1, -1):
        log_tilde[t] = logsumexp(
            model.transition_log_probs[t] + log_psi[t + 1][None, :], axis=1
        )
    log_c = float(logsumexp(model.initial_log_probs + log_psi[0]))

    log_initial = model.initial_log_probs + log_psi[0] - log_c
    log_kernels = tuple(
        model.transition_log_probs[t]
        + log_psi[t + 1][None, :]
        - log_tilde[t][:, None]
        for t in range(T)
    )

    log_incr = [model.potential_log[0] + log_tilde[0] - log_psi[0] + log_c]
    for t in range(1, T + 1):
        log_incr.append(model.potential_log[t] + log_tilde[t] - log_psi[t])

    return TwistedModel(
        base=model,
        twist=twist,
        log_c_psi=log_c,
        log_psi=tuple(log_psi),
        log_tilde_psi=tuple(log_tilde),
        log_initial=log_initial,
        log_kernels=log_kernels,
        log_incr_weights=tuple(log_incr),
        initial_cdf=np.cumsum(np.exp(log_initial)),
        kernel_cdfs=tuple(np.cumsum(np.exp(m), axis=1) for m in log_kernels),
    )


def twisted_path_log_prob(tm: TwistedModel, traj: Sequence[int]) -> float:
    """log P^psi(x_{0:T}) via the twisted initial distribution and kernels."""
    states = tm.base.check_trajectory(traj)
    total = float(tm.log_initial[states[0]])
    for t in range(1, tm.horizon + 1):
        total += float(tm.log_kernels[t - 1][states[t - 1], states[t]])
    return total


def residual_log_weight(tm: TwistedModel, traj: Sequence[int]) -> float:
    """log w^psi(x_{0:T}) = log gamma - log P^psi, evaluated by table sums."""
    states = tm.base.check_trajectory(traj)
    return float(sum(tm.log_incr_weights[t][s] for t, s in enumerate(states)))


def incremental_log_weights(tm: TwistedModel, traj: Sequence[int]) -> np.ndarray:
    """[log w_0^psi(x_0), ..., log w_T^psi(x_T)]; sums to the residual weight."""
    states = tm.base.check_trajectory(traj)
    return np.array([tm.log_incr_weights[t][s] for t, s in enumerate(states)])


def residual_log_weights_batch(tm: TwistedModel, trajectories: np.ndarray) -> np.ndarray:
    """Residual log weights for an array of trajectories, shape (K, T+1)."""
    trajs = np.asarray(trajectories, dtype=np.intp)
    out = np.zeros(trajs.shape[0])
    for t in range(tm.horizon + 1):
        out += tm.log_incr_weights[t][trajs[:, t]]
    return out


def twisted_path_log_probs_batch(tm: TwistedModel, trajectories: np.ndarray) -> np.ndarray:
    """log P^psi for an array of trajectories, shape (K, T+1)."""
    trajs = np.asarray(trajectories, dtype=np.intp)
    out = tm.log_initial[trajs[:, 0]].copy()
    for t in range(1, tm.horizon + 1):
        out += tm.log_kernels[t - 1][trajs[:, t - 1], trajs[:, t]]
    return out


def enumerate_twisted_log_probs(
    tm: TwistedModel, path_cap: int = DEFAULT_PATH_CAP
) -> np.ndarray:
    """log P^psi for every path, flat in the shared row-major path order."""
    check_path_cap(tm.base.n_paths, path_cap)
    return expand_path_logs(tm.log_initial, tm.log_kernels)
