"""Finite-horizon Feynman-Kac models over finite state spaces.

A model is a base Markov chain (initial distribution ``mu`` plus per-step
transition kernels ``f_t``) reweighted by per-step positive potentials
``g_t``, which defines an unnormalized target over trajectories

    gamma(x_{0:T}) = mu(x_0) * prod_t f_t(x_t | x_{t-1}) * prod_t g_t(x_t)

with normalizing constant ``Z``.  Per-step state spaces are plain index sets
and may have different sizes; any semantics (tokens, mask symbols, ...)
live in the calling code.

This module also provides the exact oracles: a backward dynamic program for
``log Z`` and full path enumeration for the normalized target, which the
rest of the library is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidTrajectoryError
from .util import logsumexp

#: A trajectory is one path x_{0:T}, as a sequence of T+1 state indices.
Trajectory = tuple[int, ...]

#: Default ceiling on the number of paths an exact enumeration may touch.
DEFAULT_PATH_CAP = 10**6

_NORMALIZATION_ATOL = 1e-12


def _as_readonly(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FkModel:
    """Finite Feynman-Kac model.

    Parameters
    ----------
    horizon : int
        Number of transitions T (states are indexed 0..T).
    state_sizes : sequence of int
        Sizes S_0..S_T of the per-step state spaces.
    initial_log_probs : array, shape (S_0,)
        log mu(x_0).
    transition_log_probs : sequence of arrays
        For t = 1..T, matrix of shape (S_{t-1}, S_t) holding
        log f_t(x_t | x_{t-1}); each row normalizes to one.
    potential_log : sequence of arrays
        For t = 0..T, vector of length S_t holding log g_t(x_t).
        All entries must be finite (g_t > 0).
    alpha : float
        Positive temperature; meaningful when the model was built from a
        terminal reward, carried along otherwise.
    """

    horizon: int
    state_sizes: tuple[int, ...]
    initial_log_probs: np.ndarray
    transition_log_probs: tuple[np.ndarray, ...]
    potential_log: tuple[np.ndarray, ...]
    alpha: float = 1.0

    def __post_init__(self):
        T = self.horizon
        if T < 1:
            raise ValueError(f"horizon must be >= 1, got {T}")
        sizes = tuple(int(s) for s in self.state_sizes)
        if len(sizes) != T + 1 or any(s < 1 for s in sizes):
            raise ValueError(f"state_sizes must hold T+1 positive sizes, got {sizes}")
        object.__setattr__(self, "state_sizes", sizes)

        init = _as_readonly(self.initial_log_probs)
        if init.shape != (sizes[0],):
            raise ValueError(f"initial_log_probs has shape {init.shape}, expected ({sizes[0]},)")
        _check_normalized(init[None, :], "initial distribution")
        object.__setattr__(self, "initial_log_probs", init)

        trans = tuple(_as_readonly(m) for m in self.transition_log_probs)
        if len(trans) != T:
            raise ValueError(f"expected {T} transition matrices, got {len(trans)}")
        for t, m in enumerate(trans, start=1):
            if m.shape != (sizes[t - 1], sizes[t]):
                raise ValueError(
                    f"transition {t} has shape {m.shape}, expected ({sizes[t-1]}, {sizes[t]})"
                )
            _check_normalized(m, f"transition kernel {t}")
        object.__setattr__(self, "transition_log_probs", trans)

        pots = tuple(_as_readonly(v) for v in self.potential_log)
        if len(pots) != T + 1:
            raise ValueError(f"expected {T + 1} potential vectors, got {len(pots)}")
        for t, v in enumerate(pots):
            if v.shape != (sizes[t],):
                raise ValueError(f"potential {t} has shape {v.shape}, expected ({sizes[t]},)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"potential {t} has non-finite log values (g_t must be > 0)")
        object.__setattr__(self, "potential_log", pots)

        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def n_paths(self) -> int:
        """Total number of trajectories through the model."""
        n = 1
        for s in self.state_sizes:
            n *= s
        return n

    def check_trajectory(self, traj: Sequence[int]) -> Trajectory:
        """Validate a trajectory and return it as a tuple of ints."""
        states = tuple(int(s) for s in traj)
        if len(states) != self.horizon + 1:
            raise InvalidTrajectoryError(
                f"trajectory has {len(states)} states, expected {self.horizon + 1}"
            )
        for t, (s, size) in enumerate(zip(states, self.state_sizes)):
            if not 0 <= s < size:
                raise InvalidTrajectoryError(f"state {s} at step {t} outside [0, {size})")
        return states


def _check_normalized(log_rows: np.ndarray, what: str) -> None:
    sums = np.exp(log_rows).sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if not np.isfinite(worst) or worst > _NORMALIZATION_ATOL:
        raise ValueError(f"{what} rows must sum to 1 (max deviation {worst:.3e})")


@dataclass
class ExactOracle:
    """Exact enumeration of a model's target path distribution.

    ``path_log_probs`` holds log pi for every trajectory, flat in row-major
    order over (x_0, ..., x_T); ``log_Z`` comes from the enumerated sum of
    unnormalized mass (not from the backward recursion, which it is used to
    check).
    """

    state_sizes: tuple[int, ...]
    log_Z: float
    path_log_probs: np.ndarray
    _dict: dict | None = field(default=None, repr=False)

    def path_log_prob(self, traj: Sequence[int]) -> float:
        """log pi of one trajectory."""
        idx = np.ravel_multi_index(tuple(int(s) for s in traj), self.state_sizes)
        return float(self.path_log_probs[idx])

    @property
    def target_path_log_probs(self) -> dict[Trajectory, float]:
        """Map trajectory -> log pi, materialized on first access."""
        if self._dict is None:
            paths = np.stack(
                np.unravel_index(np.arange(self.path_log_probs.size), self.state_sizes),
                axis=1,
            )
            self._dict = {
                tuple(int(s) for s in row): float(lp)
                for row, lp in zip(paths, self.path_log_probs)
            }
        return self._dict


def base_path_log_prob(model: FkModel, traj: Sequence[int]) -> float:
    """log P(x_{0:T}) under the base chain: log mu(x_0) + sum_t log f_t."""
    states = model.check_trajectory(traj)
    total = float(model.initial_log_probs[states[0]])
    for t in range(1, model.horizon + 1):
        total += float(model.transition_log_probs[t - 1][states[t - 1], states[t]])
    return total


def potential_path_log(model: FkModel, traj: Sequence[int]) -> float:
    """sum_t log g_t(x_t); together with the base log-prob this is log gamma."""
    states = model.check_trajectory(traj)
    return float(sum(model.potential_log[t][s] for t, s in enumerate(states)))


def from_terminal_reward(base: FkModel, reward, alpha: float) -> FkModel:
    """Attach a terminal reward to a base chain.

    Interior potentials become unit (log 0) and the terminal one becomes
    exp(r(x_T) / alpha); any potentials already on ``base`` are discarded.
    """
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError(f"alpha must be positive, got {alpha}")
    r = np.asarray(reward, dtype=float)
    if r.shape != (base.state_sizes[-1],):
        raise ValueError(
            f"reward has shape {r.shape}, expected ({base.state_sizes[-1]},)"
        )
    potentials = [np.zeros(s) for s in base.state_sizes[:-1]]
    potentials.append(r / alpha)
    return replace(base, potential_log=tuple(potentials), alpha=float(alpha))


def terminal_reward(model: FkModel) -> np.ndarray:
    """Reward vector implied by the terminal potential: alpha * log g_T."""
    return model.alpha * np.asarray(model.potential_log[-1])


def exact_log_Z(model: FkModel) -> float:
    """log normalizing constant by the backward dynamic program.

    beta_T = g_T, beta_t(x) = g_t(x) * sum_{x'} f_{t+1}(x'|x) beta_{t+1}(x'),
    Z = sum_x mu(x) beta_0(x).  Costs O(T * max S^2), no enumeration.
    """
    log_beta = np.asarray(model.potential_log[-1])
    for t in range(model.horizon - 1, -1, -1):
        log_beta = model.potential_log[t] + logsumexp(
            model.transition_log_probs[t] + log_beta[None, :], axis=1
        )
    return float(logsumexp(model.initial_log_probs + log_beta))


def expand_path_logs(
    init_log: np.ndarray,
    step_log_mats: Sequence[np.ndarray],
    step_log_vecs: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Accumulate per-path log mass over the full product space.

    Returns a flat vector in row-major order over (x_0, ..., x_T) with
    entries init_log[x_0] + sum_t (step_log_mats[t][x_{t-1}, x_t]
    + step_log_vecs[t][x_t]).  Shared by the target and twisted-measure
    enumerations so all oracles agree on path ordering.
    """
    logp = np.asarray(init_log, dtype=float)
    for t, mat in enumerate(step_log_mats):
        add = np.asarray(mat, dtype=float)
        if step_log_vecs is not None:
            add = add + np.asarray(step_log_vecs[t])[None, :]
        logp = (logp.reshape(-1, add.shape[0])[:, :, None] + add[None, :, :]).reshape(-1)
    return logp


def check_path_cap(n_paths: int, path_cap: int) -> None:
    if n_paths > path_cap:
        raise CapacityError(f"{n_paths} paths exceed the enumeration cap {path_cap}")


def enumerate_log_gamma(model: FkModel, path_cap: int = DEFAULT_PATH_CAP) -> np.ndarray:
    """Unnormalized log gamma for every path, flat in row-major path order."""
    check_path_cap(model.n_paths, path_cap)
    return expand_path_logs(
        model.initial_log_probs + model.potential_log[0],
        model.transition_log_probs,
        model.potential_log[1:],
    )


def enumerate_target(model: FkModel, path_cap: int = DEFAULT_PATH_CAP) -> ExactOracle:
    """Materialize the exact target distribution over all paths."""
    log_gamma = enumerate_log_gamma(model, path_cap)
    log_Z = float(logsumexp(log_gamma))
    return ExactOracle(
        state_sizes=model.state_sizes,
        log_Z=log_Z,
        path_log_probs=log_gamma - log_Z,
    )
