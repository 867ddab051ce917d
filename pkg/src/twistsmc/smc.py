"""Twisted SMC: propagation, residual weighting, resampling, Z estimation.

The sampler follows the standard resample-propagate scheme.  Particles are
initialized from the twisted initial distribution and moved by the twisted
kernels; the incremental weights are the residual tables of the twisted
model.  Between scheduled resampling steps the incremental log weights
accumulate; at a scheduled step the accumulated block weights drive
multinomial resampling of whole ancestral paths and then reset.  The
normalizing-constant estimate composes one log-mean-exp term per block,
which keeps the estimator unbiased for Z under any fixed schedule.

Randomness comes from counter-based substreams keyed by (seed, purpose,
step); within a step's stream, slot k belongs to particle k, so particles
may be processed in any order (or in parallel) with bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .errors import DegenerateWeightsError, DivergenceError
from .fk import FkModel, Trajectory
from .twist import (
    TwistFunction,
    TwistedModel,
    build_twisted,
    residual_log_weights_batch,
)
from .util import logmeanexp, normalized_from_log


@dataclass
class ParticleSystem:
    """In-flight state of one particle sweep.

    ``cum_residual_log_weights`` accumulates incremental log weights since
    the last resampling reset.  At non-resampling steps the ancestor of
    particle k is k.
    """

    n_particles: int
    trajectories: np.ndarray  # (K, t+1) so far, rewritten on resampling
    cum_residual_log_weights: np.ndarray
    log_Z_estimate: float
    schedule: tuple[int, ...]
    seed: int


@dataclass
class SmcOutput:
    """Result of one SMC sweep.

    ``residual_log_weights`` recomputes the full-path residual weight on
    each output ancestral trajectory (the authoritative definition used by
    the learning loop); ``block_log_weights`` is the accumulated-since-reset
    bookkeeping of the final block.  The two agree whenever the schedule is
    empty.
    """

    trajectories: np.ndarray  # (K, T+1) int
    residual_log_weights: np.ndarray
    block_log_weights: np.ndarray
    log_Z_estimate: float
    ess_sequence: np.ndarray  # (T+1,)
    ancestors: np.ndarray  # (T, K); identity rows off the schedule
    schedule: tuple[int, ...]
    seed: int
    n_trajectories: int
    n_kernel_draws: int


def ess(normalized_weights) -> float:
    """Effective sample size 1 / sum w_k^2 of normalized weights."""
    w = np.asarray(normalized_weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def multinomial_resample(normalized_weights, gen: np.random.Generator) -> np.ndarray:
    """Draw K i.i.d. categorical ancestor indices from normalized weights."""
    w = np.asarray(normalized_weights, dtype=float)
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("all resampling weights are zero")
    if np.any(w < 0.0) or abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights must be normalized (sum {total})")
    return _inverse_cdf(np.cumsum(w), gen.random(w.size))


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, cdf.size - 1)


def _inverse_cdf_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cdf_rows: (K, S) cumulative rows already gathered per particle
    idx = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def propagate_step(tm: TwistedModel, t: int, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Move particles from step t to t+1 via the twisted kernel.

    Pure function of (states, uniforms): slot k of ``u`` belongs to particle
    k, so any processing order yields the same next states.
    """
    return _inverse_cdf_rows(tm.kernel_cdfs[t][states], u)


def _normalized_or_raise(cum_log_w: np.ndarray, step: int) -> np.ndarray:
    if not np.all(np.isfinite(cum_log_w)):
        bad = cum_log_w[~np.isfinite(cum_log_w)][0]
        raise DivergenceError(f"non-finite particle weight {bad}", step=step)
    return normalized_from_log(cum_log_w)


def run_twisted_smc(
    model: FkModel,
    twist: TwistFunction,
    n_particles: int,
    schedule: Sequence[int] = (),
    seed: int = 0,
) -> SmcOutput:
    """Run the twisted particle system and estimate log Z.

    Parameters
    ----------
    model, twist : the Feynman-Kac target and the proposal twist.
    n_particles : K >= 1.
    schedule : steps t in {0..T-1} at which multinomial resampling occurs.
    seed : stream seed; identical inputs give bit-identical output.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    T = model.horizon
    sched = tuple(sorted(set(int(t) for t in schedule)))
    if sched and not (0 <= sched[0] and sched[-1] < T):
        raise ValueError(f"schedule must lie in [0, {T - 1}], got {sched}")

    tm = build_twisted(model, twist)
    K = int(n_particles)
    traj = np.empty((K, T + 1), dtype=np.intp)

    u0 = rng.substream(seed, rng.TAG_SMC_INIT).random(K)
    traj[:, 0] = _inverse_cdf(tm.initial_cdf, u0)
    cum = tm.log_incr_weights[0][traj[:, 0]].astype(float)

    log_Z = 0.0
    ess_seq = [ess(_normalized_or_raise(cum, 0))]
    ancestors = np.empty((T, K), dtype=np.intp)

    for t in range(T):
        if t in sched:
            w = _normalized_or_raise(cum, t)
            log_Z += logmeanexp(cum)
            a = multinomial_resample(w, rng.substream(seed, rng.TAG_SMC_RESAMPLE, t))
            traj[:, : t + 1] = traj[a, : t + 1]
            cum = np.zeros(K)
        else:
            a = np.arange(K, dtype=np.intp)
        ancestors[t] = a

        u = rng.substream(seed, rng.TAG_SMC_PROPAGATE, t + 1).random(K)
        traj[:, t + 1] = propagate_step(tm, t, traj[:, t], u)
        cum = cum + tm.log_incr_weights[t + 1][traj[:, t + 1]]
        ess_seq.append(ess(_normalized_or_raise(cum, t + 1)))

    log_Z += logmeanexp(cum)
    return SmcOutput(
        trajectories=traj,
        residual_log_weights=residual_log_weights_batch(tm, traj),
        block_log_weights=cum,
        log_Z_estimate=float(log_Z),
        ess_sequence=np.array(ess_seq),
        ancestors=ancestors,
        schedule=sched,
        seed=int(seed),
        n_trajectories=K,
        n_kernel_draws=K * T,
    )


def sample_twisted_paths(tm: TwistedModel, n: int, seed: int) -> np.ndarray:
    """Draw n i.i.d. trajectories from the twisted path measure P^psi."""
    if n < 1:
        raise ValueError("n must be >= 1")
    T = tm.horizon
    paths = np.empty((n, T + 1), dtype=np.intp)
    u0 = rng.substream(seed, rng.TAG_IID_PATHS).random(n)
    paths[:, 0] = _inverse_cdf(tm.initial_cdf, u0)
    for t in range(T):
        u = rng.substream(seed, rng.TAG_IID_PATHS, t + 1).random(n)
        paths[:, t + 1] = propagate_step(tm, t, paths[:, t], u)
    return paths


def sample_base_paths(model: FkModel, n: int, seed: int) -> np.ndarray:
    """Draw n i.i.d. trajectories from the base chain."""
    tm = build_twisted(model, TwistFunction.identity(model.state_sizes))
    return sample_twisted_paths(tm, n, seed)


def best_of_n(model: FkModel, n_samples: int, seed: int) -> Trajectory:
    """Sample i.i.d. base trajectories and keep the best terminal potential.

    Ties break toward the lowest sample index, so the result is a
    deterministic function of (model, n_samples, seed).
    """
    paths = sample_base_paths(model, n_samples, seed)
    scores = model.potential_log[-1][paths[:, -1]]
    return tuple(int(s) for s in paths[int(np.argmax(scores))])


def potential_smc_baseline(
    model: FkModel,
    intermediate_rewards: Sequence,
    variant: str,
    lambda_scale: float,
    n_particles: int,
    schedule: Sequence[int],
    seed: int,
) -> SmcOutput:
    """Untwisted SMC steered by surrogate potentials at resampling stages.

    At a scheduled step t the resampling probabilities combine the
    accumulated target weights with a surrogate log potential built from
    per-step reward estimates ``r_hat``:

        diff: lambda * (r_hat_t(x_t) - previous estimate)
        max:  lambda * max(r_hat_t(x_t), previous estimate)

    where each particle's previous estimate is the one recorded at its last
    scheduled stage (0 before the first).  After resampling with
    probabilities p, particle weights continue from w_a / (K * p_a), so the
    output weights remain properly weighted for the true target no matter
    how the surrogate distorts resampling.  ``residual_log_weights`` and
    ``block_log_weights`` both hold these proper weights.
    """
    if variant not in ("diff", "max"):
        raise ValueError(f"variant must be 'diff' or 'max', got {variant!r}")
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    T = model.horizon
    sched = tuple(sorted(set(int(t) for t in schedule)))
    if sched and not (0 <= sched[0] and sched[-1] < T):
        raise ValueError(f"schedule must lie in [0, {T - 1}], got {sched}")
    r_hat = list(intermediate_rewards)
    if len(r_hat) != T + 1:
        raise ValueError(f"expected {T + 1} intermediate reward slots, got {len(r_hat)}")
    for t in sched:
        if r_hat[t] is None:
            raise ValueError(f"missing intermediate reward estimate at scheduled step {t}")
        r_hat[t] = np.asarray(r_hat[t], dtype=float)
        if r_hat[t].shape != (model.state_sizes[t],):
            raise ValueError(f"reward estimate at step {t} has shape {r_hat[t].shape}")

    tm = build_twisted(model, TwistFunction.identity(model.state_sizes))
    K = int(n_particles)
    lam = float(lambda_scale)
    traj = np.empty((K, T + 1), dtype=np.intp)
    u0 = rng.substream(seed, rng.TAG_SMC_INIT).random(K)
    traj[:, 0] = _inverse_cdf(tm.initial_cdf, u0)
    cum = tm.log_incr_weights[0][traj[:, 0]].astype(float)
    prev_est = np.zeros(K)

    ess_seq = [ess(_normalized_or_raise(cum, 0))]
    ancestors = np.empty((T, K), dtype=np.intp)
    log_K = np.log(K)

    for t in range(T):
        if t in sched:
            cur = r_hat[t][traj[:, t]]
            if variant == "diff":
                aux = lam * (cur - prev_est)
            else:
                aux = lam * np.maximum(cur, prev_est)
            stage = cum + aux
            p = _normalized_or_raise(stage, t)
            a = multinomial_resample(p, rng.substream(seed, rng.TAG_SMC_RESAMPLE, t))
            traj[:, : t + 1] = traj[a, : t + 1]
            # proper-weighting continuation: w_a / (K p_a)
            cum = cum[a] - (np.log(p[a]) + log_K)
            prev_est = cur[a]
        else:
            a = np.arange(K, dtype=np.intp)
        ancestors[t] = a

        u = rng.substream(seed, rng.TAG_SMC_PROPAGATE, t + 1).random(K)
        traj[:, t + 1] = propagate_step(tm, t, traj[:, t], u)
        cum = cum + tm.log_incr_weights[t + 1][traj[:, t + 1]]
        ess_seq.append(ess(_normalized_or_raise(cum, t + 1)))

    return SmcOutput(
        trajectories=traj,
        residual_log_weights=cum.copy(),
        block_log_weights=cum,
        log_Z_estimate=logmeanexp(cum),
        ess_sequence=np.array(ess_seq),
        ancestors=ancestors,
        schedule=sched,
        seed=int(seed),
        n_trajectories=K,
        n_kernel_draws=K * T,
    )
