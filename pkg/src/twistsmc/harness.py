"""Outer loop, built-in toy models, comparison runner, experiment config.

One outer iteration: run the twisted particle system under the current
twist, recompute full-path residual weights on the ancestral trajectories,
solve the trust-region dual for the tempering exponent, temper the weights,
and refit the twist by weighted maximum likelihood warm-started from the
current parameters.  Iteration 0 runs under the identity twist by default,
so its metrics row doubles as a plain-SMC baseline.

On enumerable models each iteration also records the exact divergences
KL(P_i || pi) and chi^2(pi || P_i); above the path cap those fields stay
absent.  A final evaluation row reports the same metrics for the returned
twist.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .errors import CapacityError, ConfigError
from .fk import DEFAULT_PATH_CAP, FkModel, from_terminal_reward, terminal_reward
from .learn import FitConfig, TwistParams, fit_twist
from .smc import SmcOutput, best_of_n, potential_smc_baseline, run_twisted_smc, sample_base_paths
from .trust_region import annealing_beta_sequence, exact_twisted_divergences, solve_dual
from .twist import TwistFunction, build_twisted, one_hot_features
from .util import logsumexp, normalized_from_log


# --- built-in toy models ---------------------------------------------------

def builtin_chain(S: int, T: int, reward_spread: float, seed: int) -> FkModel:
    """Random ergodic chain with a uniform-random terminal reward.

    Transition rows are Dirichlet(1, ..., 1) draws, the initial distribution
    is uniform, rewards are uniform on [0, reward_spread], alpha = 1.  The
    model is a deterministic function of the arguments.
    """
    if S < 2 or T < 1:
        raise ValueError(f"need S >= 2 and T >= 1, got S={S}, T={T}")
    gen = rng.substream(seed, rng.TAG_MODEL_BUILD)
    with np.errstate(divide="ignore"):
        transitions = tuple(
            np.log(gen.dirichlet(np.ones(S), size=S)) for _ in range(T)
        )
    base = FkModel(
        horizon=T,
        state_sizes=(S,) * (T + 1),
        initial_log_probs=np.full(S, -np.log(S)),
        transition_log_probs=transitions,
        potential_log=tuple(np.zeros(S) for _ in range(T + 1)),
    )
    reward = gen.uniform(0.0, reward_spread, size=S) if reward_spread > 0 else np.zeros(S)
    return from_terminal_reward(base, reward, alpha=1.0)


def builtin_masked_toy(L: int, V: int, seed: int) -> FkModel:
    """Left-to-right unmasking toy: step t fills position t with a token.

    The step-t state space holds the V^t possible prefixes (encoded base V);
    masked positions carry no information, so the trimmed spaces keep the
    whole model enumerable.  Step t draws the new token from a seeded
    per-position distribution, and the terminal reward is a seeded score
    table over the V^L complete sequences, alpha = 1.
    """
    if L < 1 or V < 2:
        raise ValueError(f"need L >= 1 and V >= 2, got L={L}, V={V}")
    if (V + 1) ** L > DEFAULT_PATH_CAP:
        raise CapacityError(f"composite state count (V+1)^L = {(V + 1) ** L} over the cap")
    gen = rng.substream(seed, rng.TAG_MODEL_BUILD)
    sizes = tuple(V**t for t in range(L + 1))
    transitions = []
    for t in range(1, L + 1):
        token_probs = gen.dirichlet(np.ones(V))
        m = np.zeros((sizes[t - 1], sizes[t]))
        for u in range(sizes[t - 1]):
            m[u, u * V : (u + 1) * V] = token_probs
        with np.errstate(divide="ignore"):
            transitions.append(np.log(m))
    base = FkModel(
        horizon=L,
        state_sizes=sizes,
        initial_log_probs=np.zeros(1),
        transition_log_probs=tuple(transitions),
        potential_log=tuple(np.zeros(s) for s in sizes),
    )
    reward = gen.uniform(0.0, 1.0, size=sizes[-1])
    return from_terminal_reward(base, reward, alpha=1.0)


def decode_masked_state(index: int, t: int, L: int, V: int) -> tuple[int, ...]:
    """Tokens of a step-t prefix state; 0 marks a still-masked position."""
    tokens = []
    for _ in range(t):
        tokens.append(index % V + 1)
        index //= V
    tokens.reverse()
    return tuple(tokens) + (0,) * (L - t)


# --- configuration ---------------------------------------------------------

def default_schedule(T: int) -> tuple[int, ...]:
    """Resample every ceil(T/5) steps (interval s gives stages s, 2s, ...)."""
    return schedule_from_interval(T, math.ceil(T / 5))


def schedule_from_interval(T: int, interval: int) -> tuple[int, ...]:
    if interval < 1:
        raise ConfigError(f"resampling interval must be >= 1, got {interval}")
    return tuple(t for t in range(interval, T, interval))


@dataclass
class ExperimentConfig:
    """Resolved configuration for a run or comparison.

    ``model_source`` keeps the provenance record (builtin parameters or the
    file path) for output headers; ``model`` is the resolved object.
    """

    model: FkModel
    model_source: dict
    n_particles: int = 64
    iterations: int = 5
    epsilon: float = 0.2
    schedule: tuple[int, ...] | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    twist_family: str = "tabular"
    features: tuple | None = None
    init_twist: TwistFunction | str = "identity"
    exact_particles: bool = False
    path_cap: int = DEFAULT_PATH_CAP
    out_dir: str | None = None
    # comparison settings
    methods: tuple[str, ...] = ("base", "best_of_n", "potential_smc", "tri_tsmc")
    n_seeds: int = 20
    budgets: dict | None = None
    potential_variant: str = "diff"
    lambda_scale: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.n_particles < 2:
            raise ConfigError(f"particle count must be >= 2, got {self.n_particles}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.twist_family not in ("tabular", "log_linear"):
            raise ConfigError(f"unknown twist family {self.twist_family!r}")
        if self.schedule is None:
            self.schedule = default_schedule(self.model.horizon)
        else:
            self.schedule = tuple(sorted(set(int(t) for t in self.schedule)))
            if self.schedule and not (
                0 <= self.schedule[0] and self.schedule[-1] < self.model.horizon
            ):
                raise ConfigError(f"schedule {self.schedule} outside [0, T-1]")
        unknown = set(self.methods) - {"base", "best_of_n", "potential_smc", "tri_tsmc"}
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        if self.potential_variant not in ("diff", "max"):
            raise ConfigError(f"unknown potential variant {self.potential_variant!r}")

    def initial_params(self) -> TwistParams:
        sizes = self.model.state_sizes
        if isinstance(self.init_twist, TwistFunction):
            params = TwistParams.from_twist(self.init_twist)
            if params.kind != self.twist_family:
                raise ConfigError("initial twist kind does not match the twist family")
            return params
        if self.init_twist == "optimal":
            from .optimal import backward_recursion

            tw = backward_recursion(self.model).psi_star
            if self.twist_family != "tabular":
                raise ConfigError("optimal initialization requires the tabular family")
            return TwistParams.from_twist(tw)
        if self.init_twist != "identity":
            raise ConfigError(f"unknown initial twist {self.init_twist!r}")
        if self.twist_family == "tabular":
            return TwistParams.identity(sizes)
        feats = self.features if self.features is not None else one_hot_features(sizes)
        return TwistParams.log_linear_zeros(feats)


# --- TRI-TSMC outer loop ---------------------------------------------------

@dataclass
class IterationMetrics:
    """Per-iteration diagnostics; exact fields are None above the path cap."""

    iteration: int
    log_Z_estimate: float
    ess_sequence: np.ndarray
    final_ess: float
    lambda_hat: float | None
    tau_hat: float | None
    beta: float
    exact_kl_to_target: float | None
    exact_chi2: float | None
    weighted_reward: float
    fit_loss_first: float | None
    fit_loss_last: float | None
    fit_steps: int | None


@dataclass
class TriTsmcResult:
    final_params: TwistParams
    metrics: list[IterationMetrics]
    n_trajectories: int
    n_kernel_draws: int


def _weighted_reward(model: FkModel, trajectories: np.ndarray, log_weights: np.ndarray) -> float:
    w = normalized_from_log(log_weights)
    r = terminal_reward(model)[np.asarray(trajectories)[:, -1]]
    return float(np.sum(w * r))


def _exact_fields(model, twist, path_cap):
    if model.n_paths > path_cap:
        return None, None
    return exact_twisted_divergences(model, twist, path_cap)


def tri_tsmc(config: ExperimentConfig, eval_final: bool = True) -> TriTsmcResult:
    """Run the trust-region twisted SMC loop; deterministic given the seed.

    Returns the learned parameters plus one metrics row per iteration and,
    when ``eval_final`` is set, an extra evaluation row for the returned
    twist (it runs one more particle sweep but no update).
    """
    model = config.model
    params = config.initial_params()
    metrics: list[IterationMetrics] = []
    lambda_track: list[float] = []
    n_traj = 0
    n_draws = 0

    for i in range(config.iterations):
        twist = params.to_twist()
        row, output, lw, log_base = _evaluate_iteration(config, twist, i)
        if not config.exact_particles:
            n_traj += output.n_trajectories
            n_draws += output.n_kernel_draws

        tr = solve_dual(lw, config.epsilon, log_base_weights=log_base)
        fit = fit_twist(
            params,
            output.trajectories,
            tr.tempered_weights,
            model,
            config.fit,
        )
        params = fit.params

        row.lambda_hat = tr.lambda_hat
        row.tau_hat = tr.tau_hat
        row.fit_loss_first = fit.loss_trace[0][1]
        row.fit_loss_last = fit.loss_trace[-1][1]
        row.fit_steps = fit.loss_trace[-1][0]
        metrics.append(row)
        lambda_track.append(tr.lambda_hat)

    betas = annealing_beta_sequence(lambda_track)
    for row, beta in zip(metrics, betas[:-1]):
        row.beta = float(beta)

    if eval_final:
        row, output, _, _ = _evaluate_iteration(config, params.to_twist(), config.iterations)
        if not config.exact_particles:
            n_traj += output.n_trajectories
            n_draws += output.n_kernel_draws
        row.beta = float(betas[-1])
        metrics.append(row)

    return TriTsmcResult(
        final_params=params,
        metrics=metrics,
        n_trajectories=n_traj,
        n_kernel_draws=n_draws,
    )


def _evaluate_iteration(config: ExperimentConfig, twist: TwistFunction, i: int):
    """One particle sweep (or exact enumeration) plus its metrics row."""
    model = config.model
    if config.exact_particles:
        output, lw, log_base = _exact_particle_sweep(config, twist)
        reward_log_w = lw + log_base
    else:
        seed_i = rng.derive_seed(config.seed, rng.TAG_OUTER_ITERATION, i)
        output = run_twisted_smc(model, twist, config.n_particles, config.schedule, seed_i)
        lw = output.residual_log_weights
        log_base = None
        reward_log_w = lw
    kl, chi2 = _exact_fields(model, twist, config.path_cap)
    row = IterationMetrics(
        iteration=i,
        log_Z_estimate=output.log_Z_estimate,
        ess_sequence=output.ess_sequence,
        final_ess=float(output.ess_sequence[-1]),
        lambda_hat=None,
        tau_hat=None,
        beta=0.0,
        exact_kl_to_target=kl,
        exact_chi2=chi2,
        weighted_reward=_weighted_reward(model, output.trajectories, reward_log_w),
        fit_loss_first=None,
        fit_loss_last=None,
        fit_steps=None,
    )
    return row, output, lw, log_base


def _exact_particle_sweep(config: ExperimentConfig, twist: TwistFunction):
    """Use every path as a particle, with its exact probability as its mass."""
    model = config.model
    if model.n_paths > config.path_cap:
        raise CapacityError("exact particles need an enumerable model")
    from .twist import enumerate_twisted_log_probs, residual_log_weights_batch

    tm = build_twisted(model, twist)
    log_p = enumerate_twisted_log_probs(tm, config.path_cap)
    paths = np.stack(
        np.unravel_index(np.arange(model.n_paths), model.state_sizes), axis=1
    )
    lw = residual_log_weights_batch(tm, paths)
    p = np.exp(log_p)
    output = SmcOutput(
        trajectories=paths,
        residual_log_weights=lw,
        block_log_weights=lw,
        log_Z_estimate=float(logsumexp(log_p + lw)),
        ess_sequence=np.array([1.0 / np.sum(p * p)]),
        ancestors=np.empty((model.horizon, 0), dtype=np.intp),
        schedule=(),
        seed=config.seed,
        n_trajectories=0,
        n_kernel_draws=0,
    )
    return output, lw, log_p


# --- method comparison -----------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    n_particles: int
    n_runs: int
    mean_reward: float
    sd_reward: float
    mean_final_ess: float | None
    var_log_Z: float | None
    n_trajectories: int
    n_kernel_draws: int


def compare_methods(config: ExperimentConfig) -> list[MethodSummary]:
    """Run each configured method across seeds under a matched budget.

    Baselines default to K * I trajectories per run, matching the total the
    trust-region loop consumes over its iterations; explicit per-method
    budgets override this.  Cells run concurrently and the assembled table
    is independent of scheduling order.
    """
    model = config.model
    matched = config.n_particles * config.iterations
    budgets = dict(config.budgets or {})
    cells = [
        (method, s)
        for method in config.methods
        for s in range(config.n_seeds)
    ]

    def run_cell(method: str, s: int):
        seed = rng.derive_seed(config.seed, rng.TAG_COMPARE_CELL, _METHOD_IDS[method], s)
        k = int(budgets.get(method, matched))
        reward = terminal_reward(model)
        if method == "base":
            paths = sample_base_paths(model, k, seed)
            return float(np.mean(reward[paths[:, -1]])), None, None, k, k * model.horizon
        if method == "best_of_n":
            traj = best_of_n(model, k, seed)
            return float(reward[traj[-1]]), None, None, k, k * model.horizon
        if method == "potential_smc":
            estimates = exact_conditional_mean_rewards(model)
            out = potential_smc_baseline(
                model,
                estimates,
                config.potential_variant,
                config.lambda_scale,
                k,
                config.schedule,
                seed,
            )
            return (
                _weighted_reward(model, out.trajectories, out.residual_log_weights),
                float(out.ess_sequence[-1]),
                out.log_Z_estimate,
                out.n_trajectories,
                out.n_kernel_draws,
            )
        # tri_tsmc: K per iteration, reporting from the final iteration's sweep
        cell_cfg = ExperimentConfig(
            model=model,
            model_source=config.model_source,
            n_particles=config.n_particles,
            iterations=config.iterations,
            epsilon=config.epsilon,
            schedule=config.schedule,
            fit=config.fit,
            seed=seed,
            twist_family=config.twist_family,
            features=config.features,
            init_twist=config.init_twist,
            path_cap=config.path_cap,
        )
        res = tri_tsmc(cell_cfg, eval_final=False)
        last = res.metrics[-1]
        return (
            last.weighted_reward,
            last.final_ess,
            last.log_Z_estimate,
            res.n_trajectories,
            res.n_kernel_draws,
        )

    with ThreadPoolExecutor(max_workers=min(8, max(1, len(cells)))) as pool:
        results = dict(
            zip(cells, pool.map(lambda c: run_cell(*c), cells))
        )

    summaries = []
    for method in config.methods:
        rows = [results[(method, s)] for s in range(config.n_seeds)]
        rewards = np.array([r[0] for r in rows])
        esses = [r[1] for r in rows]
        log_zs = [r[2] for r in rows]
        n_traj = rows[0][3]
        n_draws = rows[0][4]
        if method not in budgets:
            # budget parity with the trust-region loop's total consumption
            assert n_traj == matched, (method, n_traj, matched)
            assert n_draws == matched * model.horizon, (method, n_draws)
        summaries.append(
            MethodSummary(
                method=method,
                n_particles=config.n_particles
                if method == "tri_tsmc"
                else int(budgets.get(method, matched)),
                n_runs=config.n_seeds,
                mean_reward=float(rewards.mean()),
                sd_reward=float(rewards.std(ddof=1)) if rewards.size > 1 else 0.0,
                mean_final_ess=None if esses[0] is None else float(np.mean([e for e in esses])),
                var_log_Z=None if log_zs[0] is None else float(np.var(log_zs, ddof=1)),
                n_trajectories=n_traj,
                n_kernel_draws=n_draws,
            )
        )
    return summaries


_METHOD_IDS = {"base": 0, "best_of_n": 1, "potential_smc": 2, "tri_tsmc": 3}


def exact_conditional_mean_rewards(model: FkModel) -> list[np.ndarray]:
    """E[r(X_T) | X_t = x] for every step, by the linear backward recursion."""
    est = [None] * (model.horizon + 1)
    est[model.horizon] = terminal_reward(model)
    for t in range(model.horizon - 1, -1, -1):
        est[t] = np.exp(model.transition_log_probs[t]) @ est[t + 1]
    return est
