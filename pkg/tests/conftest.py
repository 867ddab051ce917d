import numpy as np
import pytest

from twistsmc import FkModel, from_terminal_reward


def uniform_chain(n_states: int, horizon: int) -> FkModel:
    """Uniform initial distribution and uniform transitions, unit potentials."""
    log_u = np.full(n_states, -np.log(n_states))
    return FkModel(
        horizon=horizon,
        state_sizes=(n_states,) * (horizon + 1),
        initial_log_probs=log_u,
        transition_log_probs=tuple(
            np.tile(log_u, (n_states, 1)) for _ in range(horizon)
        ),
        potential_log=tuple(np.zeros(n_states) for _ in range(horizon + 1)),
    )


def random_model(
    seed: int,
    sizes,
    potentials: str = "random",
    potential_scale: float = 1.0,
) -> FkModel:
    """Seeded random model built with numpy's default generator.

    Deliberately independent of the library's stream-splitting scheme so it
    can serve as a neutral source of test instances.
    """
    gen = np.random.default_rng(seed)
    sizes = tuple(int(s) for s in sizes)
    init = gen.dirichlet(np.ones(sizes[0]))
    transitions = tuple(
        np.log(gen.dirichlet(np.ones(sizes[t]), size=sizes[t - 1]))
        for t in range(1, len(sizes))
    )
    if potentials == "unit":
        pots = tuple(np.zeros(s) for s in sizes)
    else:
        pots = tuple(gen.uniform(-potential_scale, potential_scale, size=s) for s in sizes)
    return FkModel(
        horizon=len(sizes) - 1,
        state_sizes=sizes,
        initial_log_probs=np.log(init),
        transition_log_probs=transitions,
        potential_log=pots,
    )


def random_terminal_reward_model(seed: int, n_states: int, horizon: int, spread: float = 2.0) -> FkModel:
    gen = np.random.default_rng(seed)
    base = random_model(seed + 1000, (n_states,) * (horizon + 1), potentials="unit")
    return from_terminal_reward(base, gen.uniform(0.0, spread, n_states), alpha=1.0)


@pytest.fixture
def c1() -> FkModel:
    """Two-state, two-transition uniform chain with terminal reward (1, 0)."""
    return from_terminal_reward(uniform_chain(2, 2), [1.0, 0.0], 1.0)


def all_trajectories(model: FkModel):
    import itertools

    return itertools.product(*(range(s) for s in model.state_sizes))
