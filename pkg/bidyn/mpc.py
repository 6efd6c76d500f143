"""Policy-guided shooting for the actions taken in the real environment.

Candidates are action sequences sampled from the stochastic policy while it
is rolled through the forward ensemble. Each candidate sticks to one
uniformly drawn elite for its whole rollout. MPC is used on the training
path only; evaluation acts with the policy directly.
"""
from dataclasses import dataclass

import numpy as np

from bidyn.dynamics import ProbabilisticEnsemble, predict
from bidyn.errors import InputError, StateError
from bidyn.policy import SacAgent, act, estimate_value


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 6
    n_candidates: int = 50
    enabled: bool = True
    value_samples: int = 8

    def __post_init__(self):
        if self.horizon < 0:
            raise InputError(f"mpc horizon must be >= 0, got {self.horizon}")
        if self.n_candidates < 1:
            raise InputError(f"mpc needs at least one candidate, got {self.n_candidates}")

    @property
    def active(self) -> bool:
        return self.enabled and self.horizon > 0


@dataclass
class MpcPlan:
    first_actions: np.ndarray
    scores: np.ndarray
    best_index: int

    @property
    def action(self) -> np.ndarray:
        return self.first_actions[self.best_index]


def score_candidates(
    state: np.ndarray,
    agent: SacAgent,
    forward_ensemble: ProbabilisticEnsemble,
    config: MpcConfig,
    rng: np.random.Generator,
) -> MpcPlan:
    """Score ``n_candidates`` policy rollouts of ``horizon`` model steps.

    A candidate scores its discounted model rewards plus ``gamma**H`` times
    the soft value of its last simulated state.
    """
    if not forward_ensemble.trained:
        raise StateError("mpc needs a trained forward ensemble")
    if config.horizon < 1:
        raise InputError("scoring candidates needs horizon >= 1")

    n = config.n_candidates
    states = np.repeat(np.asarray(state, dtype=np.float64)[None], n, axis=0)
    members = rng.choice(np.asarray(forward_ensemble.elite_indices), size=n)
    scores = np.zeros(n)
    first_actions = None
    discount = 1.0
    for _ in range(config.horizon):
        actions = act(agent, states, deterministic=False, rng=rng)
        if first_actions is None:
            first_actions = actions
        states, rewards = predict(forward_ensemble, (states, actions), member=members, rng=rng)
        scores += discount * rewards
        discount *= agent.gamma
    scores += discount * estimate_value(agent, states, config.value_samples, rng)
    return MpcPlan(
        first_actions=first_actions, scores=scores, best_index=int(np.argmax(scores))
    )


def plan_action(
    state: np.ndarray,
    agent: SacAgent,
    forward_ensemble: ProbabilisticEnsemble,
    config: MpcConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """First action of the best candidate, or a plain policy sample when MPC is off."""
    if not config.active:
        return act(agent, state, deterministic=False, rng=rng)
    return score_candidates(state, agent, forward_ensemble, config, rng).action
