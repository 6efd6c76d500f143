import numpy as np
import pytest
import torch

from bidyn.dynamics import Direction, EnsembleConfig, ProbabilisticEnsemble
from bidyn.errors import InputError, StateError
from bidyn.mpc import MpcConfig, plan_action, score_candidates
from bidyn.policy import SacAgent, SacConfig, act

A = np.array([[0.9, 0.1], [-0.1, 0.9]])
B = np.array([[0.1], [0.05]])
STATE = np.array([0.3, -0.2])


def _agent(seed=0):
    config = SacConfig(hidden_sizes=(4,), activation="tanh", gamma=0.9)
    return SacAgent(2, 1, (-1.0,), (1.0,), config, generator=torch.Generator().manual_seed(seed))


@pytest.fixture
def model(mocker):
    ensemble = mocker.Mock(trained=True, elite_indices=[0, 2, 3])
    calls = []

    def linear_predict(ens, conditioning, member=None, rng=None, deterministic=False):
        state, action = conditioning
        calls.append(np.array(member))
        return state @ A.T + action @ B.T, -np.sum(state ** 2, axis=-1) - 0.1 * action[:, 0] ** 2

    mocker.patch("bidyn.mpc.predict", side_effect=linear_predict)
    return ensemble, calls


#####################################################################
# MpcConfig
#####################################################################


def test_mpc_config_defaults():
    config = MpcConfig()
    assert config.horizon == 6
    assert config.active


@pytest.mark.parametrize("kwargs", [dict(horizon=-1), dict(n_candidates=0)])
def test_mpc_config_rejects_invalid(kwargs):
    with pytest.raises(InputError):
        MpcConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(horizon=0), dict(enabled=False)])
def test_mpc_config_inactive(kwargs):
    assert not MpcConfig(**kwargs).active


#####################################################################
# plan_action
#####################################################################


@pytest.mark.parametrize("kwargs", [dict(horizon=0), dict(enabled=False)])
def test_inactive_mpc_is_raw_policy(model, kwargs):
    ensemble, calls = model
    agent = _agent()
    planned = plan_action(STATE, agent, ensemble, MpcConfig(**kwargs), np.random.default_rng(4))
    raw = act(agent, STATE, deterministic=False, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(planned, raw)
    assert calls == []


def test_plan_returns_first_action_of_best_candidate(model):
    ensemble, _ = model
    agent = _agent()
    config = MpcConfig(horizon=4, n_candidates=30, value_samples=2)
    plan = score_candidates(STATE, agent, ensemble, config, np.random.default_rng(1))
    assert plan.first_actions.shape == (30, 1)
    assert np.all(plan.scores[plan.best_index] >= plan.scores)
    np.testing.assert_array_equal(plan.action, plan.first_actions[plan.best_index])

    action = plan_action(STATE, agent, ensemble, config, np.random.default_rng(1))
    np.testing.assert_array_equal(action, plan.action)


def test_single_candidate_plan(model):
    ensemble, _ = model
    plan = score_candidates(
        STATE, _agent(), ensemble, MpcConfig(horizon=3, n_candidates=1), np.random.default_rng(2)
    )
    assert plan.best_index == 0
    np.testing.assert_array_equal(plan.action, plan.first_actions[0])


def test_candidates_keep_one_elite_member(model):
    ensemble, calls = model
    score_candidates(
        STATE, _agent(), ensemble, MpcConfig(horizon=5, n_candidates=40), np.random.default_rng(3)
    )
    assert len(calls) == 5
    for members in calls[1:]:
        np.testing.assert_array_equal(members, calls[0])
    assert set(calls[0].tolist()) <= {0, 2, 3}


def test_scores_discount_rewards_and_terminal_value(mocker):
    ensemble = mocker.Mock(trained=True, elite_indices=[0])
    mocker.patch(
        "bidyn.mpc.predict",
        side_effect=lambda ens, cond, member=None, rng=None: (cond[0], np.ones(len(cond[0]))),
    )
    mocker.patch("bidyn.mpc.estimate_value", side_effect=lambda agent, s, n, rng: np.full(len(s), 10.0))
    plan = score_candidates(
        STATE, _agent(), ensemble, MpcConfig(horizon=3, n_candidates=4), np.random.default_rng(0)
    )
    expected = 1.0 + 0.9 + 0.81 + 0.729 * 10.0
    np.testing.assert_allclose(plan.scores, expected)


def test_plan_untrained_ensemble():
    config = EnsembleConfig(ensemble_size=2, n_elites=2, hidden_sizes=(4,))
    untrained = ProbabilisticEnsemble(
        Direction.Forward, 2, 1, config, torch.Generator().manual_seed(0)
    )
    with pytest.raises(StateError):
        plan_action(STATE, _agent(), untrained, MpcConfig(), np.random.default_rng(0))


def test_plan_is_seeded(model):
    ensemble, _ = model
    agent = _agent()
    config = MpcConfig(horizon=2, n_candidates=8, value_samples=2)
    first = plan_action(STATE, agent, ensemble, config, np.random.default_rng(9))
    second = plan_action(STATE, agent, ensemble, config, np.random.default_rng(9))
    np.testing.assert_array_equal(first, second)
