import math

import numpy as np
import pytest
import torch

from scipy.integrate import trapezoid

from bidyn.errors import InputError, PreconditionError
from bidyn.func_approx import (
    DTYPE,
    Network,
    ParameterStore,
    check_gradient,
    minimize,
)
from bidyn.policy import (
    BackwardPolicy,
    Discriminator,
    SacAgent,
    SacConfig,
    SquashedGaussian,
    act,
    actor_loss,
    alpha_loss,
    backward_mle_loss,
    bellman_target,
    critic_loss,
    discriminator_accuracy,
    discriminator_loss,
    estimate_value,
    generator_loss,
    polyak_update,
    sac_update,
    train_backward_policy_gan,
    train_backward_policy_mle,
)
from bidyn.rollout import TransitionBatch

LOW, HIGH = (-2.0,), (2.0,)
SMALL = SacConfig(hidden_sizes=(4,), activation="tanh")


def _agent(config=SMALL, seed=0):
    return SacAgent(3, 1, LOW, HIGH, config, generator=torch.Generator().manual_seed(seed))


def _backward(seed=0, **kwargs):
    kwargs.setdefault("hidden_sizes", (4,))
    kwargs.setdefault("activation", "tanh")
    return BackwardPolicy(3, 1, LOW, HIGH, generator=torch.Generator().manual_seed(seed), **kwargs)


def _discriminator(seed=0, **kwargs):
    kwargs.setdefault("hidden_sizes", (4,))
    kwargs.setdefault("activation", "tanh")
    return Discriminator(3, 1, generator=torch.Generator().manual_seed(seed), **kwargs)


def _batch(n, rng, r=None, done=None):
    return TransitionBatch(
        s=rng.normal(size=(n, 3)),
        a=rng.uniform(-2, 2, size=(n, 1)),
        r=rng.normal(size=n) if r is None else np.full(n, r),
        s_next=rng.normal(size=(n, 3)),
        done=np.zeros(n) if done is None else np.full(n, done),
        source=np.zeros(n, dtype=np.int8),
    )


def _zero(store: ParameterStore):
    store.load_arrays({name: np.zeros(tuple(t.shape)) for name, t in store.items()})


#####################################################################
# gradient checks for every loss
#####################################################################


@pytest.mark.parametrize("seed", range(20))
def test_critic_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    agent = _agent(seed=seed)
    batch = (rng.normal(size=(5, 3)), rng.uniform(-2, 2, (5, 1)), rng.normal(size=5))
    assert check_gradient(agent.q1, agent.q_spec, critic_loss, batch) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_actor_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    agent = _agent(seed=seed)
    batch = (agent, rng.normal(size=(5, 3)), rng.standard_normal((5, 1)))
    assert check_gradient(agent.policy, agent.policy_spec, actor_loss, batch) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_alpha_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    agent = _agent(seed=seed)
    batch = (rng.normal(size=8), agent.target_entropy)
    assert check_gradient(agent.log_alpha, None, alpha_loss, batch) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_backward_mle_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    policy = _backward(seed)
    batch = (policy, rng.normal(size=(5, 3)), rng.uniform(-1.9, 1.9, (5, 1)))
    assert check_gradient(policy.params, policy.spec, backward_mle_loss, batch) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_discriminator_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    disc = _discriminator(seed)
    batch = (
        rng.uniform(-2, 2, (5, 1)),
        rng.normal(size=(5, 3)),
        rng.uniform(-2, 2, (5, 1)),
        rng.normal(size=(5, 3)),
    )
    assert check_gradient(disc.params, disc.spec, discriminator_loss, batch) < 1e-4


@pytest.mark.parametrize("non_saturating", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_generator_loss_gradient(seed, non_saturating):
    rng = np.random.default_rng(seed)
    policy = _backward(seed)
    disc = _discriminator(seed + 100)
    batch = (policy, disc, rng.normal(size=(5, 3)), rng.standard_normal((5, 1)), non_saturating)
    assert check_gradient(policy.params, policy.spec, generator_loss, batch) < 1e-4


#####################################################################
# squashed gaussian head
#####################################################################


def test_squashed_density_integrates_to_one():
    head = SquashedGaussian(LOW, HIGH)
    out = torch.tensor([0.3, -0.5], dtype=DTYPE)
    grid = np.linspace(-2.0, 2.0, 200001)[1:-1]
    actions = torch.tensor(grid[:, None], dtype=DTYPE)
    density = torch.exp(head.log_prob(out.expand(len(grid), 2), actions)).numpy()
    assert trapezoid(density, grid) == pytest.approx(1.0, abs=0.02)


def test_rsample_log_prob_matches_log_prob():
    head = SquashedGaussian(LOW, HIGH)
    out = torch.tensor([[0.1, -1.0], [-0.4, 0.2]], dtype=DTYPE)
    noise = torch.tensor([[0.5], [-1.2]], dtype=DTYPE)
    action, log_prob = head.rsample(out, noise)
    np.testing.assert_allclose(head.log_prob(out, action).numpy(), log_prob.numpy(), atol=1e-6)


def test_squashed_gaussian_rejects_bad_bounds():
    with pytest.raises(InputError):
        SquashedGaussian((1.0,), (1.0,))


#####################################################################
# act / estimate_value
#####################################################################


def test_act_within_bounds():
    agent = _agent(SacConfig())
    rng = np.random.default_rng(0)
    obs = rng.normal(scale=50.0, size=(500, 3))
    for deterministic in (True, False):
        actions = act(agent, obs, deterministic=deterministic, rng=rng)
        assert actions.shape == (500, 1)
        assert np.all(actions >= -2.0) and np.all(actions <= 2.0)


def test_act_deterministic_repeats():
    agent = _agent()
    obs = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(act(agent, obs, True), act(agent, obs, True))


def test_act_stochastic_seeded():
    agent = _agent()
    obs = np.array([0.1, 0.2, 0.3])
    first = act(agent, obs, rng=np.random.default_rng(5))
    second = act(agent, obs, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(first, second)
    assert first.shape == (1,)


def test_act_stochastic_needs_rng():
    with pytest.raises(InputError):
        act(_agent(), np.zeros(3))


def test_value_zero_critics_and_temperature():
    agent = _agent()
    _zero(agent.q1)
    _zero(agent.q2)
    agent.log_alpha.load_arrays({"log_alpha": np.array(-50.0)})
    value = estimate_value(agent, np.array([0.5, -0.5, 1.0]), 16, np.random.default_rng(0))
    assert abs(value) < 1e-12


def test_value_matches_monte_carlo():
    agent = _agent(SacConfig())
    obs = np.array([0.2, -0.7, 0.4])
    reference = estimate_value(agent, obs, 10_000, np.random.default_rng(123))
    rng = np.random.default_rng(7)
    repeats = np.array([estimate_value(agent, obs, 32, rng) for _ in range(500)])
    standard_error = repeats.std()
    estimate = estimate_value(agent, obs, 32, np.random.default_rng(8))
    assert abs(estimate - reference) < 3.0 * standard_error
    assert abs(repeats.mean() - reference) < 3.0 * standard_error / math.sqrt(50)


def test_value_shifts_with_critic_offset():
    agent = _agent()
    obs = np.array([[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]])
    before = estimate_value(agent, obs, 8, np.random.default_rng(3))
    last = f"layer{len(agent.q_spec.hidden_sizes)}.bias"
    with torch.no_grad():
        agent.q1[last].add_(2.5)
        agent.q2[last].add_(2.5)
    after = estimate_value(agent, obs, 8, np.random.default_rng(3))
    np.testing.assert_allclose(after - before, 2.5, atol=1e-10)
    assert before.shape == (2,)


def test_value_needs_samples():
    with pytest.raises(InputError):
        estimate_value(_agent(), np.zeros(3), 0, np.random.default_rng(0))


#####################################################################
# sac_update
#####################################################################


def test_sac_update_empty_batch():
    with pytest.raises(PreconditionError):
        sac_update(_agent(), _batch(0, np.random.default_rng(0)), np.random.default_rng(0))


def test_terminal_zero_reward_target_is_zero():
    agent = _agent()
    batch = _batch(4, np.random.default_rng(0), r=0.0, done=1.0)
    noise = np.random.default_rng(1).standard_normal((4, 1))
    target = bellman_target(agent, batch.r, batch.s_next, batch.done, noise)
    np.testing.assert_array_equal(target.numpy(), np.zeros(4))


def test_critic_loss_decreases_on_fixed_point():
    agent = _agent(SacConfig(hidden_sizes=(16,), lr=1e-2))
    rng = np.random.default_rng(0)
    one = _batch(1, rng, r=0.0, done=1.0)
    batch = TransitionBatch(
        *(np.repeat(getattr(one, name), 32, axis=0) for name in ("s", "a", "r", "s_next", "done", "source"))
    )
    losses = [sac_update(agent, batch, rng).q1_loss for _ in range(100)]
    assert losses[-1] < 0.5 * losses[0]


def test_sac_update_polyak_targets():
    agent = _agent()
    old_target = agent.q1_target.arrays()
    sac_update(agent, _batch(16, np.random.default_rng(0)), np.random.default_rng(1))
    online = agent.q1.arrays()
    target = agent.q1_target.arrays()
    for name in old_target:
        expected = (1.0 - agent.tau) * old_target[name] + agent.tau * online[name]
        np.testing.assert_allclose(target[name], expected, rtol=1e-12, atol=1e-15)


def test_polyak_update_exact():
    target = ParameterStore({"w": np.array([1.0, 2.0])})
    online = ParameterStore({"w": np.array([3.0, -2.0])})
    polyak_update(target, online, 0.25)
    np.testing.assert_allclose(target.arrays()["w"], [1.5, 1.0])


def test_sac_update_report_is_finite():
    agent = _agent()
    report = sac_update(agent, _batch(32, np.random.default_rng(2)), np.random.default_rng(3))
    for value in (report.q1_loss, report.q2_loss, report.pi_loss, report.alpha_loss, report.entropy):
        assert math.isfinite(value)
    assert report.alpha > 0


@pytest.mark.parametrize("log_prob, direction", [(2.0, 1.0), (-3.0, -1.0)])
def test_alpha_moves_toward_target_entropy(log_prob, direction):
    agent = _agent()
    before = agent.alpha
    minimize(agent.log_alpha, None, alpha_loss, (np.full(8, log_prob), agent.target_entropy))
    assert math.copysign(1.0, agent.alpha - before) == direction


def test_agent_target_entropy_default():
    assert _agent().target_entropy == -1.0
    assert _agent().alpha == pytest.approx(0.2)


def test_agent_records_round_trip():
    agent = _agent(seed=1)
    records = agent.records("agent")
    assert "agent/alpha/log_alpha" in records
    assert "agent/q2_target/layer0.weight" in records
    other = _agent(seed=2)
    other.load_records("agent", records)
    obs = np.array([0.3, 0.3, 0.3])
    np.testing.assert_array_equal(act(agent, obs, True), act(other, obs, True))


#####################################################################
# backward policy
#####################################################################


def test_backward_mle_empty():
    with pytest.raises(PreconditionError):
        train_backward_policy_mle(
            _backward(), _batch(0, np.random.default_rng(0)), np.random.default_rng(0)
        )


def test_backward_mle_recovers_linear_map():
    rng = np.random.default_rng(0)
    w = np.array([[0.3, -0.2, 0.1]])
    s_next = rng.uniform(-1.0, 1.0, size=(2000, 3))
    a = s_next @ w.T + 0.05 * rng.standard_normal((2000, 1))
    data = TransitionBatch(
        s=np.zeros_like(s_next),
        a=a,
        r=np.zeros(2000),
        s_next=s_next,
        done=np.zeros(2000),
        source=np.zeros(2000, dtype=np.int8),
    )
    policy = _backward(hidden_sizes=(32,), lr=3e-3)
    train_backward_policy_mle(policy, data, rng, steps=3000, batch_size=256)

    probe = rng.uniform(-1.0, 1.0, size=(500, 3))
    mean = policy.mean_action(probe)
    fitted, *_ = np.linalg.lstsq(probe, mean, rcond=None)
    assert np.linalg.norm(fitted.T - w) < 0.05 * np.linalg.norm(w)


def test_backward_mle_single_pair_nll_decreases():
    one = TransitionBatch(
        s=np.zeros((1, 3)),
        a=np.array([[0.5]]),
        r=np.zeros(1),
        s_next=np.array([[0.1, 0.2, 0.3]]),
        done=np.zeros(1),
        source=np.zeros(1, dtype=np.int8),
    )
    policy = _backward()
    rng = np.random.default_rng(0)
    losses = [train_backward_policy_mle(policy, one, rng, steps=1) for _ in range(20)]
    assert np.all(np.diff(losses) < 0)


def test_backward_policy_samples_within_bounds():
    policy = _backward()
    samples = policy.sample(np.random.default_rng(0).normal(scale=10.0, size=(200, 3)), np.random.default_rng(1))
    assert samples.shape == (200, 1)
    assert np.all(np.abs(samples) <= 2.0)
    log_prob = policy.log_prob(samples, np.zeros((200, 3)))
    assert np.all(np.isfinite(log_prob))


def test_uninformative_discriminator_loss():
    disc = _discriminator()
    _zero(disc.params)
    rng = np.random.default_rng(0)
    batch = (
        rng.uniform(-2, 2, (16, 1)),
        rng.normal(size=(16, 3)),
        rng.uniform(-2, 2, (16, 1)),
        rng.normal(size=(16, 3)),
    )
    loss = discriminator_loss(Network(disc.params, disc.spec), batch)
    assert float(loss) == pytest.approx(2.0 * math.log(2.0))


def test_gan_first_discriminator_loss_uninformative():
    disc = _discriminator()
    _zero(disc.params)
    data = _batch(64, np.random.default_rng(0))
    d_loss, g_loss = train_backward_policy_gan(
        _backward(), disc, data, np.random.default_rng(1), steps=1
    )
    assert d_loss == pytest.approx(2.0 * math.log(2.0))
    assert math.isfinite(g_loss)


def test_gan_empty():
    with pytest.raises(PreconditionError):
        train_backward_policy_gan(
            _backward(), _discriminator(), _batch(0, np.random.default_rng(0)), np.random.default_rng(0)
        )


def _separable(rng, n=256):
    s = rng.normal(size=(n, 3))
    return (np.full((n, 1), 1.5), s), (np.full((n, 1), -1.5), s)


def _trained_discriminator(rng):
    disc = _discriminator(hidden_sizes=(16,), lr=1e-2)
    (a_real, s_real), (a_fake, s_fake) = _separable(rng)
    for _ in range(200):
        minimize(disc.params, disc.spec, discriminator_loss, (a_real, s_real, a_fake, s_fake))
    return disc


def test_discriminator_learns_separable_data():
    rng = np.random.default_rng(0)
    disc = _trained_discriminator(rng)
    real, fake = _separable(np.random.default_rng(1))
    assert discriminator_accuracy(disc, real, fake) > 0.9


def test_generator_step_raises_fake_logits():
    rng = np.random.default_rng(0)
    disc = _trained_discriminator(rng)
    policy = _backward()
    s_next = rng.normal(size=(128, 3))
    noise = rng.standard_normal((128, 1))

    def mean_fake_logit():
        with torch.no_grad():
            out = policy._out(s_next)
            fake, _ = policy.head.rsample(out, torch.as_tensor(noise))
            return float(disc.logits(fake, s_next).mean())

    before = mean_fake_logit()
    for _ in range(20):
        minimize(policy.params, policy.spec, generator_loss, (policy, disc, s_next, noise, False))
    assert mean_fake_logit() > before


def test_discriminator_accuracy_counts():
    disc = _discriminator()
    _zero(disc.params)
    real = (np.zeros((4, 1)), np.zeros((4, 3)))
    fake = (np.zeros((6, 1)), np.zeros((6, 3)))
    # logit 0 counts as fake
    assert discriminator_accuracy(disc, real, fake) == pytest.approx(0.6)
