"""Soft actor-critic agent and the backward policy.

The forward policy, both critics and the backward policy are perceptrons
evaluated from :class:`~bidyn.func_approx.ParameterStore` objects. Every
loss below is a plain function ``loss(net, batch)`` whose sampling noise is
part of ``batch``, so the same function serves training and the
finite-difference gradient checks.
"""
import enum
import math

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from bidyn.errors import InputError, PreconditionError
from bidyn.func_approx import (
    DTYPE,
    MlpSpec,
    ParameterStore,
    as_tensor,
    forward_eval,
    minimize,
    prefixed,
    unprefixed,
)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
# keeps atanh finite for actions on the bounds
SQUASH_EPS = 1e-6


class BackwardPolicyLoss(enum.Enum):
    Mle = "mle"
    Gan = "gan"


@dataclass(frozen=True)
class SacConfig:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    init_alpha: float = 0.2
    target_entropy: Optional[float] = None
    batch_size: int = 256
    value_samples: int = 8

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise InputError(f"tau must be in (0, 1], got {self.tau}")
        if self.init_alpha <= 0.0:
            raise InputError("init_alpha must be positive")
        if self.value_samples < 1:
            raise InputError("value_samples must be >= 1")


###########################################################################
#                                                                         #
#                      tanh-squashed gaussian head                        #
#                                                                         #
###########################################################################


class SquashedGaussian:
    """Gaussian over pre-squash actions mapped through ``scale * tanh + bias``."""

    def __init__(self, action_low: Sequence[float], action_high: Sequence[float]):
        low = np.asarray(action_low, dtype=np.float64)
        high = np.asarray(action_high, dtype=np.float64)
        if low.shape != high.shape or np.any(low >= high):
            raise InputError("action_low must be below action_high elementwise")
        self.act_dim = low.shape[0]
        self.low = low
        self.high = high
        self.scale = as_tensor((high - low) / 2.0)
        self.bias = as_tensor((high + low) / 2.0)

    def split(self, out: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = out[..., : self.act_dim], out[..., self.act_dim :]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def rsample(
        self, out: torch.Tensor, noise: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized action and its log density in action space."""
        mean, log_std = self.split(out)
        u = mean + torch.exp(log_std) * noise
        return self.squash(u), self._log_prob_u(u, mean, log_std)

    def squash(self, u: torch.Tensor) -> torch.Tensor:
        return self.scale * torch.tanh(u) + self.bias

    def deterministic(self, out: torch.Tensor) -> torch.Tensor:
        mean, _ = self.split(out)
        return self.squash(mean)

    def log_prob(self, out: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        mean, log_std = self.split(out)
        y = torch.clamp((action - self.bias) / self.scale, -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
        return self._log_prob_u(torch.atanh(y), mean, log_std)

    def _log_prob_u(self, u, mean, log_std) -> torch.Tensor:
        z = (u - mean) * torch.exp(-log_std)
        gauss = -0.5 * z.pow(2) - log_std - 0.5 * math.log(2.0 * math.pi)
        # log |d tanh(u) / du| = 2 (log 2 - u - softplus(-2u))
        log_det = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u)) + torch.log(self.scale)
        return (gauss - log_det).sum(-1)


###########################################################################
#                                                                         #
#                                sac agent                                #
#                                                                         #
###########################################################################


class SacAgent:
    """Squashed-Gaussian actor, twin critics with Polyak targets, learned alpha.

    Parameters
    ----------
    obs_dim, act_dim: int
    action_low, action_high: sequence of float
        bounds every action is squashed into
    config: SacConfig
    generator: torch.Generator
        seeds weight initialization
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        action_low: Sequence[float],
        action_high: Sequence[float],
        config: SacConfig = SacConfig(),
        generator: Optional[torch.Generator] = None,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.config = config
        self.head = SquashedGaussian(action_low, action_high)
        self.policy_spec = MlpSpec(obs_dim, 2 * act_dim, config.hidden_sizes, config.activation)
        self.q_spec = MlpSpec(obs_dim + act_dim, 1, config.hidden_sizes, config.activation)

        self.policy = ParameterStore.for_mlp(self.policy_spec, generator, lr=config.lr)
        self.q1 = ParameterStore.for_mlp(self.q_spec, generator, lr=config.lr)
        self.q2 = ParameterStore.for_mlp(self.q_spec, generator, lr=config.lr)
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()
        self.log_alpha = ParameterStore(
            {"log_alpha": np.array(math.log(config.init_alpha))}, lr=config.lr
        )
        self.gamma = config.gamma
        self.tau = config.tau
        self.target_entropy = (
            -float(act_dim) if config.target_entropy is None else config.target_entropy
        )

    @property
    def alpha(self) -> float:
        return math.exp(float(self.log_alpha["log_alpha"]))

    def q_values(self, store: ParameterStore, obs, action) -> torch.Tensor:
        x = torch.cat([as_tensor(obs), as_tensor(action)], dim=-1)
        return forward_eval(store, self.q_spec, x)[..., 0]

    def stores(self):
        return {
            "policy": self.policy,
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
            "alpha": self.log_alpha,
        }

    def records(self, prefix: str) -> dict:
        out = {}
        for name, store in self.stores().items():
            out.update(prefixed(f"{prefix}/{name}", store.arrays()))
        return out

    def load_records(self, prefix: str, records: dict):
        for name, store in self.stores().items():
            store.load_arrays(unprefixed(f"{prefix}/{name}", records))


@dataclass
class SacLossReport:
    q1_loss: float
    q2_loss: float
    pi_loss: float
    alpha_loss: float
    alpha: float
    entropy: float


def critic_loss(net, batch) -> torch.Tensor:
    """Mean squared Bellman error of one critic; ``batch = (obs, act, target)``."""
    obs, act, target = batch
    q = net(torch.cat([as_tensor(obs), as_tensor(act)], dim=-1))[..., 0]
    return (q - as_tensor(target)).pow(2).mean()


def actor_loss(net, batch) -> torch.Tensor:
    """``E[alpha log pi(a|s) - min Q(s, a)]`` with ``a`` reparameterized.

    ``batch = (agent, obs, noise)``.
    """
    agent, obs, noise = batch
    action, log_prob = agent.head.rsample(net(obs), as_tensor(noise))
    q = torch.min(agent.q_values(agent.q1, obs, action), agent.q_values(agent.q2, obs, action))
    return (agent.alpha * log_prob - q).mean()


def alpha_loss(net, batch) -> torch.Tensor:
    """Temperature loss; ``batch = (log_prob, target_entropy)``."""
    log_prob, target_entropy = batch
    log_alpha = net.params["log_alpha"]
    return -(log_alpha * (as_tensor(log_prob) + target_entropy)).mean()


def bellman_target(agent: SacAgent, reward, obs_next, done, noise) -> torch.Tensor:
    with torch.no_grad():
        out = forward_eval(agent.policy, agent.policy_spec, obs_next)
        a_next, logp_next = agent.head.rsample(out, as_tensor(noise))
        q_next = torch.min(
            agent.q_values(agent.q1_target, obs_next, a_next),
            agent.q_values(agent.q2_target, obs_next, a_next),
        )
        soft = q_next - agent.alpha * logp_next
        return as_tensor(reward) + agent.gamma * (1.0 - as_tensor(done)) * soft


def polyak_update(target: ParameterStore, online: ParameterStore, tau: float):
    """``target <- (1 - tau) target + tau online`` in place."""
    with torch.no_grad():
        for (_, t), (_, o) in zip(target.items(), online.items()):
            t.mul_(1.0 - tau).add_(o, alpha=tau)


def sac_update(agent: SacAgent, batch, rng: np.random.Generator) -> SacLossReport:
    """One critic, actor and temperature step followed by the target update.

    ``batch`` needs ``s``, ``a``, ``r``, ``s_next`` and ``done`` columns.
    """
    n = len(batch.s)
    if n == 0:
        raise PreconditionError("sac_update needs a nonempty batch")

    obs = as_tensor(batch.s)
    act = as_tensor(batch.a)
    noise_next = rng.standard_normal((n, agent.act_dim))
    target = bellman_target(agent, batch.r, batch.s_next, batch.done, noise_next)

    q1_loss = minimize(agent.q1, agent.q_spec, critic_loss, (obs, act, target))
    q2_loss = minimize(agent.q2, agent.q_spec, critic_loss, (obs, act, target))

    noise = rng.standard_normal((n, agent.act_dim))
    pi_loss = minimize(agent.policy, agent.policy_spec, actor_loss, (agent, obs, noise))

    with torch.no_grad():
        out = forward_eval(agent.policy, agent.policy_spec, obs)
        _, log_prob = agent.head.rsample(out, as_tensor(noise))
    a_loss = minimize(agent.log_alpha, None, alpha_loss, (log_prob, agent.target_entropy))

    polyak_update(agent.q1_target, agent.q1, agent.tau)
    polyak_update(agent.q2_target, agent.q2, agent.tau)
    return SacLossReport(
        q1_loss=q1_loss,
        q2_loss=q2_loss,
        pi_loss=pi_loss,
        alpha_loss=a_loss,
        alpha=agent.alpha,
        entropy=-float(log_prob.mean()),
    )


def act(
    agent: SacAgent,
    observation,
    deterministic: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Action for one observation or a batch of them, inside the bounds."""
    obs = np.asarray(observation, dtype=np.float64)
    with torch.no_grad():
        out = forward_eval(agent.policy, agent.policy_spec, obs)
        if deterministic:
            action = agent.head.deterministic(out)
        else:
            if rng is None:
                raise InputError("stochastic actions need an rng")
            noise = rng.standard_normal(obs.shape[:-1] + (agent.act_dim,))
            action, _ = agent.head.rsample(out, as_tensor(noise))
    return np.clip(action.numpy(), agent.head.low, agent.head.high)


def estimate_value(
    agent: SacAgent,
    observation,
    n_action_samples: int,
    rng: np.random.Generator,
):
    """Soft value ``E_a[min Q(s, a) - alpha log pi(a|s)]`` by sampling.

    Returns a float for a single observation and an array for a batch.
    """
    if n_action_samples < 1:
        raise InputError("n_action_samples must be >= 1")
    obs = as_tensor(np.asarray(observation, dtype=np.float64))
    single = obs.dim() == 1
    obs = obs.reshape(-1, agent.obs_dim)
    with torch.no_grad():
        out = forward_eval(agent.policy, agent.policy_spec, obs)
        rep_out = out.unsqueeze(0).expand(n_action_samples, *out.shape)
        rep_obs = obs.unsqueeze(0).expand(n_action_samples, *obs.shape)
        noise = as_tensor(rng.standard_normal((n_action_samples, obs.shape[0], agent.act_dim)))
        action, log_prob = agent.head.rsample(rep_out, noise)
        q = torch.min(
            agent.q_values(agent.q1, rep_obs, action),
            agent.q_values(agent.q2, rep_obs, action),
        )
        value = (q - agent.alpha * log_prob).mean(0).numpy()
    return float(value[0]) if single else value


###########################################################################
#                                                                         #
#                             backward policy                             #
#                                                                         #
###########################################################################


class BackwardPolicy:
    """``pi_back(a | s')``: the action that most plausibly led into ``s'``."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        action_low: Sequence[float],
        action_high: Sequence[float],
        hidden_sizes: Tuple[int, ...] = (64, 64),
        activation: str = "relu",
        lr: float = 1e-3,
        generator: Optional[torch.Generator] = None,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.head = SquashedGaussian(action_low, action_high)
        self.spec = MlpSpec(obs_dim, 2 * act_dim, hidden_sizes, activation)
        self.params = ParameterStore.for_mlp(self.spec, generator, lr=lr)

    def _out(self, s_next) -> torch.Tensor:
        return forward_eval(self.params, self.spec, s_next)

    def sample(self, s_next, rng: np.random.Generator) -> np.ndarray:
        s_next = np.asarray(s_next, dtype=np.float64)
        with torch.no_grad():
            noise = rng.standard_normal(s_next.shape[:-1] + (self.act_dim,))
            action, _ = self.head.rsample(self._out(s_next), as_tensor(noise))
        return np.clip(action.numpy(), self.head.low, self.head.high)

    def mean_action(self, s_next) -> np.ndarray:
        with torch.no_grad():
            return self.head.deterministic(self._out(np.asarray(s_next, dtype=np.float64))).numpy()

    def log_prob(self, action, s_next) -> np.ndarray:
        with torch.no_grad():
            return self.head.log_prob(self._out(np.asarray(s_next, dtype=np.float64)), as_tensor(action)).numpy()

    def records(self, prefix: str) -> dict:
        return prefixed(prefix, self.params.arrays())

    def load_records(self, prefix: str, records: dict):
        self.params.load_arrays(unprefixed(prefix, records))


class Discriminator:
    """Logit that a pair ``(a, s')`` came from real data."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden_sizes: Tuple[int, ...] = (64, 64),
        activation: str = "relu",
        lr: float = 1e-3,
        generator: Optional[torch.Generator] = None,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.spec = MlpSpec(act_dim + obs_dim, 1, hidden_sizes, activation)
        self.params = ParameterStore.for_mlp(self.spec, generator, lr=lr)

    def logits(self, action, s_next, params: Optional[ParameterStore] = None) -> torch.Tensor:
        x = torch.cat([as_tensor(action), as_tensor(s_next)], dim=-1)
        return forward_eval(self.params if params is None else params, self.spec, x)[..., 0]

    def records(self, prefix: str) -> dict:
        return prefixed(prefix, self.params.arrays())

    def load_records(self, prefix: str, records: dict):
        self.params.load_arrays(unprefixed(prefix, records))


def backward_mle_loss(net, batch) -> torch.Tensor:
    """``-mean log pi_back(a_t | s_{t+1})``; ``batch = (policy, s_next, a)``."""
    policy, s_next, action = batch
    return -policy.head.log_prob(net(s_next), as_tensor(action)).mean()


def discriminator_loss(net, batch) -> torch.Tensor:
    """``-log D(real) - log(1 - D(fake))`` averaged per side.

    ``batch = (a_real, s_real, a_fake, s_fake)``; an uninformative
    discriminator (logit 0) scores ``2 ln 2``.
    """
    a_real, s_real, a_fake, s_fake = batch
    real = net(torch.cat([as_tensor(a_real), as_tensor(s_real)], dim=-1))[..., 0]
    fake = net(torch.cat([as_tensor(a_fake), as_tensor(s_fake)], dim=-1))[..., 0]
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def generator_loss(net, batch) -> torch.Tensor:
    """Generator side of the adversarial value.

    ``batch = (policy, discriminator, s_next, noise, non_saturating)``. The
    plain form minimizes ``mean log(1 - D(fake))``; the non-saturating form
    minimizes ``-mean log D(fake)`` instead.
    """
    policy, discriminator, s_next, noise, non_saturating = batch
    fake, _ = policy.head.rsample(net(s_next), as_tensor(noise))
    logits = discriminator.logits(fake, s_next)
    if non_saturating:
        return F.softplus(-logits).mean()
    return -F.softplus(logits).mean()


def _require_pairs(transitions):
    if transitions is None or len(transitions.s) == 0:
        raise PreconditionError("backward policy training needs recent transitions")


def train_backward_policy_mle(
    policy: BackwardPolicy,
    recent_env_transitions,
    rng: np.random.Generator,
    steps: int = 1,
    batch_size: int = 256,
) -> float:
    """Maximum likelihood steps on ``(a_t, s_{t+1})`` pairs; returns mean NLL."""
    _require_pairs(recent_env_transitions)
    n = len(recent_env_transitions.s)
    losses = []
    for _ in range(steps):
        rows = rng.integers(0, n, min(batch_size, n))
        batch = (
            policy,
            as_tensor(recent_env_transitions.s_next[rows]),
            as_tensor(recent_env_transitions.a[rows]),
        )
        losses.append(minimize(policy.params, policy.spec, backward_mle_loss, batch))
    return float(np.mean(losses))


def train_backward_policy_gan(
    policy: BackwardPolicy,
    discriminator: Discriminator,
    recent_env_transitions,
    rng: np.random.Generator,
    steps: int = 1,
    batch_size: int = 256,
    non_saturating: bool = False,
) -> Tuple[float, float]:
    """Alternate one discriminator ascent and one generator descent per step.

    Returns the mean ``(d_loss, g_loss)`` over the steps.
    """
    _require_pairs(recent_env_transitions)
    n = len(recent_env_transitions.s)
    d_losses, g_losses = [], []
    for _ in range(steps):
        rows = rng.integers(0, n, min(batch_size, n))
        s_next = as_tensor(recent_env_transitions.s_next[rows])
        a_real = as_tensor(recent_env_transitions.a[rows])
        a_fake = as_tensor(policy.sample(s_next.numpy(), rng))
        d_losses.append(
            minimize(
                discriminator.params,
                discriminator.spec,
                discriminator_loss,
                (a_real, s_next, a_fake, s_next),
            )
        )
        noise = rng.standard_normal((len(rows), policy.act_dim))
        g_losses.append(
            minimize(
                policy.params,
                policy.spec,
                generator_loss,
                (policy, discriminator, s_next, noise, non_saturating),
            )
        )
    return float(np.mean(d_losses)), float(np.mean(g_losses))


def discriminator_accuracy(
    discriminator: Discriminator,
    real: Tuple[np.ndarray, np.ndarray],
    fake: Tuple[np.ndarray, np.ndarray],
) -> float:
    """Fraction of real pairs scored positive plus fake pairs scored negative."""
    with torch.no_grad():
        real_logits = discriminator.logits(*real).numpy()
        fake_logits = discriminator.logits(*fake).numpy()
    correct = np.sum(real_logits > 0.0) + np.sum(fake_logits <= 0.0)
    return float(correct) / float(len(real_logits) + len(fake_logits))
