"""The bidirectional model-based training loop, evaluation and
multi-step model error.

Per epoch both ensembles are refit on the real buffer. Per environment step
the agent acts (through MPC once models exist), model rollouts branch from
value-weighted real states into the model buffer, SAC trains on model data
and the backward policy trains on the most recent real transitions. After
every epoch the deterministic policy is evaluated, a metrics row is appended
to ``metrics.csv`` and ``checkpoint.bin`` is rewritten.
"""
import csv
import math

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from bidyn import console
from bidyn.config import TrainConfig, dump_config, load_config
from bidyn.dynamics import (
    Direction,
    ProbabilisticEnsemble,
    ensemble_mean_predict,
    train_ensemble,
)
from bidyn.env import PENDULUM_SPEC, PendulumEnv
from bidyn.errors import CheckpointError, NumericalError, PreconditionError
from bidyn.func_approx import load_checkpoint, save_checkpoint
from bidyn.mpc import plan_action
from bidyn.policy import (
    BackwardPolicy,
    BackwardPolicyLoss,
    Discriminator,
    SacAgent,
    act,
    sac_update,
    train_backward_policy_gan,
    train_backward_policy_mle,
)
from bidyn.rollout import (
    ReplayBuffer,
    Source,
    Transition,
    concat_batches,
    generate_rollouts,
)
from bidyn.seeding import RandomStreams

CONFIG_FILE = "config.yaml"
CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.csv"


@dataclass
class MetricsRow:
    epoch: int
    env_steps: int
    eval_return_mean: float
    eval_return_std: float
    fwd_val_loss: float
    bwd_val_loss: float
    k1: int
    k2: int
    beta: float
    alpha: float
    q_loss: float
    pi_loss: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def _format(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


class MetricsLog:
    """CSV writer that flushes after every row."""

    def __init__(self, path: Path):
        self.path = path
        self.rows: List[MetricsRow] = []
        with self.path.open("w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def append(self, row: MetricsRow):
        if self.rows and row.env_steps <= self.rows[-1].env_steps:
            raise PreconditionError("metrics rows must have increasing env_steps")
        self.rows.append(row)
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([_format(v) for v in asdict(row).values()])


def read_metrics(path: Union[Path, str]) -> List[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


###########################################################################
#                                                                         #
#                              components                                 #
#                                                                         #
###########################################################################


@dataclass
class Components:
    agent: SacAgent
    forward_model: ProbabilisticEnsemble
    backward_model: ProbabilisticEnsemble
    backward_policy: BackwardPolicy
    discriminator: Discriminator

    def records(self) -> dict:
        out = {}
        out.update(self.agent.records("agent"))
        out.update(self.backward_policy.records("backward_policy"))
        out.update(self.discriminator.records("discriminator"))
        for name, model in (
            ("forward_model", self.forward_model),
            ("backward_model", self.backward_model),
        ):
            if model.trained:
                out.update(model.records(name))
        return out

    def load_records(self, records: dict):
        self.agent.load_records("agent", records)
        self.backward_policy.load_records("backward_policy", records)
        self.discriminator.load_records("discriminator", records)
        for name, model in (
            ("forward_model", self.forward_model),
            ("backward_model", self.backward_model),
        ):
            if f"{name}/direction" in records:
                model.load_records(name, records)


def build_components(config: TrainConfig, streams: RandomStreams, spec=PENDULUM_SPEC) -> Components:
    agent = SacAgent(
        spec.obs_dim,
        spec.act_dim,
        spec.action_low,
        spec.action_high,
        config.sac,
        generator=streams.torch("policy"),
    )
    forward_model = ProbabilisticEnsemble(
        Direction.Forward, spec.obs_dim, spec.act_dim, config.model, streams.torch("forward_model")
    )
    backward_model = ProbabilisticEnsemble(
        Direction.Backward, spec.obs_dim, spec.act_dim, config.model, streams.torch("backward_model")
    )
    backward_policy = BackwardPolicy(
        spec.obs_dim,
        spec.act_dim,
        spec.action_low,
        spec.action_high,
        hidden_sizes=config.sac.hidden_sizes,
        activation=config.sac.activation,
        lr=config.backward_policy_lr,
        generator=streams.torch("backward_policy"),
    )
    discriminator = Discriminator(
        spec.obs_dim,
        spec.act_dim,
        hidden_sizes=config.sac.hidden_sizes,
        activation=config.sac.activation,
        lr=config.backward_policy_lr,
        generator=streams.torch("discriminator"),
    )
    return Components(agent, forward_model, backward_model, backward_policy, discriminator)


def load_run(run_dir: Union[Path, str]) -> Tuple[TrainConfig, Components]:
    """Rebuild the configuration and trained components of a finished run."""
    run_dir = Path(run_dir)
    if not (run_dir / CONFIG_FILE).exists():
        raise CheckpointError(f"{run_dir} has no {CONFIG_FILE}")
    config = load_config(run_dir / CONFIG_FILE)
    components = build_components(config, RandomStreams(config.seed))
    components.load_records(load_checkpoint(run_dir / CHECKPOINT_FILE))
    return config, components


###########################################################################
#                                                                         #
#                               evaluation                                #
#                                                                         #
###########################################################################


def evaluate_policy(
    agent: SacAgent, env, n_episodes: int, seed: Optional[int] = None
) -> Tuple[float, float]:
    """Mean and std of undiscounted returns with deterministic actions.

    Episode ``i`` resets ``env`` with ``seed + i`` when a seed is given.
    """
    if n_episodes < 1:
        raise PreconditionError("evaluation needs at least one episode")
    returns = []
    for i in range(n_episodes):
        obs = env.reset(seed=None if seed is None else seed + i)
        total = 0.0
        for _ in range(env.spec.steps_per_epoch):
            result = env.step(act(agent, obs, deterministic=True))
            total += result.reward
            obs = result.observation
            if result.done:
                break
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def collect_trajectories(
    n_trajectories: int,
    seed: int,
    agent: Optional[SacAgent] = None,
    length: int = PENDULUM_SPEC.steps_per_epoch,
) -> List[Trajectory]:
    """Real pendulum trajectories of ``length`` steps.

    Actions are uniform random without an agent and stochastic policy
    samples with one.
    """
    streams = RandomStreams(seed)
    env = PendulumEnv(seed)
    rng = streams.numpy("trajectories")
    out = []
    for i in range(n_trajectories):
        obs = env.reset(seed=seed + i)
        states, actions, rewards = [obs], [], []
        for _ in range(length):
            if agent is None:
                a = rng.uniform(env.spec.action_low, env.spec.action_high)
            else:
                a = act(agent, obs, deterministic=False, rng=rng)
            result = env.step(a)
            obs = result.observation
            actions.append(np.asarray(a, dtype=np.float64).reshape(-1))
            rewards.append(result.reward)
            states.append(obs)
        out.append(Trajectory(np.array(states), np.array(actions), np.array(rewards)))
    return out


def trajectory_buffer(trajectories: Sequence[Trajectory]) -> ReplayBuffer:
    n = sum(len(t.actions) for t in trajectories)
    obs_dim = trajectories[0].states.shape[1]
    act_dim = trajectories[0].actions.shape[1]
    buffer = ReplayBuffer(max(n, 1), obs_dim, act_dim)
    for t in trajectories:
        buffer.add_batch(t.states[:-1], t.actions, t.rewards, t.states[1:], 0.0, int(Source.Env))
    return buffer


def compounding_error(
    forward_ensemble: ProbabilisticEnsemble,
    backward_ensemble: ProbabilisticEnsemble,
    trajectory: Trajectory,
    h: int,
    start: int = 0,
) -> Tuple[float, float]:
    """Forward-only and bidirectional multi-step errors over ``2h`` steps.

    The forward error anchors at ``s_start`` and rolls the elite-mean
    forward model ``2h`` steps. The bidirectional error anchors at the
    window's middle state and rolls ``h`` steps each way. Both use the
    recorded actions and are normalized by ``2h``.
    """
    if h < 1:
        raise PreconditionError("h must be >= 1")
    states = trajectory.states[start:]
    actions = trajectory.actions[start:]
    if len(states) < 2 * h + 1 or len(actions) < 2 * h:
        raise PreconditionError(
            f"trajectory window of {len(states)} states is shorter than 2h+1={2 * h + 1}"
        )

    error_for = 0.0
    s_hat = states[0]
    for i in range(1, 2 * h + 1):
        s_hat, _ = ensemble_mean_predict(forward_ensemble, s_hat, actions[i - 1])
        error_for += float(np.sum((s_hat - states[i]) ** 2))

    error_bi = 0.0
    s_hat = states[h]
    for i in range(1, h + 1):
        s_hat, _ = ensemble_mean_predict(forward_ensemble, s_hat, actions[h + i - 1])
        error_bi += float(np.sum((s_hat - states[h + i]) ** 2))
    s_hat = states[h]
    for i in range(1, h + 1):
        s_hat, _ = ensemble_mean_predict(backward_ensemble, s_hat, actions[h - i])
        error_bi += float(np.sum((s_hat - states[h - i]) ** 2))

    return error_for / (2 * h), error_bi / (2 * h)


def mean_compounding_error(
    forward_ensemble: ProbabilisticEnsemble,
    backward_ensemble: ProbabilisticEnsemble,
    trajectories: Sequence[Trajectory],
    h: int,
    n_anchors: int,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """Average both errors over ``n_anchors`` random windows."""
    windows = [
        (i, start)
        for i, t in enumerate(trajectories)
        for start in range(len(t.states) - 2 * h)
    ]
    if not windows:
        raise PreconditionError(f"no trajectory holds a window of {2 * h + 1} states")
    picks = rng.choice(len(windows), size=n_anchors, replace=n_anchors > len(windows))
    errors = np.array(
        [
            compounding_error(
                forward_ensemble, backward_ensemble, trajectories[windows[p][0]], h, windows[p][1]
            )
            for p in picks
        ]
    )
    return float(errors[:, 0].mean()), float(errors[:, 1].mean())


###########################################################################
#                                                                         #
#                              training loop                              #
#                                                                         #
###########################################################################


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: List[MetricsRow]
    components: Components
    env_buffer: ReplayBuffer
    checkpoint: Path
    env_steps: int


def _sac_batch(config: TrainConfig, env_buffer, model_buffer, rng):
    batch_size = config.sac.batch_size
    if len(model_buffer) == 0:
        return env_buffer.sample(batch_size, rng)
    n_real = int(round(batch_size * config.real_ratio))
    if n_real == 0:
        return model_buffer.sample(batch_size, rng)
    if n_real == batch_size:
        return env_buffer.sample(batch_size, rng)
    return concat_batches(
        env_buffer.sample(n_real, rng), model_buffer.sample(batch_size - n_real, rng)
    )


def run_bmpo(
    config: TrainConfig,
    out_dir: Union[Path, str],
    verbose: bool = False,
) -> TrainResult:
    """Train an agent with bidirectional model rollouts.

    Parameters
    ----------
    config: TrainConfig
    out_dir: Path
        receives ``config.yaml``, ``metrics.csv`` and ``checkpoint.bin``
    verbose: bool
        print per-epoch progress

    Returns
    -------
    TrainResult with the metrics rows and the trained components
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"unable to create output directory {out_dir}: {e}") from e
    dump_config(config, out_dir / CONFIG_FILE)
    checkpoint_path = out_dir / CHECKPOINT_FILE
    log = MetricsLog(out_dir / METRICS_FILE)

    streams = RandomStreams(config.seed)
    components = build_components(config, streams)
    agent = components.agent
    env = PendulumEnv()
    eval_env = PendulumEnv()
    env_seed = int(streams.numpy("env").integers(0, 2**31))
    eval_seed = int(streams.numpy("eval").integers(0, 2**31))
    spec = env.spec

    env_buffer = ReplayBuffer(config.env_buffer_capacity, spec.obs_dim, spec.act_dim)
    model_buffer = ReplayBuffer(config.model_buffer_capacity, spec.obs_dim, spec.act_dim)
    backward_window = config.backward_window_epochs * config.env_steps_per_epoch

    action_rng = streams.numpy("action")
    rollout_rng = streams.numpy("rollout")
    sac_rng = streams.numpy("sac")
    model_rng = streams.numpy("model")
    mpc_rng = streams.numpy("mpc")
    backward_rng = streams.numpy("backward_policy")

    episode = 0
    obs = env.reset(seed=env_seed)
    env_steps = 0
    checkpoint_written = False

    if verbose:
        console.rule()
        console.cyan(
            f"bmpo: ablation={config.ablation.value} seed={config.seed} "
            f"epochs={config.n_epochs} steps/epoch={config.env_steps_per_epoch}"
        )

    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        for epoch in range(config.n_epochs):
            exploring = epoch < config.exploration_epochs
            k1, k2, beta = config.rollout.k_values(epoch, config.ablation)
            fwd_val = bwd_val = float("nan")

            models_ready = len(env_buffer) >= max(config.model.min_train_size, 2) and not exploring
            if models_ready:
                stats = train_ensemble(
                    components.forward_model, env_buffer, config.model_train_epochs, model_rng
                )
                fwd_val = float(np.mean(stats.validation_loss))
                if config.ablation.uses_backward:
                    stats = train_ensemble(
                        components.backward_model,
                        env_buffer,
                        config.model_train_epochs,
                        model_rng,
                    )
                    bwd_val = float(np.mean(stats.validation_loss))

            q_losses, pi_losses = [], []
            for _ in range(config.env_steps_per_epoch):
                if exploring:
                    action = action_rng.uniform(spec.action_low, spec.action_high)
                elif config.mpc_active and components.forward_model.trained:
                    action = plan_action(obs, agent, components.forward_model, config.mpc, mpc_rng)
                else:
                    action = act(agent, obs, deterministic=False, rng=action_rng)

                result = env.step(action)
                env_buffer.add(
                    Transition(
                        s=obs,
                        a=np.asarray(action, dtype=np.float64).reshape(-1),
                        r=result.reward,
                        s_next=result.observation,
                        done=result.done,
                    )
                )
                env_steps += 1
                obs = result.observation
                if result.done or env.episode_over:
                    episode += 1
                    obs = env.reset(seed=env_seed + episode)

                if not models_ready:
                    continue

                if k1 + k2 > 0:
                    generate_rollouts(
                        env_buffer,
                        model_buffer,
                        components.forward_model,
                        components.backward_model,
                        agent,
                        components.backward_policy,
                        k1,
                        k2,
                        beta,
                        config.rollout.rollouts_per_step,
                        rollout_rng,
                        candidate_pool=config.rollout.candidate_pool,
                        value_samples=config.sac.value_samples,
                    )
                for _ in range(config.policy_grad_steps):
                    report = sac_update(
                        agent, _sac_batch(config, env_buffer, model_buffer, sac_rng), sac_rng
                    )
                    q_losses.append(0.5 * (report.q1_loss + report.q2_loss))
                    pi_losses.append(report.pi_loss)

                if config.ablation.uses_backward and config.backward_policy_steps > 0:
                    recent = env_buffer.recent(backward_window)
                    if config.backward_policy_loss is BackwardPolicyLoss.Gan:
                        train_backward_policy_gan(
                            components.backward_policy,
                            components.discriminator,
                            recent,
                            backward_rng,
                            steps=config.backward_policy_steps,
                            batch_size=config.backward_policy_batch_size,
                            non_saturating=config.gan_non_saturating,
                        )
                    else:
                        train_backward_policy_mle(
                            components.backward_policy,
                            recent,
                            backward_rng,
                            steps=config.backward_policy_steps,
                            batch_size=config.backward_policy_batch_size,
                        )

            mean, std = evaluate_policy(agent, eval_env, config.eval_episodes, seed=eval_seed)
            row = MetricsRow(
                epoch=epoch,
                env_steps=env_steps,
                eval_return_mean=mean,
                eval_return_std=std,
                fwd_val_loss=fwd_val,
                bwd_val_loss=bwd_val,
                k1=k1 if models_ready else 0,
                k2=k2 if models_ready else 0,
                beta=beta,
                alpha=agent.alpha,
                q_loss=float(np.mean(q_losses)) if q_losses else float("nan"),
                pi_loss=float(np.mean(pi_losses)) if pi_losses else float("nan"),
            )
            log.append(row)
            save_checkpoint(checkpoint_path, components.records())
            checkpoint_written = True
            if verbose:
                console.yellow(
                    f"epoch {epoch:3d}  steps {env_steps:6d}  return {mean:9.2f} +- {std:7.2f}  "
                    f"k1={row.k1} k2={row.k2} alpha={row.alpha:.3f}",
                    bold=False,
                )
    except NumericalError as e:
        last_good = str(checkpoint_path) if checkpoint_written else "none written yet"
        raise NumericalError(
            f"training aborted at env step {env_steps}; last good checkpoint: {last_good}",
            str(e),
        ) from e
    finally:
        torch.use_deterministic_algorithms(deterministic)

    if verbose:
        console.green(f"finished {env_steps} env steps, results in {out_dir}")
    return TrainResult(
        config=config,
        metrics=log.rows,
        components=components,
        env_buffer=env_buffer,
        checkpoint=checkpoint_path,
        env_steps=env_steps,
    )


def train_models_on(
    trajectories: Sequence[Trajectory],
    config: TrainConfig,
    streams: RandomStreams,
) -> Tuple[ProbabilisticEnsemble, ProbabilisticEnsemble]:
    """Fit a forward and a backward ensemble on recorded trajectories."""
    components = build_components(config, streams)
    buffer = trajectory_buffer(trajectories)
    rng = streams.numpy("model")
    train_ensemble(components.forward_model, buffer, config.model_train_epochs, rng)
    train_ensemble(components.backward_model, buffer, config.model_train_epochs, rng)
    return components.forward_model, components.backward_model
