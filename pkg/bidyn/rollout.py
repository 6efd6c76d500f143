"""Replay buffers, rollout schedules, value-weighted start states and
bidirectional model rollouts.
"""
import enum
import math

from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from scipy.special import softmax

from bidyn.dynamics import ProbabilisticEnsemble, TransitionArrays, predict
from bidyn.errors import InputError, PreconditionError, StateError
from bidyn.policy import BackwardPolicy, SacAgent, act, estimate_value


class Source(enum.IntEnum):
    Env = 0
    ModelForward = 1
    ModelBackward = 2


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False
    source: Source = Source.Env


@dataclass
class TransitionBatch(TransitionArrays):
    done: np.ndarray = None
    source: np.ndarray = None


class ReplayBuffer:
    """Bounded FIFO of transitions stored column-wise in preallocated arrays.

    Parameters
    ----------
    capacity: int
        once full, each insertion evicts the oldest transition
    obs_dim, act_dim: int
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise InputError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.source = np.zeros(capacity, dtype=np.int8)
        self.ptr = 0
        self.size = 0
        self.n_inserted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition):
        self.add_batch(
            np.asarray(t.s)[None],
            np.asarray(t.a)[None],
            np.asarray([t.r]),
            np.asarray(t.s_next)[None],
            np.asarray([t.done]),
            np.asarray([int(t.source)]),
        )

    def add_batch(self, s, a, r, s_next, done, source):
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.obs_dim)
        n = len(s)
        a = np.asarray(a, dtype=np.float64).reshape(n, self.act_dim)
        s_next = np.asarray(s_next, dtype=np.float64).reshape(n, self.obs_dim)
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
        if not np.all(np.isfinite(r)):
            raise InputError("transition rewards must be finite")
        done = np.broadcast_to(np.asarray(done, dtype=np.float64), (n,))
        source = np.broadcast_to(np.asarray(source, dtype=np.int8), (n,))
        if n > self.capacity:
            s, a, r, s_next, done, source = (
                col[n - self.capacity :] for col in (s, a, r, s_next, done, source)
            )
            self.n_inserted += n - self.capacity
            n = self.capacity

        idx = (self.ptr + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = a
        self.r[idx] = r
        self.s_next[idx] = s_next
        self.done[idx] = done
        self.source[idx] = source
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        self.n_inserted += n

    def order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.ptr + np.arange(self.capacity)) % self.capacity

    def _batch(self, idx) -> TransitionBatch:
        return TransitionBatch(
            s=self.s[idx],
            a=self.a[idx],
            r=self.r[idx],
            s_next=self.s_next[idx],
            done=self.done[idx],
            source=self.source[idx],
        )

    def arrays(self) -> TransitionBatch:
        return self._batch(self.order())

    def recent(self, n: int) -> TransitionBatch:
        return self._batch(self.order()[-n:] if n > 0 else [])

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise PreconditionError("cannot sample from an empty buffer")
        return self._batch(rng.integers(0, self.size, batch_size))

    def __iter__(self) -> Iterator[Transition]:
        for i in self.order():
            yield Transition(
                s=self.s[i].copy(),
                a=self.a[i].copy(),
                r=float(self.r[i]),
                s_next=self.s_next[i].copy(),
                done=bool(self.done[i]),
                source=Source(int(self.source[i])),
            )


def concat_batches(first: TransitionBatch, second: TransitionBatch) -> TransitionBatch:
    return TransitionBatch(
        *(
            np.concatenate([getattr(first, name), getattr(second, name)])
            for name in ("s", "a", "r", "s_next", "done", "source")
        )
    )


###########################################################################
#                                                                         #
#                                schedules                                #
#                                                                         #
###########################################################################


@dataclass(frozen=True)
class Schedule:
    """Clipped linear ramp from ``x`` at epoch ``a`` to ``y`` at epoch ``b``."""

    x: float
    y: float
    a: int
    b: int

    def __post_init__(self):
        if not self.a < self.b:
            raise InputError(f"schedule needs a < b, got a={self.a} b={self.b}")


def schedule_value(schedule: Schedule, epoch: float) -> float:
    frac = (epoch - schedule.a) / (schedule.b - schedule.a)
    value = schedule.x + frac * (schedule.y - schedule.x)
    lo, hi = min(schedule.x, schedule.y), max(schedule.x, schedule.y)
    return float(min(max(value, lo), hi))


class Ablation(enum.Enum):
    Full = "full"
    ForwardOnly = "forward-only"
    BackwardOnly = "backward-only"
    NoMpc = "no-mpc"
    Mbpo = "mbpo"

    @property
    def uses_backward(self) -> bool:
        return self not in (Ablation.ForwardOnly, Ablation.Mbpo)

    @property
    def uses_mpc(self) -> bool:
        return self not in (Ablation.NoMpc, Ablation.Mbpo)


@dataclass(frozen=True)
class RolloutConfig:
    k1: Schedule = Schedule(1.0, 5.0, 1, 5)
    k2: Schedule = Schedule(1.0, 5.0, 1, 5)
    beta: Schedule = Schedule(0.01, 0.0, 0, 10)
    rollouts_per_step: int = 20
    candidate_pool: int = 1000

    def __post_init__(self):
        if self.rollouts_per_step < 0:
            raise InputError("rollouts_per_step must be >= 0")
        if self.candidate_pool < 1:
            raise InputError("candidate_pool must be >= 1")

    def rollout_length(self, schedule: Schedule, epoch: int) -> int:
        k = int(math.floor(schedule_value(schedule, epoch) + 1e-9))
        if epoch > schedule.a:
            k = max(k, 1)
        return max(k, 0)

    def k_values(self, epoch: int, ablation: Ablation = Ablation.Full) -> Tuple[int, int, float]:
        """``(k1, k2, beta)`` for ``epoch`` after the ablation overrides."""
        k1 = self.rollout_length(self.k1, epoch)
        k2 = self.rollout_length(self.k2, epoch)
        beta = schedule_value(self.beta, epoch)
        if ablation in (Ablation.ForwardOnly, Ablation.Mbpo):
            k1 = 0
        if ablation is Ablation.BackwardOnly:
            k2 = 0
        if ablation is Ablation.Mbpo:
            beta = 0.0
        return k1, k2, beta


###########################################################################
#                                                                         #
#                             start states                                #
#                                                                         #
###########################################################################


def boltzmann_probabilities(values: np.ndarray, beta: float) -> np.ndarray:
    """``softmax(beta * V)``; scipy subtracts the max before exponentiating."""
    return softmax(beta * np.asarray(values, dtype=np.float64))


def boltzmann_sample_states(
    env_buffer: ReplayBuffer,
    value_fn: Optional[Callable[[np.ndarray], np.ndarray]],
    beta: float,
    n: int,
    rng: np.random.Generator,
    candidate_pool: int = 1000,
) -> np.ndarray:
    """Draw ``n`` start states with probability proportional to ``exp(beta V)``.

    The weights are computed over a uniformly drawn candidate pool rather than
    the full buffer; ``beta == 0`` never calls ``value_fn``.
    """
    if len(env_buffer) == 0:
        raise PreconditionError("cannot sample start states from an empty buffer")
    if beta < 0.0 or not math.isfinite(beta):
        raise InputError(f"beta must be finite and >= 0, got {beta}")

    states = env_buffer.arrays().s
    if len(states) > candidate_pool:
        states = states[rng.choice(len(states), candidate_pool, replace=False)]
    if beta == 0.0:
        probs = None
    else:
        probs = boltzmann_probabilities(value_fn(states), beta)
    return states[rng.choice(len(states), size=n, replace=True, p=probs)]


###########################################################################
#                                                                         #
#                          bidirectional rollouts                         #
#                                                                         #
###########################################################################


@dataclass
class RolloutBatch:
    """Transitions of ``n`` parallel rollouts, one list entry per model step."""

    backward: List[TransitionBatch] = field(default_factory=list)
    forward: List[TransitionBatch] = field(default_factory=list)

    def steps(self) -> List[TransitionBatch]:
        return self.backward + self.forward


def _leg(s, a, r, s_next, source: Source) -> TransitionBatch:
    n = len(s)
    return TransitionBatch(
        s=s, a=a, r=r, s_next=s_next, done=np.zeros(n), source=np.full(n, int(source), dtype=np.int8)
    )


def rollout_batch(
    start_states: np.ndarray,
    k1: int,
    k2: int,
    forward_ensemble: Optional[ProbabilisticEnsemble],
    backward_ensemble: Optional[ProbabilisticEnsemble],
    agent: SacAgent,
    backward_policy: Optional[BackwardPolicy],
    rng: np.random.Generator,
) -> RolloutBatch:
    """Branch ``k1`` steps backward and ``k2`` steps forward from each row."""
    if k1 < 0 or k2 < 0 or k1 + k2 == 0:
        raise InputError(f"rollout lengths must be >= 0 and not both 0, got k1={k1} k2={k2}")
    if k1 > 0 and (backward_ensemble is None or backward_policy is None):
        raise StateError("backward rollouts need a backward ensemble and policy")
    if k2 > 0 and forward_ensemble is None:
        raise StateError("forward rollouts need a forward ensemble")
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    out = RolloutBatch()

    s_cur = start_states
    for _ in range(k1):
        a = backward_policy.sample(s_cur, rng)
        s_prev, r = predict(backward_ensemble, (s_cur, a), rng=rng)
        out.backward.append(_leg(s_prev, a, r, s_cur, Source.ModelBackward))
        s_cur = s_prev

    s = start_states
    for _ in range(k2):
        a = act(agent, s, deterministic=False, rng=rng)
        s_next, r = predict(forward_ensemble, (s, a), rng=rng)
        out.forward.append(_leg(s, a, r, s_next, Source.ModelForward))
        s = s_next
    return out


def bidirectional_rollout(
    start_state: np.ndarray,
    k1: int,
    k2: int,
    forward_ensemble: Optional[ProbabilisticEnsemble],
    backward_ensemble: Optional[ProbabilisticEnsemble],
    agent: SacAgent,
    backward_policy: Optional[BackwardPolicy],
    rng: np.random.Generator,
) -> List[Transition]:
    """One rollout: the ``k1`` backward transitions then the ``k2`` forward ones.

    Backward transitions chain through ``s``: the ``s_next`` of each equals
    the ``s`` of the one emitted before it. None of them is terminal.
    """
    batch = rollout_batch(
        np.asarray(start_state, dtype=np.float64)[None],
        k1,
        k2,
        forward_ensemble,
        backward_ensemble,
        agent,
        backward_policy,
        rng,
    )
    return [
        Transition(
            s=step.s[0],
            a=step.a[0],
            r=float(step.r[0]),
            s_next=step.s_next[0],
            done=False,
            source=Source(int(step.source[0])),
        )
        for step in batch.steps()
    ]


def generate_rollouts(
    env_buffer: ReplayBuffer,
    model_buffer: ReplayBuffer,
    forward_ensemble: Optional[ProbabilisticEnsemble],
    backward_ensemble: Optional[ProbabilisticEnsemble],
    agent: SacAgent,
    backward_policy: Optional[BackwardPolicy],
    k1: int,
    k2: int,
    beta: float,
    n_rollouts: int,
    rng: np.random.Generator,
    candidate_pool: int = 1000,
    value_samples: int = 8,
) -> int:
    """Run ``n_rollouts`` rollouts from value-weighted starts into ``model_buffer``.

    Returns the number of transitions added.
    """
    if n_rollouts == 0 or k1 + k2 == 0:
        return 0
    starts = boltzmann_sample_states(
        env_buffer,
        lambda states: estimate_value(agent, states, value_samples, rng),
        beta,
        n_rollouts,
        rng,
        candidate_pool=candidate_pool,
    )
    batch = rollout_batch(
        starts, k1, k2, forward_ensemble, backward_ensemble, agent, backward_policy, rng
    )
    added = 0
    for step in batch.steps():
        model_buffer.add_batch(step.s, step.a, step.r, step.s_next, step.done, step.source)
        added += len(step.s)
    return added
