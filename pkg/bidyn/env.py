"""Pendulum swing-up environment.

Physics constants: gravity 10, mass 1, length 1, dt 0.05, torque clipped to
[-2, 2], angular velocity clipped to [-8, 8]. The angle is 0 when upright.
Initial states: theta ~ U[-pi, pi], theta_dot ~ U[-1, 1]. The agent sees
``(cos theta, sin theta, theta_dot)``; the raw ``(theta, theta_dot)`` state
is available through :attr:`PendulumEnv.state` for tests and tooling.

Integration is semi-implicit Euler. Without clipping the per-step change of
``energy(state)`` is bounded by ``0.5 * (k**2 + k * theta_dot_next**2) * dt**2``
with ``k = 3 g / (2 l)``, see :func:`energy_drift_bound`.
"""
import math

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from bidyn.errors import InputError

GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
DT = 0.05
MAX_TORQUE = 2.0
MAX_SPEED = 8.0
HORIZON = 200


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    steps_per_epoch: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    has_termination: bool = False

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise InputError("obs_dim and act_dim must be >= 1")
        if len(self.action_low) != self.act_dim or len(self.action_high) != self.act_dim:
            raise InputError("action bounds must have act_dim entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise InputError("action_low must be below action_high elementwise")


PENDULUM_SPEC = EnvSpec(
    obs_dim=3,
    act_dim=1,
    steps_per_epoch=HORIZON,
    action_low=(-MAX_TORQUE,),
    action_high=(MAX_TORQUE,),
    has_termination=False,
)


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    state: PendulumState


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi]."""
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


def observe(state: PendulumState) -> np.ndarray:
    return np.array(
        [math.cos(state.theta), math.sin(state.theta), state.theta_dot],
        dtype=np.float64,
    )


def reward(state: PendulumState, action: np.ndarray) -> float:
    """``-theta^2 - 0.1 theta_dot^2 - 0.001 |a|^2`` on the pre-step state."""
    theta = wrap_angle(state.theta)
    return -(theta**2 + 0.1 * state.theta_dot**2 + 0.001 * float(np.sum(action**2)))


def _clip_action(action) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (1,):
        raise InputError(f"pendulum action must have one entry, got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise InputError(f"non-finite action {action}")
    return np.clip(action, -MAX_TORQUE, MAX_TORQUE)


def step(state: PendulumState, action) -> StepResult:
    """Advance the pendulum one ``DT`` under torque ``action``."""
    u = _clip_action(action)
    r = reward(state, u)

    k = 3.0 * GRAVITY / (2.0 * LENGTH)
    theta_dot = state.theta_dot + (
        k * math.sin(state.theta) + 3.0 / (MASS * LENGTH**2) * float(u[0])
    ) * DT
    theta_dot = float(np.clip(theta_dot, -MAX_SPEED, MAX_SPEED))
    theta = wrap_angle(state.theta + theta_dot * DT)

    nxt = PendulumState(theta=theta, theta_dot=theta_dot)
    return StepResult(observation=observe(nxt), reward=r, done=False, state=nxt)


def energy(state: PendulumState) -> float:
    """Conserved quantity of the unforced dynamics (per unit inertia)."""
    k = 3.0 * GRAVITY / (2.0 * LENGTH)
    return 0.5 * state.theta_dot**2 + k * math.cos(state.theta)


def energy_drift_bound(next_theta_dot: float) -> float:
    k = 3.0 * GRAVITY / (2.0 * LENGTH)
    return 0.5 * (k**2 + k * next_theta_dot**2) * DT**2


def sample_initial_state(rng: np.random.Generator) -> PendulumState:
    return PendulumState(
        theta=float(rng.uniform(-math.pi, math.pi)),
        theta_dot=float(rng.uniform(-1.0, 1.0)),
    )


def state_from_observation(observation) -> PendulumState:
    cos_th, sin_th, theta_dot = (float(v) for v in observation)
    return PendulumState(theta=math.atan2(sin_th, cos_th), theta_dot=theta_dot)


class PendulumEnv:
    """Stateful wrapper used by the trainer; one episode is ``HORIZON`` steps."""

    spec = PENDULUM_SPEC

    def __init__(self, seed: Optional[int] = None):
        self._rng = np.random.default_rng(seed)
        self.state: Optional[PendulumState] = None
        self.t = 0

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = sample_initial_state(self._rng)
        self.t = 0
        return observe(self.state)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise InputError("call reset() before step()")
        result = step(self.state, action)
        self.state = result.state
        self.t += 1
        return result

    @property
    def episode_over(self) -> bool:
        return self.t >= self.spec.steps_per_epoch


def reset(seed: int) -> np.ndarray:
    """Initial observation for ``seed``; same seed, same state."""
    return observe(sample_initial_state(np.random.default_rng(seed)))
