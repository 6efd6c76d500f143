"""Exact tabular checks of the branched-rollout return bounds.

Everything here is finite: state marginals are propagated with matrix
products, so returns over a horizon ``T`` are exact up to the geometric tail
``r_max * gamma**T / (1 - gamma)``.

Time indexing of a :class:`BranchedProcess` with lengths ``k1, k2``:

* the state marginal at ``t = k1`` is the anchor, shared by both processes
  of a comparison (``rho0`` when ``k1 == 0``);
* for ``t < k1`` the backward pair generates ``a_t ~ pi_back(.|s_{t+1})`` and
  ``s_t ~ q(.|s_{t+1}, a_t)``, and the reward at ``t`` is ``r(s_t, a_t)``;
* for ``k1 <= t < k1 + k2`` the forward pair acts, after that the pre-branch
  pair.

Backward kernels are stored as ``q[s_next, a, s]``, forward kernels as
``p[s, a, s_next]``.
"""
import enum
import math
import sys

from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import click
import numpy as np

from ruamel.yaml import YAML

from bidyn.errors import InputError

ROW_TOL = 1e-12
# float slack for sums of ~T products
FLOAT_SLACK = 1e-12


def _check_stochastic(arr: np.ndarray, name: str, tol: float = ROW_TOL):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < -tol):
        raise InputError(f"{name} must be finite and nonnegative")
    sums = np.atleast_1d(arr.sum(axis=-1))
    if not np.allclose(sums, 1.0, rtol=0.0, atol=max(tol * arr.shape[-1], tol)):
        raise InputError(f"rows of {name} must sum to 1, worst is {sums.flat[np.argmax(np.abs(sums - 1.0))]}")
    return arr


@dataclass
class TabularMdp:
    transitions: np.ndarray
    reward: np.ndarray
    gamma: float
    rho0: np.ndarray

    def __post_init__(self):
        self.transitions = _check_stochastic(self.transitions, "transitions")
        self.rho0 = _check_stochastic(self.rho0, "rho0")
        self.reward = np.asarray(self.reward, dtype=np.float64)
        if self.transitions.ndim != 3 or self.transitions.shape[0] != self.transitions.shape[2]:
            raise InputError("transitions must have shape (S, A, S)")
        if self.reward.shape != self.transitions.shape[:2]:
            raise InputError("reward must have shape (S, A)")
        if self.rho0.shape != (self.n_states,):
            raise InputError("rho0 must have one entry per state")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"gamma must be in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))


@dataclass
class TabularPolicy:
    table: np.ndarray

    def __post_init__(self):
        self.table = _check_stochastic(self.table, "policy")
        if self.table.ndim != 2:
            raise InputError("policy table must have shape (S, A)")


def random_distribution(n: int, rng: np.random.Generator, size=()) -> np.ndarray:
    return rng.dirichlet(np.ones(n), size=size)


def random_kernel(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    return random_distribution(n_states, rng, (n_states, n_actions))


def random_mdp(
    n_states: int, n_actions: int, gamma: float, rng: np.random.Generator
) -> TabularMdp:
    """Dirichlet transition rows, rewards uniform on [-1, 1]."""
    return TabularMdp(
        transitions=random_kernel(n_states, n_actions, rng),
        reward=rng.uniform(-1.0, 1.0, (n_states, n_actions)),
        gamma=gamma,
        rho0=random_distribution(n_states, rng),
    )


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(random_distribution(n_actions, rng, n_states))


def state_kernel(kernel: np.ndarray, policy: TabularPolicy) -> np.ndarray:
    """Markov chain ``P_pi[s, s'] = sum_a pi(a|s) p(s'|s, a)``."""
    return np.einsum("sa,sap->sp", policy.table, kernel)


def stationary_distribution(kernel: np.ndarray, policy: TabularPolicy) -> np.ndarray:
    """Stationary state distribution of the chain induced by ``policy``."""
    chain = state_kernel(kernel, policy)
    n = chain.shape[0]
    # solve mu (P - I) = 0 with sum(mu) = 1
    a = np.vstack([chain.T - np.eye(n), np.ones(n)])
    b = np.concatenate([np.zeros(n), [1.0]])
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def reverse_pair(
    kernel: np.ndarray, policy: TabularPolicy, marginal: np.ndarray
) -> Tuple[np.ndarray, TabularPolicy]:
    """Bayes reversal of a forward pair with respect to a state marginal.

    Returns ``(q, pi_back)`` with
    ``marginal(s) pi(a|s) p(s'|s,a) = d'(s') pi_back(a|s') q(s|s',a)``.
    Unreachable rows are filled uniformly.
    """
    joint = marginal[:, None, None] * policy.table[:, :, None] * kernel
    n_states, n_actions = policy.table.shape
    d_next = joint.sum(axis=(0, 1))
    sa_next = joint.sum(axis=0).T  # [s', a]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi_back = np.where(
            d_next[:, None] > 0, sa_next / d_next[:, None], 1.0 / n_actions
        )
        q = np.transpose(joint, (2, 1, 0)) / sa_next[:, :, None]
    q = np.where(sa_next[:, :, None] > 0, q, 1.0 / n_states)
    return q, TabularPolicy(pi_back)


###########################################################################
#                                                                         #
#                                 returns                                 #
#                                                                         #
###########################################################################


@dataclass
class HorizonReturn:
    value: float
    tail: float

    def __float__(self) -> float:
        return self.value


def truncation_tail(r_max: float, gamma: float, horizon: int) -> float:
    return r_max * gamma**horizon / (1.0 - gamma)


def horizon_for_tail(gamma: float, rel_tol: float = 1e-6) -> int:
    """Smallest ``T`` with ``gamma**T / (1 - gamma) < rel_tol``."""
    if gamma == 0.0:
        return 1
    return max(1, int(math.ceil(math.log(rel_tol * (1.0 - gamma)) / math.log(gamma))) + 1)


def exact_return(mdp: TabularMdp, policy: TabularPolicy, horizon: int) -> HorizonReturn:
    """``sum_{t<T} gamma^t E[r(s_t, a_t)]`` by forward propagation."""
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    if policy.table.shape != mdp.reward.shape:
        raise InputError("policy shape does not match the mdp")
    d = mdp.rho0
    total = 0.0
    discount = 1.0
    for _ in range(horizon):
        sa = d[:, None] * policy.table
        total += discount * float(np.sum(sa * mdp.reward))
        d = np.einsum("sa,sap->p", sa, mdp.transitions)
        discount *= mdp.gamma
    return HorizonReturn(total, truncation_tail(mdp.r_max, mdp.gamma, horizon))


@dataclass
class SegmentPair:
    kernel: np.ndarray
    policy: TabularPolicy

    def __post_init__(self):
        self.kernel = _check_stochastic(self.kernel, "segment kernel")


@dataclass
class BranchedProcess:
    pre: SegmentPair
    backward: SegmentPair
    forward: SegmentPair
    k1: int
    k2: int
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise InputError("k1 and k2 must be >= 0")
        if self.anchor is not None:
            self.anchor = _check_stochastic(self.anchor, "anchor")

    def segment(self, t: int) -> str:
        if t < self.k1:
            return "backward"
        if t < self.k1 + self.k2:
            return "forward"
        return "pre"


@dataclass
class SegmentMarginals:
    """Exact marginals of a branched process over ``T`` steps.

    ``states[t]`` is the state marginal at ``t`` (``T + 1`` rows).
    ``conditioning[t]`` is the distribution the step at ``t`` conditions on:
    ``(s_{t+1}, a_t)`` on backward steps and ``(s_t, a_t)`` otherwise.
    ``rewards[t]`` is ``E[r(s_t, a_t)]``.
    """

    states: np.ndarray
    conditioning: List[np.ndarray]
    rewards: np.ndarray
    segments: List[str]


def segment_marginals(
    process: BranchedProcess, mdp: TabularMdp, horizon: int
) -> SegmentMarginals:
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    n_states = mdp.n_states
    anchor = mdp.rho0 if process.anchor is None or process.k1 == 0 else process.anchor
    states = np.zeros((horizon + 1, n_states))
    conditioning: List[Optional[np.ndarray]] = [None] * horizon
    rewards = np.zeros(horizon)
    segments = [process.segment(t) for t in range(horizon)]

    k1 = min(process.k1, horizon)
    states[k1] = anchor
    back = process.backward
    for t in range(k1 - 1, -1, -1):
        joint = states[t + 1][:, None] * back.policy.table  # [s', a]
        conditioning[t] = joint
        states[t] = np.einsum("pa,pas->s", joint, back.kernel)
        rewards[t] = float(np.einsum("pa,pas,sa->", joint, back.kernel, mdp.reward))

    for t in range(k1, horizon):
        pair = process.forward if segments[t] == "forward" else process.pre
        sa = states[t][:, None] * pair.policy.table
        conditioning[t] = sa
        rewards[t] = float(np.sum(sa * mdp.reward))
        states[t + 1] = np.einsum("sa,sap->p", sa, pair.kernel)
    return SegmentMarginals(states, conditioning, rewards, segments)


def branched_return(
    process: BranchedProcess, mdp: TabularMdp, horizon: int
) -> HorizonReturn:
    """Expected discounted return of the three-segment process.

    ``mdp`` provides the reward table, ``gamma`` and ``rho0``; its own
    transitions are not used.
    """
    marginals = segment_marginals(process, mdp, horizon)
    discounts = mdp.gamma ** np.arange(horizon)
    return HorizonReturn(
        float(np.dot(discounts, marginals.rewards)),
        truncation_tail(mdp.r_max, mdp.gamma, horizon),
    )


###########################################################################
#                                                                         #
#                        total variation distance                         #
#                                                                         #
###########################################################################


def tv_distance(p, q) -> float:
    """``0.5 * sum |p - q|`` between two distributions."""
    p = _check_stochastic(p, "p", tol=1e-9)
    q = _check_stochastic(q, "q", tol=1e-9)
    if p.shape != q.shape:
        raise InputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.sum(np.abs(p - q)))


def row_tv(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """TVD between matching rows along the last axis."""
    return 0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q)), axis=-1)


def expected_tv(weights: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """``E_{x ~ weights} D_TV(p(.|x), q(.|x))``."""
    return float(np.sum(weights * row_tv(p, q)))


def max_tv(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.max(row_tv(p, q)))


###########################################################################
#                                                                         #
#                                  bounds                                 #
#                                                                         #
###########################################################################


class BoundVariant(enum.Enum):
    General = "general"
    Bidirectional = "bidirectional"
    ForwardOnly = "forward-only"


@dataclass(frozen=True)
class BoundInputs:
    eps_m_for: float = 0.0
    eps_m_back: float = 0.0
    eps_m_pre: float = 0.0
    eps_pi_for: float = 0.0
    eps_pi_back: float = 0.0
    eps_pi_pre: float = 0.0
    r_max: float = 1.0
    gamma: float = 0.9
    k1: int = 0
    k2: int = 0

    def __post_init__(self):
        eps = (
            self.eps_m_for,
            self.eps_m_back,
            self.eps_m_pre,
            self.eps_pi_for,
            self.eps_pi_back,
            self.eps_pi_pre,
        )
        if any(e < 0 for e in eps):
            raise InputError("all epsilons must be >= 0")
        if self.r_max <= 0:
            raise InputError("r_max must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.k1 < 0 or self.k2 < 0:
            raise InputError("k1 and k2 must be >= 0")

    @property
    def eps_m(self) -> float:
        return max(self.eps_m_for, self.eps_m_back)

    @property
    def eps_pi(self) -> float:
        return self.eps_pi_pre


def bound_rhs(inputs: BoundInputs, variant: BoundVariant) -> float:
    g, k1, k2 = inputs.gamma, inputs.k1, inputs.k2
    if variant is BoundVariant.General:
        pre = g ** (k1 + k2 + 1) / (1 - g) ** 2 * (inputs.eps_m_pre + inputs.eps_pi_pre)
        pre += g ** (k1 + k2) / (1 - g) * inputs.eps_pi_pre
        back = (1 - g**k1) / (1 - g) * (
            k1 * (inputs.eps_m_back + inputs.eps_pi_back) + inputs.eps_pi_back
        )
        fwd = g**k1 / (1 - g) * (k2 * (inputs.eps_m_for + inputs.eps_pi_for) + inputs.eps_pi_for)
        return 2.0 * inputs.r_max * (pre + back + fwd)

    coefficient = max(k1, k2) if variant is BoundVariant.Bidirectional else k1 + k2
    eps_pi, eps_m = inputs.eps_pi, inputs.eps_m
    return 2.0 * inputs.r_max * (
        g ** (k1 + k2 + 1) * eps_pi / (1 - g) ** 2
        + g ** (k1 + k2) * eps_pi / (1 - g)
        + coefficient * eps_m / (1 - g)
    )


def measure_epsilons(
    first: BranchedProcess,
    second: BranchedProcess,
    mdp: TabularMdp,
    horizon: int,
) -> BoundInputs:
    """Model and policy distances between two processes.

    Model terms are the max over the segment's steps of the TVD expected
    under the first process's conditioning marginal; policy terms are the
    max over states.
    """
    if (first.k1, first.k2) != (second.k1, second.k2):
        raise InputError("both processes need the same rollout lengths")
    marginals = segment_marginals(first, mdp, horizon)
    eps_m = {"backward": 0.0, "forward": 0.0, "pre": 0.0}
    for t, seg in enumerate(marginals.segments):
        k_first = getattr(first, seg).kernel
        k_second = getattr(second, seg).kernel
        eps_m[seg] = max(eps_m[seg], expected_tv(marginals.conditioning[t], k_first, k_second))
    return BoundInputs(
        eps_m_for=eps_m["forward"],
        eps_m_back=eps_m["backward"],
        eps_m_pre=eps_m["pre"],
        eps_pi_for=max_tv(first.forward.policy.table, second.forward.policy.table),
        eps_pi_back=max_tv(first.backward.policy.table, second.backward.policy.table),
        eps_pi_pre=max_tv(first.pre.policy.table, second.pre.policy.table),
        r_max=max(mdp.r_max, 1e-12),
        gamma=mdp.gamma,
        k1=first.k1,
        k2=first.k2,
    )


###########################################################################
#                                                                         #
#                              verify suite                               #
#                                                                         #
###########################################################################


@dataclass
class CheckResult:
    checked: int = 0
    violations: int = 0
    worst_slack: float = float("inf")

    def record(self, lhs: float, rhs: float):
        """Count ``lhs <= rhs``; slack is ``rhs - lhs``."""
        self.checked += 1
        slack = rhs - lhs
        self.worst_slack = min(self.worst_slack, slack)
        if slack < -FLOAT_SLACK:
            self.violations += 1


@dataclass
class VerifyReport:
    n_instances: int
    max_states: int
    max_actions: int
    gamma: float
    horizon: int
    checks: Dict[str, CheckResult] = field(default_factory=dict)

    @property
    def total_violations(self) -> int:
        return sum(c.violations for c in self.checks.values())

    def as_dict(self) -> dict:
        return {
            "parameters": {
                "instances": self.n_instances,
                "max_states": self.max_states,
                "max_actions": self.max_actions,
                "gamma": self.gamma,
                "horizon": self.horizon,
            },
            "checks": {
                name: {
                    "checked": c.checked,
                    "violations": c.violations,
                    "worst_slack": float(c.worst_slack),
                }
                for name, c in self.checks.items()
            },
            "total_violations": self.total_violations,
        }


def _perturb(kernel: np.ndarray, rng: np.random.Generator, max_mix: float = 0.3) -> np.ndarray:
    mix = rng.uniform(0.0, max_mix)
    return (1.0 - mix) * kernel + mix * random_distribution(kernel.shape[-1], rng, kernel.shape[:-1])


def _perturb_policy(policy: TabularPolicy, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(_perturb(policy.table, rng))


def reference_process(
    mdp: TabularMdp, policy: TabularPolicy, k1: int, k2: int
) -> BranchedProcess:
    """The true process seen through a branch at its stationary marginal.

    With ``rho0`` stationary, its return equals :func:`exact_return`.
    """
    mu = stationary_distribution(mdp.transitions, policy)
    q, pi_back = reverse_pair(mdp.transitions, policy, mu)
    truth = SegmentPair(mdp.transitions, policy)
    return BranchedProcess(
        pre=truth, backward=SegmentPair(q, pi_back), forward=truth, k1=k1, k2=k2, anchor=mu
    )


def _instance(rng, max_states, max_actions, gamma):
    n_states = int(rng.integers(2, max_states + 1))
    n_actions = int(rng.integers(1, max_actions + 1))
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    policy = random_policy(n_states, n_actions, rng)
    return mdp, policy


def check_general_bound(result: CheckResult, mdp, policy, horizon, rng):
    """Two processes differing in every pair against the general bound."""
    k1, k2 = int(rng.integers(0, 6)), int(rng.integers(0, 6))
    first = reference_process(mdp, policy, k1, k2)
    second = BranchedProcess(
        pre=SegmentPair(_perturb(mdp.transitions, rng), _perturb_policy(policy, rng)),
        backward=SegmentPair(
            _perturb(first.backward.kernel, rng), _perturb_policy(first.backward.policy, rng)
        ),
        forward=SegmentPair(_perturb(mdp.transitions, rng), _perturb_policy(policy, rng)),
        k1=k1,
        k2=k2,
        anchor=first.anchor,
    )
    inputs = measure_epsilons(first, second, mdp, horizon)
    gap = abs(
        branched_return(first, mdp, horizon).value - branched_return(second, mdp, horizon).value
    )
    # truncation allowance stays on the left
    allowance = 2.0 * truncation_tail(mdp.r_max, mdp.gamma, horizon)
    result.record(gap - allowance, bound_rhs(inputs, BoundVariant.General))


def _segment_tv(
    first: BranchedProcess, segment: str, kernel: np.ndarray, marginals: SegmentMarginals
) -> float:
    reference = getattr(first, segment).kernel
    return max(
        (
            expected_tv(marginals.conditioning[t], reference, kernel)
            for t, seg in enumerate(marginals.segments)
            if seg == segment
        ),
        default=0.0,
    )


def equal_model_error_pair(
    mdp: TabularMdp,
    policy: TabularPolicy,
    k1: int,
    k2: int,
    horizon: int,
    rng: np.random.Generator,
    max_mix: float = 0.3,
) -> Tuple[BranchedProcess, BranchedProcess]:
    """Reference process and a learned-model branch whose backward and
    forward model errors are equal.

    Both learned kernels mix the true ones with random noise. Row TVD is
    linear in the mixing weight, so each weight is scaled until the measured
    segment error hits one common value.
    """
    if k1 < 1 or k2 < 1:
        raise InputError("equal model errors need k1 >= 1 and k2 >= 1")
    first = reference_process(mdp, policy, k1, k2)
    marginals = segment_marginals(first, mdp, horizon)
    noise = {
        seg: random_distribution(mdp.n_states, rng, getattr(first, seg).kernel.shape[:-1])
        for seg in ("backward", "forward")
    }
    unit = {seg: _segment_tv(first, seg, noise[seg], marginals) for seg in noise}
    eps_m = rng.uniform(0.0, max_mix) * min(unit.values())

    def learned(seg):
        mix = eps_m / unit[seg] if unit[seg] > 0 else 0.0
        return (1.0 - mix) * getattr(first, seg).kernel + mix * noise[seg]

    second = BranchedProcess(
        pre=SegmentPair(mdp.transitions, _perturb_policy(policy, rng)),
        backward=SegmentPair(learned("backward"), first.backward.policy),
        forward=SegmentPair(learned("forward"), policy),
        k1=k1,
        k2=k2,
        anchor=first.anchor,
    )
    return first, second


def check_bidirectional_bound(result: CheckResult, mdp, policy, horizon, rng):
    """Learned-model branch of a data policy under the bidirectional bound assumptions.

    The pre-branch dynamics are exact, the backward policy is shared, the
    branch uses the evaluated policy and both model errors are equal, so
    only the data-policy shift and one common model error remain.
    """
    k1, k2 = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    first, second = equal_model_error_pair(mdp, policy, k1, k2, horizon, rng)
    inputs = measure_epsilons(first, second, mdp, horizon)
    gap = abs(
        branched_return(first, mdp, horizon).value - branched_return(second, mdp, horizon).value
    )
    allowance = 2.0 * truncation_tail(mdp.r_max, mdp.gamma, horizon)
    result.record(gap - allowance, bound_rhs(inputs, BoundVariant.Bidirectional))


def check_joint_tv(result: CheckResult, n_x: int, n_y: int, rng):
    p_x, q_x = random_distribution(n_x, rng), random_distribution(n_x, rng)
    p_y, q_y = random_distribution(n_y, rng, n_x), random_distribution(n_y, rng, n_x)
    joint = tv_distance((p_x[:, None] * p_y).ravel(), (q_x[:, None] * q_y).ravel())
    result.record(joint, tv_distance(p_x, q_x) + max_tv(p_y, q_y))


def check_backward_recursion(result: CheckResult, n_states: int, n_actions: int, rng):
    """``D(p1^t, p2^t) <= eps_m^back + eps_pi^back + D(p1^{t+1}, p2^{t+1})``."""
    d1, d2 = random_distribution(n_states, rng), random_distribution(n_states, rng)
    q1 = random_kernel(n_states, n_actions, rng)
    q2 = _perturb(q1, rng)
    pi1 = random_distribution(n_actions, rng, n_states)
    pi2 = _perturb(pi1, rng)
    prev1 = np.einsum("pa,pas->s", d1[:, None] * pi1, q1)
    prev2 = np.einsum("pa,pas->s", d2[:, None] * pi2, q2)
    eps_m = expected_tv(d1[:, None] * pi1, q1, q2)
    result.record(tv_distance(prev1, prev2), eps_m + max_tv(pi1, pi2) + tv_distance(d1, d2))


def check_forward_recursion(result: CheckResult, n_states: int, n_actions: int, rng):
    """``D(p1^t, p2^t) <= eps_m^for + eps_pi^for + D(p1^{t-1}, p2^{t-1})``."""
    d1, d2 = random_distribution(n_states, rng), random_distribution(n_states, rng)
    p1 = random_kernel(n_states, n_actions, rng)
    p2 = _perturb(p1, rng)
    pi1 = random_distribution(n_actions, rng, n_states)
    pi2 = _perturb(pi1, rng)
    next1 = np.einsum("sa,sap->p", d1[:, None] * pi1, p1)
    next2 = np.einsum("sa,sap->p", d2[:, None] * pi2, p2)
    eps_m = expected_tv(d1[:, None] * pi1, p1, p2)
    result.record(tv_distance(next1, next2), eps_m + max_tv(pi1, pi2) + tv_distance(d1, d2))


TIGHTNESS_K = range(6)
TIGHTNESS_GAMMAS = (0.5, 0.9, 0.99)
TIGHTNESS_EPS = (0.0, 0.05, 0.1)


def check_tightness(result: CheckResult):
    """Theorem bound against the forward-only bound over a fixed grid."""
    for k1 in TIGHTNESS_K:
        for k2 in TIGHTNESS_K:
            for gamma in TIGHTNESS_GAMMAS:
                for eps_m in TIGHTNESS_EPS:
                    for eps_pi in TIGHTNESS_EPS:
                        inputs = BoundInputs(
                            eps_m_for=eps_m,
                            eps_m_back=eps_m,
                            eps_pi_pre=eps_pi,
                            gamma=gamma,
                            k1=k1,
                            k2=k2,
                        )
                        result.record(
                            bound_rhs(inputs, BoundVariant.Bidirectional),
                            bound_rhs(inputs, BoundVariant.ForwardOnly),
                        )


def verify_suite(
    n_instances: int,
    rng: np.random.Generator,
    max_states: int = 5,
    max_actions: int = 3,
    gamma: float = 0.9,
    horizon: Optional[int] = None,
    verbose: bool = False,
) -> VerifyReport:
    """Run every bound check on ``n_instances`` random instances.

    Violations are counted in the report, never raised. With ``verbose`` a
    progress bar is drawn on stderr.
    """
    if n_instances < 1:
        raise InputError("n_instances must be >= 1")
    if max_states < 2 or max_actions < 1:
        raise InputError("need max_states >= 2 and max_actions >= 1")
    horizon = horizon_for_tail(gamma) if horizon is None else horizon
    report = VerifyReport(n_instances, max_states, max_actions, gamma, horizon)
    names = (
        "general_bound",
        "joint_tv",
        "backward_recursion",
        "forward_recursion",
        "bidirectional_bound",
        "tightness",
    )
    for name in names:
        report.checks[name] = CheckResult()

    instances = (
        click.progressbar(range(n_instances), label="checking bounds", file=sys.stderr)
        if verbose
        else nullcontext(range(n_instances))
    )
    with instances as indices:
        for _ in indices:
            mdp, policy = _instance(rng, max_states, max_actions, gamma)
            check_general_bound(report.checks["general_bound"], mdp, policy, horizon, rng)
            check_joint_tv(report.checks["joint_tv"], mdp.n_states, mdp.n_actions + 1, rng)
            check_backward_recursion(
                report.checks["backward_recursion"], mdp.n_states, mdp.n_actions, rng
            )
            check_forward_recursion(
                report.checks["forward_recursion"], mdp.n_states, mdp.n_actions, rng
            )
            check_bidirectional_bound(
                report.checks["bidirectional_bound"], mdp, policy, horizon, rng
            )
    check_tightness(report.checks["tightness"])
    return report


def write_report(report: VerifyReport, path: Union[Path, str, None] = None, stream=None):
    """Dump the report as YAML to ``path`` or ``stream``."""
    yaml_ = YAML()
    yaml_.default_flow_style = False
    if path is not None:
        with open(path, "w") as f:
            yaml_.dump(report.as_dict(), f)
    else:
        yaml_.dump(report.as_dict(), stream)
