import io

import numpy as np
import pytest

from ruamel.yaml import YAML

from bidyn.bound_lab import (
    TIGHTNESS_EPS,
    TIGHTNESS_GAMMAS,
    TIGHTNESS_K,
    BoundInputs,
    BoundVariant,
    BranchedProcess,
    CheckResult,
    SegmentPair,
    TabularMdp,
    TabularPolicy,
    branched_return,
    bound_rhs,
    check_tightness,
    equal_model_error_pair,
    exact_return,
    horizon_for_tail,
    measure_epsilons,
    random_kernel,
    random_mdp,
    random_policy,
    reference_process,
    reverse_pair,
    stationary_distribution,
    truncation_tail,
    tv_distance,
    verify_suite,
    write_report,
)
from bidyn.errors import InputError

SPOT = BoundInputs(
    eps_m_for=0.05, eps_m_back=0.05, eps_pi_pre=0.1, r_max=1.0, gamma=0.9, k1=1, k2=1
)


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs``."""
    u = rng.random(len(probs))[:, None]
    return np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)


def _simulate(rho0, segments, reward, gamma, horizon, n, rng):
    """Monte-Carlo discounted returns; ``segments[t]`` is the (kernel, policy) at ``t``."""
    states = _categorical(np.repeat(rho0[None], n, axis=0), rng)
    returns = np.zeros(n)
    for t in range(horizon):
        kernel, policy = segments[t]
        actions = _categorical(policy.table[states], rng)
        returns += gamma**t * reward[states, actions]
        states = _categorical(kernel[states, actions], rng)
    return returns


#####################################################################
# tabular types
#####################################################################


def test_mdp_rejects_non_stochastic_rows():
    with pytest.raises(InputError):
        TabularMdp(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))


def test_mdp_rejects_bad_gamma():
    with pytest.raises(InputError):
        TabularMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 1.0, np.array([0.5, 0.5]))


def test_policy_rejects_negative_entries():
    with pytest.raises(InputError):
        TabularPolicy(np.array([[1.5, -0.5]]))


def test_stationary_distribution_is_fixed_point():
    rng = np.random.default_rng(0)
    mdp = random_mdp(5, 3, 0.9, rng)
    policy = random_policy(5, 3, rng)
    mu = stationary_distribution(mdp.transitions, policy)
    chain = np.einsum("sa,sap->sp", policy.table, mdp.transitions)
    np.testing.assert_allclose(mu @ chain, mu, atol=1e-12)
    assert mu.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_reverse_pair_satisfies_bayes_identity(seed):
    rng = np.random.default_rng(seed)
    kernel = random_kernel(4, 3, rng)
    policy = random_policy(4, 3, rng)
    marginal = rng.dirichlet(np.ones(4))
    q, pi_back = reverse_pair(kernel, policy, marginal)
    forward_joint = marginal[:, None, None] * policy.table[:, :, None] * kernel
    d_next = forward_joint.sum(axis=(0, 1))
    backward_joint = np.einsum("p,pa,pas->sap", d_next, pi_back.table, q)
    np.testing.assert_allclose(backward_joint, forward_joint, atol=1e-14)
    np.testing.assert_allclose(q.sum(axis=-1), 1.0)


#####################################################################
# exact returns
#####################################################################


def test_exact_return_geometric_series():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9, np.ones(1))
    horizon = horizon_for_tail(0.9)
    result = exact_return(mdp, TabularPolicy(np.ones((1, 1))), horizon)
    assert abs(result.value - 10.0) <= result.tail + 1e-12
    assert result.tail < 1e-6


def test_exact_return_zero_reward():
    rng = np.random.default_rng(1)
    mdp = random_mdp(4, 2, 0.9, rng)
    mdp.reward[:] = 0.0
    assert exact_return(mdp, random_policy(4, 2, rng), 50).value == 0.0


def test_exact_return_truncation_within_tail():
    rng = np.random.default_rng(2)
    mdp = random_mdp(4, 3, 0.9, rng)
    policy = random_policy(4, 3, rng)
    short = exact_return(mdp, policy, 40)
    long = exact_return(mdp, policy, 80)
    assert abs(long.value - short.value) <= short.tail
    assert short.tail == truncation_tail(mdp.r_max, 0.9, 40)


def test_exact_return_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mdp = random_mdp(4, 2, 0.8, rng)
    policy = random_policy(4, 2, rng)
    horizon = 60
    returns = _simulate(
        mdp.rho0, [(mdp.transitions, policy)] * horizon, mdp.reward, 0.8, horizon, 100_000, rng
    )
    se = returns.std() / np.sqrt(len(returns))
    assert abs(returns.mean() - exact_return(mdp, policy, horizon).value) < 3 * se


def test_exact_return_input_errors():
    rng = np.random.default_rng(4)
    mdp = random_mdp(3, 2, 0.9, rng)
    with pytest.raises(InputError):
        exact_return(mdp, random_policy(3, 2, rng), 0)
    with pytest.raises(InputError):
        exact_return(mdp, random_policy(3, 3, rng), 10)


def test_horizon_for_tail():
    for gamma in (0.5, 0.9, 0.99):
        horizon = horizon_for_tail(gamma)
        assert gamma**horizon / (1 - gamma) < 1e-6
    assert horizon_for_tail(0.0) == 1


#####################################################################
# branched returns
#####################################################################


def test_branched_no_branch_is_exact_return():
    rng = np.random.default_rng(5)
    mdp = random_mdp(4, 3, 0.9, rng)
    policy = random_policy(4, 3, rng)
    other = SegmentPair(random_kernel(4, 3, rng), random_policy(4, 3, rng))
    process = BranchedProcess(
        pre=SegmentPair(mdp.transitions, policy), backward=other, forward=other, k1=0, k2=0
    )
    assert branched_return(process, mdp, 100).value == pytest.approx(
        exact_return(mdp, policy, 100).value, abs=1e-12
    )


@pytest.mark.parametrize("k1, k2", [(0, 3), (2, 0), (3, 4)])
def test_branched_reference_process_is_exact_at_stationarity(k1, k2):
    rng = np.random.default_rng(6)
    mdp = random_mdp(5, 2, 0.9, rng)
    policy = random_policy(5, 2, rng)
    mu = stationary_distribution(mdp.transitions, policy)
    mdp = TabularMdp(mdp.transitions, mdp.reward, mdp.gamma, mu)
    process = reference_process(mdp, policy, k1, k2)
    assert branched_return(process, mdp, 150).value == pytest.approx(
        exact_return(mdp, policy, 150).value, abs=1e-10
    )


def test_branched_forward_segments_match_monte_carlo():
    rng = np.random.default_rng(7)
    mdp = random_mdp(4, 2, 0.8, rng)
    pre = SegmentPair(mdp.transitions, random_policy(4, 2, rng))
    forward = SegmentPair(random_kernel(4, 2, rng), random_policy(4, 2, rng))
    process = BranchedProcess(pre=pre, backward=pre, forward=forward, k1=0, k2=3)
    horizon = 50
    segments = [
        (forward.kernel, forward.policy) if t < 3 else (pre.kernel, pre.policy)
        for t in range(horizon)
    ]
    returns = _simulate(mdp.rho0, segments, mdp.reward, 0.8, horizon, 100_000, rng)
    se = returns.std() / np.sqrt(len(returns))
    assert abs(returns.mean() - branched_return(process, mdp, horizon).value) < 3 * se


def test_branched_rejects_negative_lengths():
    rng = np.random.default_rng(8)
    pair = SegmentPair(random_kernel(2, 1, rng), random_policy(2, 1, rng))
    with pytest.raises(InputError):
        BranchedProcess(pre=pair, backward=pair, forward=pair, k1=-1, k2=0)


#####################################################################
# total variation
#####################################################################


@pytest.mark.parametrize(
    "p, q, expected",
    [
        ([0.2, 0.3, 0.5], [0.2, 0.3, 0.5], 0.0),
        ([1.0, 0.0], [0.0, 1.0], 1.0),
        ([0.5, 0.5], [1.0, 0.0], 0.5),
    ],
)
def test_tv_distance_values(p, q, expected):
    assert tv_distance(p, q) == pytest.approx(expected)


@pytest.mark.parametrize("p, q", [([0.5, 0.6], [0.5, 0.5]), ([0.5, 0.5], [0.2, 0.3, 0.5])])
def test_tv_distance_input_errors(p, q):
    with pytest.raises(InputError):
        tv_distance(p, q)


#####################################################################
# bounds
#####################################################################


@pytest.mark.parametrize("variant", list(BoundVariant))
def test_bound_zero_without_error(variant):
    assert bound_rhs(BoundInputs(k1=3, k2=2), variant) == 0.0


def test_bound_spot_values():
    assert bound_rhs(SPOT, BoundVariant.Bidirectional) == pytest.approx(17.2, abs=1e-12)
    assert bound_rhs(SPOT, BoundVariant.ForwardOnly) == pytest.approx(18.2, abs=1e-12)


@pytest.mark.parametrize(
    "name",
    ["eps_m_for", "eps_m_back", "eps_m_pre", "eps_pi_for", "eps_pi_back", "eps_pi_pre", "r_max"],
)
@pytest.mark.parametrize("variant", list(BoundVariant))
def test_bound_monotone(name, variant):
    base = BoundInputs(
        eps_m_for=0.02,
        eps_m_back=0.03,
        eps_m_pre=0.01,
        eps_pi_for=0.04,
        eps_pi_back=0.02,
        eps_pi_pre=0.05,
        r_max=1.0,
        gamma=0.9,
        k1=2,
        k2=3,
    )
    bigger = BoundInputs(**{**base.__dict__, name: getattr(base, name) + 0.1})
    assert bound_rhs(bigger, variant) >= bound_rhs(base, variant)


def test_bound_inputs_validation():
    with pytest.raises(InputError):
        BoundInputs(eps_m_for=-0.1)
    with pytest.raises(InputError):
        BoundInputs(r_max=0.0)
    with pytest.raises(InputError):
        BoundInputs(k1=-1)


def test_tightness_grid():
    result = CheckResult()
    check_tightness(result)
    n_points = len(TIGHTNESS_K) ** 2 * len(TIGHTNESS_GAMMAS) * len(TIGHTNESS_EPS) ** 2
    assert result.checked == n_points
    assert result.violations == 0
    assert result.worst_slack >= 0.0


def test_identical_processes_have_zero_epsilons():
    rng = np.random.default_rng(9)
    mdp = random_mdp(4, 3, 0.9, rng)
    policy = random_policy(4, 3, rng)
    first = reference_process(mdp, policy, 2, 3)
    second = reference_process(mdp, policy, 2, 3)
    inputs = measure_epsilons(first, second, mdp, 100)
    assert inputs.eps_m == 0.0
    assert inputs.eps_m_pre == inputs.eps_pi_pre == inputs.eps_pi_back == 0.0
    assert branched_return(first, mdp, 100).value == branched_return(second, mdp, 100).value


def test_measure_epsilons_needs_matching_lengths():
    rng = np.random.default_rng(10)
    mdp = random_mdp(3, 2, 0.9, rng)
    policy = random_policy(3, 2, rng)
    with pytest.raises(InputError):
        measure_epsilons(
            reference_process(mdp, policy, 1, 2), reference_process(mdp, policy, 2, 2), mdp, 50
        )


@pytest.mark.parametrize("seed", range(10))
def test_equal_model_error_pair(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(4, 2, 0.9, rng)
    policy = random_policy(4, 2, rng)
    horizon = horizon_for_tail(mdp.gamma)
    first, second = equal_model_error_pair(mdp, policy, 2, 3, horizon, rng)
    inputs = measure_epsilons(first, second, mdp, horizon)
    assert inputs.eps_m_for == pytest.approx(inputs.eps_m_back, rel=1e-9, abs=1e-15)
    assert inputs.eps_m_pre == inputs.eps_pi_for == inputs.eps_pi_back == 0.0
    gap = abs(
        branched_return(first, mdp, horizon).value - branched_return(second, mdp, horizon).value
    )
    allowance = 2.0 * truncation_tail(mdp.r_max, mdp.gamma, horizon)
    assert gap - allowance <= bound_rhs(inputs, BoundVariant.Bidirectional) + 1e-12


@pytest.mark.parametrize("k1, k2", [(0, 2), (2, 0)])
def test_equal_model_error_pair_needs_both_segments(k1, k2):
    rng = np.random.default_rng(0)
    mdp = random_mdp(3, 2, 0.9, rng)
    with pytest.raises(InputError):
        equal_model_error_pair(mdp, random_policy(3, 2, rng), k1, k2, 50, rng)


def test_check_result_counts_violations():
    result = CheckResult()
    result.record(1.0, 2.0)
    result.record(2.0, 2.0 - 1e-13)
    result.record(3.0, 2.0)
    assert result.checked == 3
    assert result.violations == 1
    assert result.worst_slack == pytest.approx(-1.0)


#####################################################################
# verify_suite
#####################################################################


def test_verify_suite_has_no_violations():
    report = verify_suite(100, np.random.default_rng(0), max_states=5, max_actions=3, gamma=0.9)
    assert report.total_violations == 0
    for name, check in report.checks.items():
        expected = 972 if name == "tightness" else 100
        assert check.checked == expected, name
        assert check.violations == 0, name


def test_verify_suite_is_seeded():
    first = verify_suite(5, np.random.default_rng(1), horizon=50).as_dict()
    second = verify_suite(5, np.random.default_rng(1), horizon=50).as_dict()
    assert first == second


def test_verify_suite_input_errors():
    with pytest.raises(InputError):
        verify_suite(0, np.random.default_rng(0))
    with pytest.raises(InputError):
        verify_suite(1, np.random.default_rng(0), max_states=1)


def test_write_report(tmp_path):
    report = verify_suite(3, np.random.default_rng(2), horizon=40)
    path = tmp_path / "report.yaml"
    write_report(report, path)
    loaded = YAML(typ="safe").load(path)
    assert loaded["total_violations"] == 0
    assert loaded["parameters"]["instances"] == 3
    assert loaded["parameters"]["horizon"] == 40
    assert set(loaded["checks"]) == set(report.checks)

    stream = io.StringIO()
    write_report(report, stream=stream)
    assert "total_violations: 0" in stream.getvalue()
