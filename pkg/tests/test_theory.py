from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdrselect import theory as TH
from sdrselect.envs import MdpSpec


def chain(a, b, T=6):
    P = np.array([[[1 - a, a]], [[b, 1 - b]]])
    return MdpSpec(P, np.array([[1.0], [0.0]]), T, np.array([1.0, 0.0]))


# distances


def test_tv_examples():
    assert TH.tv_distance([1, 0], [0, 1]) == 1.0
    assert TH.tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert TH.tv_distance([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3)
    with pytest.raises(TH.SupportError):
        TH.tv_distance([1.0], [0.5, 0.5])


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_tv_is_a_bounded_metric(seed, n):
    rng = np.random.default_rng(seed)
    p, q, r = rng.dirichlet(np.ones(n), 3)
    assert 0.0 <= TH.tv_distance(p, q) <= 1.0 + 1e-15
    assert TH.tv_distance(p, q) == pytest.approx(TH.tv_distance(q, p), abs=0)
    assert TH.tv_distance(p, r) <= TH.tv_distance(p, q) + TH.tv_distance(q, r) + 1e-15


def test_chi_square_examples():
    assert TH.chi_square_c([0.3, 0.7], [0.3, 0.7]) == pytest.approx(1.0)
    assert TH.chi_square_c([1.0, 0.0], [0.5, 0.5]) == pytest.approx(2.0)
    with pytest.raises(TH.SupportError):
        TH.chi_square_c([0.5, 0.5], [1.0, 0.0])


def test_chi_square_at_least_one():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 10))
        d, dp = rng.dirichlet(np.ones(n), 2)
        assert TH.chi_square_c(d, dp) >= 1.0 - 1e-12


def test_kl_rows():
    assert TH.kl_rows([[0.5, 0.5]], [[0.5, 0.5]])[0] == 0.0
    assert TH.kl_rows([[1.0, 0.0]], [[0.5, 0.5]])[0] == pytest.approx(math.log(2))
    assert math.isinf(TH.kl_rows([[0.5, 0.5]], [[1.0, 0.0]])[0])


# exact state distributions


def test_two_state_chain_closed_form():
    a, b = 0.3, 0.1
    mdp = chain(a, b)
    dists, avg = TH.stepwise_state_dists(mdp, np.ones((2, 1)))
    t = np.arange(mdp.horizon)
    closed = b / (a + b) + a / (a + b) * (1 - a - b) ** t
    assert np.allclose(dists[:, 0], closed, atol=1e-14)
    assert np.allclose(avg, dists.mean(0))
    assert TH.exact_return(mdp, np.ones((2, 1))) == pytest.approx(closed.sum())


def monte_carlo_return(mdp, pi, n, seed):
    rng = np.random.default_rng(seed)
    s = rng.choice(mdp.n_states, size=n, p=mdp.d0)
    total = np.zeros(n)
    for _ in range(mdp.horizon):
        cum_pi = np.cumsum(pi[s], axis=1)
        a = np.minimum((cum_pi < rng.random(n)[:, None]).sum(1), mdp.n_actions - 1)
        total += mdp.R[s, a]
        cum_p = np.cumsum(mdp.P[s, a], axis=1)
        s = np.minimum((cum_p < rng.random(n)[:, None]).sum(1), mdp.n_states - 1)
    return total


def test_exact_return_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mdp = TH.random_mdp(rng, max_states=5, max_actions=3, max_horizon=6)
    pi = TH.random_policy(rng, mdp.n_states, mdp.n_actions)
    rets = monte_carlo_return(mdp, pi, 100_000, 4)
    assert abs(rets.mean() - TH.exact_return(mdp, pi)) <= 5 * rets.std() / math.sqrt(len(rets))


# distribution-shift bound


def test_shift_bound_trivial_cases():
    inst = TH.random_instance(5)
    mdp, pi_star, pi_beta = inst["mdp"], inst["pi_star"], inst["pi_beta"]
    same = TH.check_shift_bound(mdp, pi_star, pi_star, pi_beta)
    assert same.lhs == 0.0 and same.holds
    on_policy = TH.check_shift_bound(mdp, inst["pi"], pi_star, pi_star)
    assert on_policy.lhs == 0.0 and on_policy.rhs == 0.0 and on_policy.holds
    with pytest.raises(ValueError):
        TH.check_shift_bound(mdp, inst["pi"], pi_star, pi_beta, metric="hellinger")


def test_shift_bound_fuzz_small():
    for metric in ("tv", "kl"):
        summary = TH.fuzz_shift_bound(150, seed=1, metric=metric)
        assert summary.passed and summary.count == 150 and summary.worst_margin >= -1e-12


def test_shift_bound_kl_needs_support():
    inst = TH.random_instance(2)
    with pytest.raises(TH.SupportError):
        TH.check_shift_bound(inst["mdp"], inst["pi"], inst["pi_star"], inst["pi_beta"], metric="kl")


def test_shift_bound_hand_instance():
    # action 0 stays put, action 1 jumps to state 1; start in state 0, two steps
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[:, 1, 1] = 1.0
    mdp = MdpSpec(P, np.zeros((2, 2)), 2, np.array([1.0, 0.0]))
    pi_star = TH.deterministic_policy([0, 0], 2)
    pi_beta = TH.deterministic_policy([1, 1], 2)
    pi = TH.deterministic_policy([0, 1], 2)  # disagrees with pi* in state 1 only
    rep = TH.check_shift_bound(mdp, pi, pi_star, pi_beta)
    # d_* = (1, 0), d_beta = (1/2, 1/2): lhs = 1/2, rhs = 2 * 1/2 * 1
    assert rep.lhs == 0.5 and rep.rhs == 1.0 and rep.holds


def test_performance_gap_zero_when_policies_agree():
    inst = TH.random_instance(7, optimal_expert=True)
    rep = TH.check_performance_gap(inst["mdp"], inst["pi_star"], inst["pi_star"])
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.holds


def test_performance_gap_fuzz_small():
    summary = TH.fuzz_performance_gap(150, seed=2)
    assert summary.passed


def test_performance_gap_signed_rewards_break_the_unit_bound():
    # one state, one step, rewards -1 and +1: the gap is 2 while the bound gives 1
    mdp = MdpSpec(np.ones((1, 2, 1)), np.array([[-1.0, 1.0]]), 1, np.ones(1))
    pi_star = TH.deterministic_policy([1], 2)
    pi = TH.deterministic_policy([0], 2)
    rep = TH.check_performance_gap(mdp, pi, pi_star)
    assert rep.lhs == 2.0 and rep.rhs == 1.0 and not rep.holds
    # scaling by the reward range restores it
    assert rep.lhs <= 2 * rep.rhs


def test_performance_gap_with_signed_rewards_holds_at_twice_the_bound():
    rng = np.random.default_rng(9)
    for _ in range(100):
        mdp = TH.random_mdp(rng, 8, 4, 6, reward_low=-1.0)
        pi_star = TH.optimal_stationary_policy(mdp)
        pi = 0.5 * pi_star + 0.5 * TH.random_policy(rng, mdp.n_states, mdp.n_actions)
        rep = TH.check_performance_gap(mdp, pi, pi_star)
        assert rep.lhs <= 2 * rep.rhs + 1e-12


# generalization bound coverage


def test_coverage_zero_error_never_violates():
    assert TH.coverage_frequency(TH.CoverageConfig(m=10, repetitions=2000, zero_error=True)) == 0.0


def test_importance_pair_respects_cap():
    rng = np.random.default_rng(0)
    for w_max in (1.0, 2.0, 4.0):
        d, dp = TH.importance_pair(rng, 20, w_max)
        assert np.max(d / dp) <= w_max + 1e-9 and d.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("m,delta,w_max", [(10, 0.05, 1.0), (100, 0.2, 4.0), (10, 0.99, 4.0)])
def test_coverage_frequency_small(m, delta, w_max):
    reps = 2000
    freq = TH.coverage_frequency(TH.CoverageConfig(m=m, delta=delta, repetitions=reps, w_max=w_max, seed=m))
    assert freq <= TH.coverage_limit(delta, reps)


def test_coverage_rejects_bad_config():
    with pytest.raises(ValueError):
        TH.coverage_frequency(TH.CoverageConfig(m=0))
    with pytest.raises(ValueError):
        TH.coverage_frequency(TH.CoverageConfig(delta=1.0))


# budget allocation


def test_allocation_single_step_takes_everything():
    assert TH.optimal_allocation(TH.AllocationProblem((3.0,), 50)).tolist() == [50.0]


def test_allocation_two_steps_example():
    n = TH.optimal_allocation(TH.AllocationProblem((1.0, 1.0), 100))
    assert np.allclose(n, [61.35, 38.65], atol=5e-3)


def test_allocation_decreasing_for_constant_c():
    n = TH.optimal_allocation(TH.AllocationProblem((2.0,) * 8, 1000))
    assert np.all(np.diff(n) < 0)


def test_allocation_geometric_c_ratio():
    c, T = 1.7, 6
    n = TH.optimal_allocation(TH.AllocationProblem(tuple(c ** np.arange(T)), 1000))
    t = np.arange(T - 1)
    expected = ((T - t - 1) / (T - t)) ** (2 / 3) * c ** (1 / 3)
    assert np.allclose(n[1:] / n[:-1], expected, rtol=1e-12)


def test_geometric_c_slows_the_decline():
    T, c = 8, 1.5
    flat = TH.optimal_allocation(TH.AllocationProblem((1.0,) * T, 1000))
    geo = TH.optimal_allocation(TH.AllocationProblem(tuple(c ** np.arange(T)), 1000))
    ratio_flat, ratio_geo = flat[1:] / flat[:-1], geo[1:] / geo[:-1]
    assert np.allclose(ratio_geo, ratio_flat * c ** (1 / 3), rtol=1e-12)
    assert np.all(ratio_geo > ratio_flat)


def test_allocation_validation():
    with pytest.raises(ValueError):
        TH.AllocationProblem((0.5,), 10)
    with pytest.raises(ValueError):
        TH.AllocationProblem((), 10)
    with pytest.raises(ValueError):
        TH.AllocationProblem((1.0,), 0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_closed_form_beats_random_and_matches_numeric(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 9))
    prob = TH.AllocationProblem(tuple(1.0 + rng.exponential(2.0, T)), float(rng.integers(10, 10_000)))
    best = TH.allocation_objective(prob, TH.optimal_allocation(prob))
    rand = prob.N * rng.dirichlet(np.ones(T), 2000)
    assert np.all(TH.allocation_objective(prob, rand) >= best - 1e-9 * best)
    numeric = TH.allocation_objective(prob, TH.projected_gradient_allocation(prob))
    assert abs(numeric - best) <= 1e-6 * best


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=10), st.integers(0, 5000))
def test_round_allocation(n, total):
    r = TH.round_allocation(n, total)
    assert r.sum() == total and np.all(r >= 0)
    assert np.all(np.abs(r - np.asarray(n) * total / np.sum(n)) < 1.0)
