from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference_grad, max_relative_error
from sdrselect import bc as B
from sdrselect.envs import collect_dataset, make_behavior_policy
from sdrselect.estimators import greedy_policy, value_iteration
from sdrselect.dataset import relabel_with_expert


def random_case(rng):
    dims = (int(rng.integers(1, 5)),) + tuple(rng.integers(1, 6, int(rng.integers(0, 3)))) + (int(rng.integers(2, 5)),)
    pol = B.MlpPolicy(dims, rng.normal(0, 0.8, B.n_params(dims)))
    n = int(rng.integers(1, 9))
    return pol, rng.normal(size=(n, dims[0])), rng.integers(0, dims[-1], n)


def test_init_is_seeded_with_zero_biases():
    a, b = B.init_mlp((3, 8, 8, 4), 5), B.init_mlp((3, 8, 8, 4), 5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, B.init_mlp((3, 8, 8, 4), 6).theta)
    assert all(np.all(bias == 0) for bias in a.biases)
    with pytest.raises(ValueError):
        B.init_mlp((3, 0, 4), 0)


def test_init_policy_is_near_uniform():
    pol = B.init_mlp((25, 64, 64, 4), 0)
    p = B.forward(pol, np.eye(25))
    assert np.max(p) <= 0.5


def test_zero_weights_give_uniform():
    pol = B.MlpPolicy((2, 3, 4), np.zeros(B.n_params((2, 3, 4))))
    assert np.allclose(B.forward(pol, np.ones((5, 2))), 0.25)


def test_output_bias_shift_invariance():
    rng = np.random.default_rng(0)
    pol = B.init_mlp((3, 5, 4), 1)
    x = rng.normal(size=(7, 3))
    before = B.forward(pol, x)
    pol.biases[-1][:] += 3.7  # views into theta
    assert np.allclose(B.forward(pol, x), before, atol=1e-15)


def test_raising_a_logit_raises_its_probability():
    pol = B.init_mlp((3, 5, 4), 2)
    x = np.ones((1, 3))
    p0 = B.forward(pol, x)[0]
    pol.biases[-1][2] += 0.5
    p1 = B.forward(pol, x)[0]
    assert p1[2] > p0[2] and np.all(np.delete(p1, 2) < np.delete(p0, 2))


def test_forward_shape_errors():
    pol = B.init_mlp((3, 4), 0)
    with pytest.raises(ValueError):
        B.forward(pol, np.ones((2, 5)))
    with pytest.raises(ValueError):
        B.MlpPolicy((3, 4), np.zeros(3))


def test_uniform_loss_is_log_actions():
    pol = B.MlpPolicy((2, 4), np.zeros(B.n_params((2, 4))))
    loss, _ = B.loss_and_grad(pol, np.ones((3, 2)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(B.EmptyBatchError):
        B.loss_and_grad(pol, np.zeros((0, 2)), [])


def test_confident_correct_policy_has_vanishing_loss():
    pol = B.MlpPolicy((1, 3), np.zeros(B.n_params((1, 3))))
    pol.biases[0][:] = [60.0, 0.0, 0.0]
    loss, grad = B.loss_and_grad(pol, np.ones((4, 1)), [0, 0, 0, 0])
    assert loss < 1e-20 and np.max(np.abs(grad)) < 1e-20


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pol, x, y = random_case(rng)
    _, g = B.loss_and_grad(pol, x, y)
    fd = central_difference_grad(lambda th: B.loss_and_grad(B.MlpPolicy(pol.dims, th), x, y)[0], pol.theta)
    assert max_relative_error(g, fd) <= 1e-4


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_multiplicity_weights_equal_expanded_batch(seed):
    rng = np.random.default_rng(seed)
    pol, x, y = random_case(rng)
    counts = rng.integers(1, 5, len(y))
    l1, g1 = B.loss_and_grad(pol, x, y, counts)
    l2, g2 = B.loss_and_grad(pol, np.repeat(x, counts, axis=0), np.repeat(y, counts))
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-14)
    assert np.allclose(g1, g2, rtol=1e-10, atol=1e-14)


def test_unflatten_layout():
    pol = B.init_mlp((2, 3, 4), 0)
    parts = B.unflatten(pol, pol.theta)
    assert [p.shape for p in parts] == [(2, 3), (3,), (3, 4), (4,)]


def test_adam_first_step_moves_by_lr():
    theta = np.zeros(3)
    B.adam_update(theta, np.array([2.0, -0.5, 0.0]), B.AdamState.zeros_like(theta), lr=0.1)
    assert np.allclose(theta, [-0.1, 0.1, 0.0], atol=1e-7)


# training


@pytest.fixture(scope="module")
def expert_pairs():
    from sdrselect.envs import GridWorld, GridWorldSpec

    env = GridWorld(GridWorldSpec(p_slip=0.2))
    expert = greedy_policy(value_iteration(env))
    ds = collect_dataset(env, make_behavior_policy("medium", expert), 40, seed=0)
    bc = relabel_with_expert(ds, expert)
    return env, bc, env.featurize(bc.states), bc.expert_actions.astype(np.int64)


def test_zero_epochs_returns_initialization(expert_pairs):
    _, _, x, y = expert_pairs
    cfg = B.TrainConfig(epochs=0, hidden=8, seed=3)
    pol = B.train_bc(x, y, cfg, 4)
    from sdrselect.seeding import derive_seed

    assert np.array_equal(pol.theta, B.init_mlp(pol.dims, derive_seed(3, "init")).theta)


def test_loss_decreases_over_first_epochs(expert_pairs):
    _, _, x, y = expert_pairs
    hist = []
    B.train_bc(x, y, B.TrainConfig(epochs=3, batch_size=64, learning_rate=3e-3, hidden=32), 4, hist)
    assert len(hist) == 3 and hist[0] >= hist[1] >= hist[2]


def test_training_is_deterministic(expert_pairs):
    _, _, x, y = expert_pairs
    cfg = B.TrainConfig(epochs=2, batch_size=32, hidden=16, seed=11)
    assert np.array_equal(B.train_bc(x, y, cfg, 4).theta, B.train_bc(x, y, cfg, 4).theta)


def test_equal_compute_step_count(expert_pairs, monkeypatch):
    _, _, x, y = expert_pairs
    calls = []
    real = B.adam_update
    monkeypatch.setattr(B, "adam_update", lambda *a, **k: (calls.append(1), real(*a, **k)))
    cfg = B.TrainConfig(epochs=3, batch_size=50, hidden=4, repeat_to=len(y))
    for subset in (5, 60, len(y)):
        calls.clear()
        B.train_bc(x[:subset], y[:subset], cfg, 4)
        assert len(calls) == 3 * math.ceil(len(y) / 50) == 3 * B.steps_per_epoch(subset, cfg)


def test_tiny_subset_overfits(expert_pairs):
    _, _, x, y = expert_pairs
    rng = np.random.default_rng(0)
    idx = rng.choice(len(y), 10, replace=False)
    hist = []
    cfg = B.TrainConfig(epochs=30, batch_size=64, learning_rate=1e-2, hidden=32, repeat_to=2048)
    B.train_bc(x[idx], y[idx], cfg, 4, hist)
    assert hist[-1] < 0.01


def test_empty_subset_rejected(expert_pairs):
    _, _, x, y = expert_pairs
    with pytest.raises(B.EmptyBatchError):
        B.train_bc(x[:0], y[:0], B.TrainConfig(), 4)
    with pytest.raises(ValueError):
        B.TrainConfig(batch_size=0)


def test_train_policy_ignores_index_order(expert_pairs):
    env, bc, _, _ = expert_pairs
    cfg = B.TrainConfig(epochs=1, hidden=8)
    idx = np.arange(0, len(bc), 3)
    a = B.train_policy(env, bc, idx, cfg)
    b = B.train_policy(env, bc, idx[::-1], cfg)
    assert np.array_equal(a.mlp.theta, b.mlp.theta)
    assert a.deterministic


def test_checkpoint_round_trip(tmp_path):
    pol = B.init_mlp((3, 7, 4), 9)
    p = tmp_path / "p.mlpc"
    B.save_checkpoint(pol, p, seed=9)
    back = B.load_checkpoint(p)
    assert back.dims == pol.dims and np.array_equal(back.theta, pol.theta)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(B.forward(back, x), B.forward(pol, x))


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "p.mlpc"
    B.save_checkpoint(B.init_mlp((3, 4), 0), p)
    buf = p.read_bytes()
    p.write_bytes(buf[:-8])
    with pytest.raises(B.SDRError):
        B.load_checkpoint(p)
    p.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(B.SDRError):
        B.load_checkpoint(p)


def test_checkpoint_rejects_other_state_width(tmp_path):
    p = tmp_path / "p.mlpc"
    B.save_checkpoint(B.init_mlp((3, 4), 0), p)
    with pytest.raises(ValueError):
        B.forward(B.load_checkpoint(p), np.ones((1, 2)))
