from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdrselect.dataset import BCDataset, DatasetHeader, OfflineDataset
from sdrselect.envs import GridWorld, GridWorldSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiments (minutes)")


def synthetic_dataset(timesteps, horizon=None, state_dim=2, n_actions=4, rewards=None, seed=0):
    """Offline dataset with one trajectory per timestep-0 entry; rows keep the
    given timestep order, so timesteps must form valid trajectories when grouped."""
    ts = np.asarray(timesteps, dtype=np.int64)
    n = len(ts)
    T = int(horizon if horizon is not None else (ts.max() + 1 if n else 1))
    rng = np.random.default_rng(seed)
    # assign trajectory ids: the k-th occurrence of timestep t belongs to trajectory k
    tid = np.zeros(n, dtype=np.int64)
    seen = {}
    for i, t in enumerate(ts):
        tid[i] = seen.get(int(t), 0)
        seen[int(t)] = tid[i] + 1
    last = {}
    for i in range(n):
        last[tid[i]] = max(last.get(tid[i], -1), ts[i])
    dones = np.array([ts[i] == last[tid[i]] and ts[i] == T - 1 for i in range(n)], dtype=bool)
    header = DatasetHeader(state_dim=state_dim, action_kind="discrete", action_size=n_actions, horizon=T)
    return OfflineDataset(
        header=header,
        states=rng.normal(size=(n, state_dim)),
        actions=rng.integers(0, n_actions, n),
        rewards=rng.uniform(-1, 1, n) if rewards is None else rewards,
        next_states=rng.normal(size=(n, state_dim)),
        timesteps=ts,
        traj_ids=tid,
        dones=dones,
    )


def synthetic_bc(timesteps, horizon=None, rewards=None, seed=0):
    ds = synthetic_dataset(timesteps, horizon, rewards=rewards, seed=seed)
    return BCDataset(source=ds, expert_actions=np.asarray(ds.actions))


def grid_trajectory_timesteps(n_traj, T):
    return np.tile(np.arange(T), n_traj)


@pytest.fixture
def grid():
    return GridWorld(GridWorldSpec())


@pytest.fixture
def slippery_grid():
    return GridWorld(GridWorldSpec(p_slip=0.2))
