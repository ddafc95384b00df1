"""Desk-scale episodic environments, behavior policies, rollouts and data collection.

Every episode has exactly ``horizon`` transitions; states reached after a
terminal event self-loop with zero reward. Each episode draws all of its
randomness up front from its own seeded generator, so a trajectory depends
only on its seed, never on how many episodes are simulated together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DISCRETE, DatasetHeader, OfflineDataset, empty_dataset
from .errors import InvalidActionError, InvariantViolationError, PolicyDomainError
from .seeding import derive_seed

_ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Finite-horizon tabular MDP: P[s, a, s'], R[s, a], horizon, d0."""

    P: np.ndarray
    R: np.ndarray
    horizon: int
    d0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "d0", np.asarray(self.d0, dtype=np.float64))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def validate(self) -> None:
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise InvariantViolationError(f"P has shape {self.P.shape}, expected {(S, A, S)}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(-1) - 1.0)) > _ROW_TOL:
            raise InvariantViolationError("transition rows must be distributions")
        if np.max(np.abs(self.R)) > 1.0:
            raise InvariantViolationError("rewards must satisfy |r| <= 1")
        if self.d0.shape != (S,) or np.any(self.d0 < 0) or abs(self.d0.sum() - 1.0) > _ROW_TOL:
            raise InvariantViolationError("d0 must be a distribution over states")
        if self.horizon < 1:
            raise InvariantViolationError("horizon must be >= 1")


# ---------------------------------------------------------------------------
# environments


class TabularEnv:
    """Simulator for an MdpSpec. States are exposed as 1-d vectors ``[index]``."""

    kind = "tabular"

    def __init__(self, spec: MdpSpec, name: str = "tabular"):
        self.spec = spec
        self.name = name
        self._cum_P = np.cumsum(spec.P, axis=-1)
        self._cum_d0 = np.cumsum(spec.d0)

    @property
    def n_states(self) -> int:
        return self.spec.n_states

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def state_dim(self) -> int:
        return self.state_vectors.shape[1]

    @property
    def state_vectors(self) -> np.ndarray:
        return np.arange(self.n_states, dtype=np.float64)[:, None]

    def index_of(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)[:, 0]
        idx = np.rint(s).astype(np.int64)
        if np.any(idx != s) or np.any(idx < 0) or np.any(idx >= self.n_states):
            raise PolicyDomainError("state is not a valid tabular state")
        return idx

    def vector_of(self, idx) -> np.ndarray:
        return self.state_vectors[np.asarray(idx, dtype=np.int64)]

    def featurize(self, states) -> np.ndarray:
        """One-hot encoding fed to MLP policies."""
        idx = self.index_of(states)
        out = np.zeros((len(idx), self.n_states))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def episode_noise(self, rng: np.random.Generator) -> np.ndarray:
        # column 0: initial state draw; columns 1..T: transition draws
        return rng.random(self.horizon + 1)

    def initial_states(self, noise: np.ndarray) -> np.ndarray:
        idx = np.minimum(np.searchsorted(self._cum_d0, noise[:, 0], side="right"), self.n_states - 1)
        return self.vector_of(idx)

    def step_batch(self, states, actions, noise: np.ndarray, t: int):
        """Advance a batch; ``noise`` is the full per-episode noise block."""
        idx = self.index_of(states)
        actions = _check_actions(actions, self.n_actions)
        cum = self._cum_P[idx, actions]
        u = noise[:, t + 1]
        nxt = np.minimum((cum <= u[:, None]).sum(axis=1), self.n_states - 1)
        return self.vector_of(nxt), self.spec.R[idx, actions]


def _check_actions(actions, n_actions: int) -> np.ndarray:
    a = np.asarray(actions)
    if a.dtype.kind == "f":
        if np.any(a != np.rint(a)):
            raise InvalidActionError("discrete actions must be integers")
        a = a.astype(np.int64)
    a = a.astype(np.int64)
    if np.any(a < 0) or np.any(a >= n_actions):
        raise InvalidActionError(f"action out of range [0, {n_actions})")
    return a


# N, E, S, W as (dx, dy)
GRID_MOVES = np.array([[0, 1], [1, 0], [0, -1], [-1, 0]], dtype=np.int64)
_PERPENDICULAR = {0: (1, 3), 1: (0, 2), 2: (1, 3), 3: (0, 2)}


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 5
    height: int = 5
    p_slip: float = 0.0
    horizon: int = 20
    start: tuple = (0, 0)
    goal: tuple = (4, 4)

    def compile(self) -> MdpSpec:
        """Cells are indexed ``y * width + x``; the last index is the absorbing sink.

        The goal pays reward 1 for any action and then moves to the sink.
        A slip moves perpendicular to the intended direction (each side
        with probability p_slip / 2). Moves into walls leave the agent in place.
        """
        W, H = self.width, self.height
        n_cells = W * H
        S = n_cells + 1
        sink = n_cells
        goal = self.goal[1] * W + self.goal[0]
        P = np.zeros((S, 4, S))
        R = np.zeros((S, 4))

        def land(x, y, move):
            nx, ny = x + GRID_MOVES[move][0], y + GRID_MOVES[move][1]
            if 0 <= nx < W and 0 <= ny < H:
                return ny * W + nx
            return y * W + x

        for y in range(H):
            for x in range(W):
                s = y * W + x
                for a in range(4):
                    if s == goal:
                        P[s, a, sink] = 1.0
                        R[s, a] = 1.0
                        continue
                    P[s, a, land(x, y, a)] += 1.0 - self.p_slip
                    for b in _PERPENDICULAR[a]:
                        P[s, a, land(x, y, b)] += self.p_slip / 2.0
        P[sink, :, sink] = 1.0
        d0 = np.zeros(S)
        d0[self.start[1] * W + self.start[0]] = 1.0
        return MdpSpec(P=P, R=R, horizon=self.horizon, d0=d0)


class GridWorld(TabularEnv):
    """Grid world with (x, y) coordinate states; the sink is ``(-1, -1)``."""

    def __init__(self, cfg: GridWorldSpec = GridWorldSpec()):
        self.cfg = cfg
        super().__init__(cfg.compile(), name="gridworld")
        coords = [(i % cfg.width, i // cfg.width) for i in range(cfg.width * cfg.height)]
        self._vectors = np.array(coords + [(-1, -1)], dtype=np.float64)

    @property
    def state_vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def sink(self) -> int:
        return self.n_states - 1

    def index_of(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        xy = np.rint(s).astype(np.int64)
        if np.any(xy != s):
            raise PolicyDomainError("grid coordinates must be integers")
        W, H = self.cfg.width, self.cfg.height
        sink = (xy[:, 0] == -1) & (xy[:, 1] == -1)
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < W) & (xy[:, 1] >= 0) & (xy[:, 1] < H)
        if np.any(~(sink | inside)):
            raise PolicyDomainError("state lies outside the grid")
        return np.where(sink, W * H, xy[:, 1] * W + xy[:, 0])


@dataclass(frozen=True)
class PointGoalSpec:
    step: float = 0.07
    noise: float = 0.02
    goal: tuple = (0.9, 0.9)
    goal_radius: float = 0.08
    horizon: int = 40
    start: tuple = (0.1, 0.1)


_ANGLES = np.arange(8) * (np.pi / 4)
POINT_DIRECTIONS = np.stack([np.cos(_ANGLES), np.sin(_ANGLES)], axis=1)


class PointGoal:
    """Continuous 2-d navigation in the unit box with 8 discrete headings."""

    kind = "continuous"
    n_actions = 8
    state_dim = 2

    def __init__(self, cfg: PointGoalSpec = PointGoalSpec()):
        self.cfg = cfg
        self.name = "pointgoal"
        self._goal = np.asarray(cfg.goal, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def featurize(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(s)):
            raise PolicyDomainError("non-finite state")
        return s

    def in_goal(self, states) -> np.ndarray:
        return np.linalg.norm(np.asarray(states) - self._goal, axis=-1) <= self.cfg.goal_radius

    def episode_noise(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((self.horizon, 2))

    def initial_states(self, noise: np.ndarray) -> np.ndarray:
        return np.tile(np.asarray(self.cfg.start, dtype=np.float64), (len(noise), 1))

    def step_batch(self, states, actions, noise: np.ndarray, t: int):
        actions = _check_actions(actions, self.n_actions)
        s = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        nxt = s + self.cfg.step * POINT_DIRECTIONS[actions] + self.cfg.noise * noise[:, t]
        nxt = np.clip(nxt, 0.0, 1.0)
        return nxt, self.in_goal(nxt).astype(np.float64)


def make_env(name: str, **params):
    if name == "gridworld":
        return GridWorld(GridWorldSpec(**params))
    if name == "pointgoal":
        return PointGoal(PointGoalSpec(**params))
    raise ValueError(f"unknown environment {name!r}")


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Maps a batch of states to action distributions of shape (n, n_actions)."""

    deterministic = False

    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def probs(self, states) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def greedy(self, states) -> np.ndarray:
        # argmax picks the lowest action id on ties
        return np.argmax(self.probs(states), axis=1)

    def sample(self, states, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF sampling from ``probs`` with uniforms ``u``."""
        p = self.probs(states)
        if self.deterministic:
            return np.argmax(p, axis=1)
        cum = np.cumsum(p, axis=1)
        return np.minimum((cum <= u[:, None]).sum(axis=1), p.shape[1] - 1)


class TabularPolicy(Policy):
    def __init__(self, env: TabularEnv, table):
        table = np.asarray(table, dtype=np.float64)
        super().__init__(table.shape[1])
        if table.shape[0] != env.n_states:
            raise ValueError("policy table must have one row per state")
        if np.any(table < 0) or np.max(np.abs(table.sum(1) - 1.0)) > 1e-9:
            raise ValueError("policy rows must be distributions")
        self.env = env
        self.table = table
        self.deterministic = bool(np.all(table.max(1) == 1.0))

    def probs(self, states) -> np.ndarray:
        return self.table[self.env.index_of(states)]


class UniformPolicy(Policy):
    def probs(self, states) -> np.ndarray:
        n = len(np.atleast_2d(np.asarray(states, dtype=np.float64)))
        return np.full((n, self.n_actions), 1.0 / self.n_actions)


class EpsilonGreedy(Policy):
    """With probability eps act uniformly at random, else follow ``base``."""

    def __init__(self, base: Policy, eps: float):
        super().__init__(base.n_actions)
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        self.base = base
        self.eps = float(eps)

    def probs(self, states) -> np.ndarray:
        p = self.base.probs(states)
        return (1.0 - self.eps) * p + self.eps / self.n_actions


class MixturePolicy(Policy):
    """Per-step mixture: the action distribution is the weighted mean of components."""

    def __init__(self, components, weights=None):
        components = list(components)
        super().__init__(components[0].n_actions)
        w = np.ones(len(components)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.components = components
        self.weights = w / w.sum()

    def probs(self, states) -> np.ndarray:
        return sum(w * c.probs(states) for w, c in zip(self.weights, self.components))


class PointGoalExpert(Policy):
    """Heads in the direction that lands closest to the goal centre."""

    deterministic = True

    def __init__(self, env: PointGoal):
        super().__init__(env.n_actions)
        self.env = env

    def probs(self, states) -> np.ndarray:
        s = self.env.featurize(states)
        cand = np.clip(s[:, None, :] + self.env.cfg.step * POINT_DIRECTIONS[None], 0.0, 1.0)
        dist = np.linalg.norm(cand - self.env._goal, axis=-1)
        out = np.zeros((len(s), self.n_actions))
        out[np.arange(len(s)), np.argmin(dist, axis=1)] = 1.0
        return out


TIER_EPSILONS = {
    "expert": (0.05,),
    "medium": (0.4,),
    "medium-replay": (0.8, 0.6, 0.4),
    "medium-expert": (0.4, 0.05),
}


def make_behavior_policy(tier: str, expert: Policy) -> Policy:
    if tier not in TIER_EPSILONS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(TIER_EPSILONS)}")
    if not expert.deterministic:
        raise ValueError("behavior tiers are built from a deterministic expert")
    parts = [EpsilonGreedy(expert, e) for e in TIER_EPSILONS[tier]]
    return parts[0] if len(parts) == 1 else MixturePolicy(parts)


# ---------------------------------------------------------------------------
# rollouts


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    timesteps: np.ndarray = field(default=None)

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))

    def __len__(self) -> int:
        return len(self.rewards)


def env_step(env, state, action, rng: np.random.Generator):
    """Single transition. Returns ``(next_state, reward, done)``; ``done`` is never
    set by the dynamics because episodes always run to the horizon."""
    noise = env.episode_noise(rng)[None]
    s = np.asarray(state, dtype=np.float64)[None]
    # reuse the first transition column of a freshly drawn noise block
    nxt, r = env.step_batch(s, np.asarray([action]), noise, 0)
    return nxt[0], float(r[0]), False


def simulate(env, policy: Policy, seeds, first_actions=None, start_states=None):
    """Run one episode per seed, vectorised over episodes.

    Returns arrays shaped (B, T, ...): states, actions, rewards, next_states.
    ``start_states``/``first_actions`` override the initial state and the
    action at step 0 (used for Monte-Carlo action values).
    """
    seeds = [int(s) for s in seeds]
    B, T = len(seeds), env.horizon
    rngs = [np.random.default_rng(s) for s in seeds]
    noise = np.stack([env.episode_noise(g) for g in rngs]) if B else None
    u_act = np.stack([g.random(T) for g in rngs]) if B else None
    d = env.state_dim
    states = np.zeros((B, T, d))
    next_states = np.zeros((B, T, d))
    actions = np.zeros((B, T), dtype=np.int64)
    rewards = np.zeros((B, T))
    if B == 0:
        return states, actions, rewards, next_states
    s = env.initial_states(noise) if start_states is None else np.asarray(start_states, dtype=np.float64).reshape(B, d)
    for t in range(T):
        if t == 0 and first_actions is not None:
            a = _check_actions(np.broadcast_to(first_actions, (B,)), env.n_actions)
        else:
            a = policy.sample(s, u_act[:, t])
        nxt, r = env.step_batch(s, a, noise, t)
        states[:, t], actions[:, t], rewards[:, t], next_states[:, t] = s, a, r, nxt
        s = nxt
    return states, actions, rewards, next_states


def rollout(env, policy: Policy, seed: int) -> Trajectory:
    s, a, r, ns = simulate(env, policy, [seed])
    return Trajectory(s[0], a[0], r[0], ns[0], np.arange(env.horizon))


def episode_returns(env, policy: Policy, seeds, chunk: int = 4096) -> np.ndarray:
    seeds = list(seeds)
    out = []
    for i in range(0, len(seeds), chunk):
        _, _, r, _ = simulate(env, policy, seeds[i:i + chunk])
        out.append(r.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def collect_dataset(env, behavior: Policy, n_traj: int, seed: int, tier: str = "", chunk: int = 2048) -> OfflineDataset:
    """Roll out ``n_traj`` episodes with seeds ``derive_seed(seed, "traj", i)``."""
    header = DatasetHeader(
        state_dim=env.state_dim,
        action_kind=DISCRETE,
        action_size=env.n_actions,
        horizon=env.horizon,
        env_name=env.name,
        collection_seed=int(seed),
        quality_tier=tier,
    )
    if n_traj < 0:
        raise ValueError("n_traj must be >= 0")
    if n_traj == 0:
        return empty_dataset(header)
    T = env.horizon
    blocks = []
    for start in range(0, n_traj, chunk):
        ids = range(start, min(n_traj, start + chunk))
        blocks.append(simulate(env, behavior, [derive_seed(seed, "traj", i) for i in ids]))
    s, a, r, ns = (np.concatenate([b[k] for b in blocks]) for k in range(4))
    d = env.state_dim
    dones = np.zeros((n_traj, T), dtype=bool)
    dones[:, -1] = True
    return OfflineDataset(
        header=header,
        states=s.reshape(-1, d),
        actions=a.reshape(-1),
        rewards=r.reshape(-1),
        next_states=ns.reshape(-1, d),
        timesteps=np.tile(np.arange(T), n_traj),
        traj_ids=np.repeat(np.arange(n_traj), T),
        dones=dones.reshape(-1),
    )
