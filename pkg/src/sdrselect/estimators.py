"""Expert extraction, action-value sources and k-NN state density."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gammaln

from .envs import MdpSpec, Policy, TabularEnv, TabularPolicy, simulate
from .errors import SDRError
from .seeding import derive_seed

# Finite density scores are capped below the duplicate sentinel so that every
# exact-duplicate query outranks every finite score, including after float32
# storage (max ~3.4e38).
DENSITY_CAP = 1e30
DUPLICATE_SENTINEL = 1e37


class TooFewPointsError(SDRError, ValueError):
    pass


# ---------------------------------------------------------------------------
# action values


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray  # (S, A), step-0 optimal action values
    env: TabularEnv
    stages: np.ndarray | None = None  # (T, S, A) values for every remaining horizon

    def __call__(self, states, actions) -> np.ndarray:
        idx = self.env.index_of(states)
        return self.values[idx, np.asarray(actions, dtype=np.int64)]


def backward_induction(spec: MdpSpec) -> np.ndarray:
    """Optimal finite-horizon action values for every step, shape (T, S, A)."""
    T = spec.horizon
    Q = np.zeros((T, spec.n_states, spec.n_actions))
    v_next = np.zeros(spec.n_states)
    for h in range(T - 1, -1, -1):
        Q[h] = spec.R + spec.P @ v_next
        v_next = Q[h].max(axis=1)
    return Q


def value_iteration(env_or_spec, tol: float = 1e-12) -> QTable:
    """Step-0 optimal Q by exact backward induction over the horizon.

    ``tol`` is accepted for interface compatibility; finite-horizon backward
    induction is exact and needs no stopping rule.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    env = env_or_spec if isinstance(env_or_spec, TabularEnv) else TabularEnv(env_or_spec)
    Q = backward_induction(env.spec)
    return QTable(values=Q[0], env=env, stages=Q)


TIE_TOL = 1e-12


def greedy_policy(q: QTable) -> TabularPolicy:
    """Deterministic argmax policy; ties go to the lowest action id.

    When ``q`` carries per-horizon values, actions tied on the step-0 value
    are first narrowed by the values with less time remaining (steps 1, 2,
    ...), so the stationary policy prefers actions that collect reward
    sooner. Without that refinement a long horizon makes most actions tie
    and the lowest id can stall the agent against a wall.
    """
    vals = np.asarray(q.values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("Q must be finite")
    keep = vals >= vals.max(axis=1, keepdims=True) - TIE_TOL
    if q.stages is not None:
        for stage in np.asarray(q.stages, dtype=np.float64)[1:]:
            masked = np.where(keep, stage, -np.inf)
            keep &= masked >= masked.max(axis=1, keepdims=True) - TIE_TOL
    table = np.zeros_like(vals)
    table[np.arange(len(vals)), np.argmax(keep, axis=1)] = 1.0
    return TabularPolicy(q.env, table)


def mc_q(env, expert: Policy, s, a: int, rollouts_per_pair: int, seed: int) -> float:
    """Mean return of ``rollouts_per_pair`` episodes that start in ``s``, take ``a``,
    then follow ``expert`` for the rest of the horizon."""
    return float(mc_q_batch(env, expert, np.asarray(s)[None], np.asarray([a]), rollouts_per_pair, seed)[0])


def mc_q_batch(env, expert: Policy, states, actions, rollouts_per_pair: int, seed: int) -> np.ndarray:
    if rollouts_per_pair < 1:
        raise ValueError("rollouts_per_pair must be >= 1")
    states = np.asarray(states, dtype=np.float64).reshape(len(actions), -1)
    actions = np.asarray(actions, dtype=np.int64)
    n, m = len(states), rollouts_per_pair
    out = np.zeros(n)
    chunk = max(1, 8192 // m)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        seeds = [derive_seed(seed, i, j) for i in range(lo, hi) for j in range(m)]
        _, _, r, _ = simulate(
            env, expert, seeds,
            first_actions=np.repeat(actions[lo:hi], m),
            start_states=np.repeat(states[lo:hi], m, axis=0),
        )
        out[lo:hi] = r.sum(axis=1).reshape(hi - lo, m).mean(axis=1)
    return out


@dataclass(frozen=True, eq=False)
class McQEstimator:
    """Monte-Carlo action values at reference pairs, k-NN averaged at query time.

    A query (s, a) averages the ``k_q`` nearest reference states that were
    evaluated with the same action ``a``.
    """

    ref_states: np.ndarray
    ref_actions: np.ndarray
    ref_returns: np.ndarray
    k_q: int
    rollouts_per_pair: int

    @classmethod
    def fit(cls, env, expert: Policy, states, actions, rollouts_per_pair: int = 8, k_q: int = 5, seed: int = 0):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        returns = mc_q_batch(env, expert, states, actions, rollouts_per_pair, seed)
        return cls(states, actions, returns, int(k_q), int(rollouts_per_pair))

    def predict(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).reshape(len(actions), -1)
        actions = np.asarray(actions, dtype=np.int64)
        out = np.zeros(len(states))
        for a in np.unique(actions):
            q_rows = actions == a
            ref = self.ref_actions == a
            if not ref.any():
                # no reference evaluated this action: fall back to all references
                ref = np.ones_like(ref)
            k = min(self.k_q, int(ref.sum()))
            _, nn = cKDTree(self.ref_states[ref]).query(states[q_rows], k=k)
            vals = self.ref_returns[ref][np.asarray(nn).reshape(q_rows.sum(), k)]
            out[q_rows] = vals.mean(axis=1)
        return out


# ---------------------------------------------------------------------------
# density


def unit_ball_volume(d: int) -> float:
    return math.exp(0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0))


@dataclass(frozen=True, eq=False)
class DensityModel:
    mean: np.ndarray
    std: np.ndarray
    k: int
    n: int
    unique_refs: np.ndarray  # normalised distinct reference states
    counts: np.ndarray  # multiplicity of each distinct reference
    tree: cKDTree

    @property
    def dim(self) -> int:
        return len(self.mean)

    def normalize(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64).reshape(-1, self.dim)
        return (s - self.mean) / self.std


def fit_knn_density(states, k: int | None = None) -> DensityModel:
    """Fit a k-NN density model on z-scored states. Default ``k = ceil(sqrt(n))``."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k is None:
        k = max(1, math.ceil(math.sqrt(n)))
    if k < 1 or n < k:
        raise TooFewPointsError(f"need at least k={k} points, got {n}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    uniq, counts = np.unique(z, axis=0, return_counts=True)
    return DensityModel(mean, std, int(k), n, uniq, counts, cKDTree(uniq))


def kth_neighbor_distance(model: DensityModel, states):
    """Distance to the k-th nearest reference point (duplicates counted) and the
    multiplicity of the query among the references."""
    z = model.normalize(states)
    zq, inv = np.unique(z, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    kk = min(model.k, len(model.unique_refs))
    dist, nn = model.tree.query(zq, k=kk)
    dist = np.asarray(dist).reshape(len(zq), kk)
    nn = np.asarray(nn).reshape(len(zq), kk)
    # each distinct neighbour contributes its multiplicity; the k nearest
    # distinct neighbours always hold at least k reference points
    cum = np.cumsum(model.counts[nn], axis=1)
    pos = np.argmax(cum >= model.k, axis=1)
    r_k = dist[np.arange(len(zq)), pos]
    mult = np.where(dist[:, 0] == 0.0, model.counts[nn[:, 0]], 0)
    return r_k[inv], mult[inv]


def density_scores(model: DensityModel, states) -> np.ndarray:
    """k / (n * V_d * r_k^d); exact duplicates (r_k = 0) score
    ``DUPLICATE_SENTINEL * multiplicity / n``, above every finite score."""
    r_k, mult = kth_neighbor_distance(model, states)
    d = model.dim
    out = np.empty(len(r_k))
    zero = r_k == 0.0
    with np.errstate(divide="ignore"):
        log_score = (
            math.log(model.k) - math.log(model.n) - math.log(unit_ball_volume(d)) - d * np.log(r_k[~zero])
        )
    out[~zero] = np.exp(np.minimum(log_score, math.log(DENSITY_CAP)))
    out[zero] = DUPLICATE_SENTINEL * mult[zero] / model.n
    return out


def density_score(model: DensityModel, s) -> float:
    return float(density_scores(model, np.asarray(s)[None])[0])


# ---------------------------------------------------------------------------
# dataset-level helpers


def estimate_columns(env, bc, expert: Policy, q_source=None, k: int | None = None,
                     rollouts_per_pair: int = 8, k_q: int = 5, n_ref: int = 2000, seed: int = 0):
    """q(s, expert(s)) and density for every pair of ``bc``.

    Tabular environments read q from ``q_source`` (a QTable); continuous ones
    fit a McQEstimator on ``n_ref`` evenly spaced dataset pairs.
    """
    states = np.asarray(bc.states, dtype=np.float64)
    acts = np.asarray(bc.expert_actions, dtype=np.int64)
    if len(bc) == 0:
        return np.zeros(0), np.zeros(0)
    if isinstance(q_source, QTable):
        q = q_source(states, acts)
    else:
        ref = np.unique(np.linspace(0, len(bc) - 1, min(n_ref, len(bc))).astype(np.int64))
        est = McQEstimator.fit(env, expert, states[ref], acts[ref], rollouts_per_pair, k_q, seed)
        q = est.predict(states, acts)
    model = fit_knn_density(states, k)
    return q, density_scores(model, states)
