"""Stepwise dual ranking: quantile schedule, candidate pool, two-stage sampling.

Per timestep t (1-based in the schedule) the pool keeps the pairs whose
action value is at least the alpha_t-quantile of that step's action values
and whose density is at most the (1 - alpha_t)-quantile of that step's
densities. The final subset is a uniform draw from the pool.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import partition_by_timestep, random_order
from .errors import BudgetError, MissingColumnError

RATIO_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantileSchedule:
    """alpha_t = lam * tanh(t / scale), or the constant lam when ``constant``."""

    lam: float = 0.2
    scale: float = 100.0
    constant: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def __call__(self, t: int) -> float:
        return schedule_eval(self, t)


def schedule_eval(sched: QuantileSchedule, t: int) -> float:
    if t < 1:
        raise ValueError("schedule step is 1-based")
    alpha = sched.lam if sched.constant else sched.lam * math.tanh(t / sched.scale)
    return min(1.0, max(0.0, alpha))


def nearest_rank(alpha: float, n: int) -> int:
    """1-based rank ceil(alpha * n), clamped to [1, n]."""
    # tolerance keeps e.g. 0.2 * 5 = 1.0000000000000002 at rank 1
    return min(n, max(1, math.ceil(alpha * n - 1e-9)))


def nearest_rank_quantile(values, alpha: float) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty list")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    v = np.sort(v)
    if alpha == 0.0:
        return float(v[0])
    return float(v[nearest_rank(alpha, v.size) - 1])


@dataclass(frozen=True)
class StepThreshold:
    t: int  # 0-based timestep
    alpha: float
    q_threshold: float | None
    d_threshold: float | None
    n_step: int
    n_pass: int


@dataclass(frozen=True, eq=False)
class CandidatePool:
    indices: np.ndarray  # sorted ascending
    thresholds: list

    def __len__(self) -> int:
        return len(self.indices)


def _check_columns(n, **cols):
    for name, col in cols.items():
        if col is None:
            raise MissingColumnError(name)
        if len(col) != n:
            raise ValueError(f"{name} has length {len(col)}, dataset has {n}")


def build_candidate_pool(bc, qvals, dvals, sched: QuantileSchedule, use_density: bool = True,
                         score=None) -> CandidatePool:
    """Run the stepwise threshold tests and collect passing indices.

    ``use_density=False`` drops the density test (q-only stepwise clip).
    ``score`` replaces q by an arbitrary ranking score with density unused.
    """
    n = len(bc)
    q = np.asarray(qvals if score is None else score, dtype=np.float64)
    _check_columns(n, qvals=q)
    if use_density and score is None:
        d = np.asarray(dvals, dtype=np.float64) if dvals is not None else None
        _check_columns(n, dvals=d)
    else:
        d = None
    part = partition_by_timestep(bc)
    keep, records = [], []
    for t, idx in enumerate(part.steps):
        alpha = schedule_eval(sched, t + 1)
        if len(idx) == 0:
            records.append(StepThreshold(t, alpha, None, None, 0, 0))
            continue
        q_t = nearest_rank_quantile(q[idx], alpha)
        ok = q[idx] >= q_t
        d_t = None
        if d is not None:
            d_t = nearest_rank_quantile(d[idx], 1.0 - alpha)
            ok &= d[idx] <= d_t
        keep.append(idx[ok])
        records.append(StepThreshold(t, alpha, q_t, d_t, len(idx), int(ok.sum())))
    pool = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return CandidatePool(pool.astype(np.int64), records)


@dataclass(eq=False)
class SelectionResult:
    method: str
    budget: int
    indices: np.ndarray
    seed: int
    lam: float | None = None
    pool_size: int | None = None
    thresholds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self, **extra) -> str:
        obj = {
            "method": self.method,
            "budget": int(self.budget),
            "seed": int(self.seed),
            "lambda": self.lam,
            "pool_size": self.pool_size,
            "indices": [int(i) for i in self.indices],
            "per_step_thresholds": [asdict(t) for t in self.thresholds],
            "warnings": list(self.warnings),
        }
        obj.update(extra)
        return json.dumps(obj, sort_keys=True, indent=1)


def sample_from_pool(pool: np.ndarray, n_total: int, N: int, seed: int):
    """Uniform draw of N indices from ``pool``; tops up from the complement.

    Both stages read the shared seeded permutation of all indices, so with a
    full pool the result equals ``subsample_random``.
    """
    if N < 0 or N > n_total:
        raise BudgetError(f"budget {N} exceeds dataset size {n_total}")
    order = random_order(n_total, seed)
    member = np.zeros(n_total, dtype=bool)
    member[pool] = True
    in_pool = order[member[order]]
    if len(in_pool) >= N:
        return in_pool[:N], []
    rest = order[~member[order]][: N - len(in_pool)]
    msg = f"candidate pool has {len(in_pool)} < budget {N}; filled {len(rest)} from outside the pool"
    warnings.warn(msg, stacklevel=3)
    return np.concatenate([in_pool, rest]), [msg]


def sdr_select(bc, qvals, dvals, sched: QuantileSchedule, N: int, seed: int, method: str = "sdr",
               use_density: bool = True, score=None) -> SelectionResult:
    if N < 0 or N > len(bc):
        raise BudgetError(f"budget {N} exceeds dataset size {len(bc)}")
    pool = build_candidate_pool(bc, qvals, dvals, sched, use_density=use_density, score=score)
    chosen, notes = sample_from_pool(pool.indices, len(bc), N, seed)
    return SelectionResult(method, N, chosen, seed, sched.lam, len(pool), pool.thresholds, notes)


def _top(values, N: int) -> np.ndarray:
    # descending by value, ties by ascending index
    order = np.lexsort((np.arange(len(values)), -np.asarray(values, dtype=np.float64)))
    return order[:N].astype(np.int64)


METHODS = ("random", "sdr", "top-reward", "top-q", "ratio-rank", "stepclip-only", "dualrank-only", "stepclip-ratio")


def select(bc, method: str, N: int, seed: int, qvals=None, dvals=None, lam: float = 0.2,
           scale: float = 100.0) -> SelectionResult:
    """Dispatch to SDR or one of the baselines / ablations."""
    n = len(bc)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if N < 0 or N > n:
        raise BudgetError(f"budget {N} exceeds dataset size {n}")
    sched = QuantileSchedule(lam, scale)
    if method == "random":
        return SelectionResult(method, N, random_order(n, seed)[:N], seed)
    if method == "top-reward":
        return SelectionResult(method, N, _top(bc.rewards, N), seed)
    if method == "top-q":
        _check_columns(n, qvals=qvals)
        return SelectionResult(method, N, _top(qvals, N), seed)
    if method == "ratio-rank":
        _check_columns(n, qvals=qvals, dvals=dvals)
        return SelectionResult(method, N, _top(ratio_score(qvals, dvals), N), seed, lam)
    if method == "sdr":
        return sdr_select(bc, qvals, dvals, sched, N, seed)
    if method == "stepclip-only":
        return sdr_select(bc, qvals, dvals, sched, N, seed, method, use_density=False)
    if method == "dualrank-only":
        return sdr_select(bc, qvals, dvals, QuantileSchedule(lam, scale, constant=True), N, seed, method)
    # stepclip-ratio: stepwise clip on the single q/d ratio ranking
    _check_columns(n, qvals=qvals, dvals=dvals)
    return sdr_select(bc, qvals, dvals, sched, N, seed, method, score=ratio_score(qvals, dvals))


def ratio_score(qvals, dvals) -> np.ndarray:
    d = np.maximum(np.asarray(dvals, dtype=np.float64), RATIO_FLOOR)
    return np.asarray(qvals, dtype=np.float64) / d
