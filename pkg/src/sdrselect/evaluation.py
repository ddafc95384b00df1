"""Policy evaluation, normalized return, saturation curves and P@k."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import episode_returns
from .errors import SDRError
from .seeding import derive_seed


class DegenerateReferenceError(SDRError, ValueError):
    pass


class DegenerateCurveError(SDRError, ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    n_episodes: int
    seed: int
    normalized: float | None = None


def evaluate_policy(env, policy, n_episodes: int, seed: int, references=None) -> EvalResult:
    """Mean and (population) std of returns over seeded episodes.

    Episode i uses seed ``derive_seed(seed, "episode", i)``. ``references`` is
    an optional ``(random_ret, expert_ret)`` pair used to fill ``normalized``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rets = episode_returns(env, policy, [derive_seed(seed, "episode", i) for i in range(n_episodes)])
    mean = float(rets.mean())
    norm = normalized_return(mean, *references) if references is not None else None
    return EvalResult(mean, float(rets.std()), n_episodes, int(seed), norm)


def normalized_return(ret: float, random_ret: float, expert_ret: float) -> float:
    """100 * (ret - random_ret) / (expert_ret - random_ret)."""
    if expert_ret == random_ret:
        raise DegenerateReferenceError("expert and random reference returns coincide")
    return 100.0 * (ret - random_ret) / (expert_ret - random_ret)


@dataclass(eq=False)
class SaturationCurve:
    sizes: np.ndarray
    fractions: np.ndarray
    means: np.ndarray  # mean normalized return per size
    stds: np.ndarray
    trials: int
    reference: float  # normalized return of the policy trained on everything
    rows: list = field(default_factory=list)  # (size, fraction, trial, return, normalized)

    def __post_init__(self):
        if len(self.sizes) and np.any(np.diff(self.sizes) <= 0):
            raise ValueError("curve sizes must be strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def log_spaced_sizes(n_total: int, n_points: int, smallest: int = 8) -> list[int]:
    """Distinct integer sizes, geometrically spaced from ``smallest`` to ``n_total``."""
    smallest = max(1, min(smallest, n_total))
    raw = np.geomspace(smallest, n_total, n_points)
    return sorted({int(round(v)) for v in raw} | {n_total})


def aggregate_curve(sizes, n_total: int, trials: int, rows, reference: float) -> SaturationCurve:
    sizes = np.asarray(sorted(sizes), dtype=np.int64)
    by_size = {int(s): [] for s in sizes}
    for size, _, _, _, norm in rows:
        by_size[int(size)].append(norm)
    means = np.array([np.mean(by_size[int(s)]) for s in sizes])
    stds = np.array([np.std(by_size[int(s)]) for s in sizes])
    return SaturationCurve(sizes, sizes / n_total, means, stds, trials, float(reference), list(rows))


def p_at_k(curve: SaturationCurve, k: float) -> float:
    """Smallest data fraction whose mean reaches k% of the full-data reference.

    Between the last point below the target and the first point at or above
    it, the crossing is interpolated linearly in log-fraction. Returns 1.0 if
    the target is never reached.
    """
    if not 0.0 < k < 100.0:
        raise ValueError("k must lie in (0, 100)")
    if len(curve.sizes) < 1:
        raise DegenerateCurveError("curve has no points")
    if not curve.reference > 0:
        raise DegenerateCurveError("full-dataset reference must be positive")
    target = k / 100.0 * curve.reference
    means, fr = curve.means, curve.fractions
    hit = np.flatnonzero(means >= target)
    if hit.size == 0:
        return 1.0
    i = int(hit[0])
    if i == 0:
        return float(fr[0])
    lo, hi = means[i - 1], means[i]
    w = (target - lo) / (hi - lo)
    return float(math.exp(math.log(fr[i - 1]) + w * (math.log(fr[i]) - math.log(fr[i - 1]))))


def spearman_rho(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def train_and_evaluate(env, bc, indices, cfg, n_episodes: int, eval_seed: int, references) -> EvalResult:
    from .bc import train_policy

    policy = train_policy(env, bc, indices, cfg)
    return evaluate_policy(env, policy, n_episodes, eval_seed, references)


def curve_jobs(n_total: int, sizes, trials: int, seed: int):
    """(size, trial, subset_seed, train_seed, eval_seed) per curve point.

    Training and evaluation seeds depend on the trial only, so the full-size
    trial-0 job follows the same seed path as the full-dataset reference.
    """
    for size in sizes:
        if size < 1 or size > n_total:
            raise ValueError(f"curve size {size} outside [1, {n_total}]")
    return [
        (int(size), t, derive_seed(seed, "subset", int(size), t), derive_seed(seed, "train", t), derive_seed(seed, "eval", t))
        for size in sizes
        for t in range(trials)
    ]


def saturation_curve(env, bc, sizes, trials: int, cfg, seed: int, references,
                     n_episodes: int = 100, runner=None) -> SaturationCurve:
    """Random subsets of each size -> BC -> evaluation, plus the full-data reference.

    ``runner(jobs) -> list[EvalResult]`` may execute the
    ``(indices, train_seed, eval_seed)`` jobs in parallel; the default is serial.
    """
    from dataclasses import replace

    from .dataset import subsample_random

    n = len(bc)
    sizes = sorted(int(s) for s in sizes)
    specs = curve_jobs(n, sizes, trials, seed)
    jobs = [(subsample_random(bc, size, s_sub), s_tr, s_ev) for size, _, s_sub, s_tr, s_ev in specs]
    jobs.append((np.arange(n), derive_seed(seed, "train", 0), derive_seed(seed, "eval", 0)))
    if runner is None:
        def runner(js):
            return [
                train_and_evaluate(env, bc, idx, replace(cfg, seed=s_tr), n_episodes, s_ev, references)
                for idx, s_tr, s_ev in js
            ]
    results = runner(jobs)
    ref = results[-1]
    rows = [(size, size / n, t, r.mean, r.normalized) for (size, t, *_), r in zip(specs, results[:-1])]
    return aggregate_curve(sizes, n, trials, rows, ref.normalized)
