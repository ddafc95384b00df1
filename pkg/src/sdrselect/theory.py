"""Exact numerical checks of the distribution-shift bounds behind SDR.

All expectations are computed from exact stepwise state distributions of
tabular MDPs; policies are (S, A) row-stochastic arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import MdpSpec
from .errors import SDRError
from .seeding import derive_seed

BOUND_TOL = 1e-12


class SupportError(SDRError, ValueError):
    pass


def tv_distance(p, q, axis: int = -1):
    """Total variation: half the L1 distance. Works row-wise along ``axis``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportError(f"support mismatch: {p.shape} vs {q.shape}")
    return 0.5 * np.abs(p - q).sum(axis=axis)


def chi_square_c(d, d_prime) -> float:
    """E_{d'}[(d/d')^2] = chi^2(d || d') + 1."""
    d = np.asarray(d, dtype=np.float64)
    dp = np.asarray(d_prime, dtype=np.float64)
    if d.shape != dp.shape:
        raise SupportError("support mismatch")
    if np.any((d > 0) & (dp <= 0)):
        raise SupportError("d is not absolutely continuous w.r.t. d'")
    on = dp > 0
    return float(np.sum(d[on] ** 2 / dp[on]))


def kl_rows(p, q) -> np.ndarray:
    """Per-row KL(p || q); +inf where p puts mass outside the support of q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = np.zeros(p.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    return out


def policy_transition(mdp: MdpSpec, pi) -> np.ndarray:
    """State-to-state kernel under policy ``pi``: M[s, s'] = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("sa,sax->sx", np.asarray(pi, dtype=np.float64), mdp.P)


def stepwise_state_dists(mdp: MdpSpec, pi):
    """Exact d^t for t = 0..T-1 (shape (T, S)) and their average."""
    M = policy_transition(mdp, pi)
    T = mdp.horizon
    dists = np.zeros((T, mdp.n_states))
    d = mdp.d0.copy()
    for t in range(T):
        dists[t] = d
        d = d @ M
    return dists, dists.mean(axis=0)


def exact_return(mdp: MdpSpec, pi) -> float:
    dists, _ = stepwise_state_dists(mdp, pi)
    r_pi = (np.asarray(pi) * mdp.R).sum(axis=1)
    return float((dists @ r_pi).sum())


@dataclass(frozen=True)
class BoundCheckReport:
    check: str
    lhs: float
    rhs: float
    holds: bool
    margin: float
    instance: dict = field(default_factory=dict)


def _report(name, lhs, rhs, instance=None) -> BoundCheckReport:
    lhs, rhs = float(lhs), float(rhs)
    return BoundCheckReport(name, lhs, rhs, bool(lhs <= rhs + BOUND_TOL), rhs - lhs, dict(instance or {}))


def check_shift_bound(mdp: MdpSpec, pi, pi_star, pi_beta, metric: str = "tv", instance=None) -> BoundCheckReport:
    """|E_{d_beta}[D(pi, pi*)] - E_{d_*}[D(pi, pi*)]| <= 2 TV(d_beta, d_*) sup_s D(pi, pi*).

    ``metric="tv"`` checks the bound as stated; ``metric="kl"`` puts
    KL(pi || pi*) in place of D, which is what the proof manipulates.
    """
    _, d_beta = stepwise_state_dists(mdp, pi_beta)
    _, d_star = stepwise_state_dists(mdp, pi_star)
    if metric == "tv":
        per_state = tv_distance(pi, pi_star, axis=1)
    elif metric == "kl":
        per_state = kl_rows(pi, pi_star)
        if not np.all(np.isfinite(per_state)):
            raise SupportError("KL variant needs pi* to cover the support of pi in every state")
    else:
        raise ValueError(f"unknown metric {metric!r}")
    lhs = abs(d_beta @ per_state - d_star @ per_state)
    rhs = 2.0 * tv_distance(d_beta, d_star) * per_state.max()
    return _report(f"shift-bound-{metric}", lhs, rhs, instance)


def stepwise_errors(mdp: MdpSpec, pi, pi_star) -> np.ndarray:
    """eps_t = E_{s ~ d_*^t}[TV(pi(.|s), pi*(.|s))] for t = 0..T-1."""
    dists, _ = stepwise_state_dists(mdp, pi_star)
    return dists @ tv_distance(pi, pi_star, axis=1)


def check_performance_gap(mdp: MdpSpec, pi, pi_star, instance=None) -> BoundCheckReport:
    """|J(pi) - J(pi*)| <= sum_t (T - t) eps_t.

    The bound is exact for rewards in an interval of length 1 (e.g. [0, 1]);
    with rewards spread over [-1, 1] it can fail by up to a factor of 2.
    """
    T = mdp.horizon
    lhs = abs(exact_return(mdp, pi) - exact_return(mdp, pi_star))
    rhs = float(np.dot(T - np.arange(T), stepwise_errors(mdp, pi, pi_star)))
    return _report("performance-gap", lhs, rhs, instance)


# ---------------------------------------------------------------------------
# random instances


def random_policy(rng, S: int, A: int, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(A, concentration), size=S)


def deterministic_policy(actions, A: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((len(actions), A))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def random_mdp(rng, max_states: int = 20, max_actions: int = 5, max_horizon: int = 10,
               reward_low: float = 0.0) -> MdpSpec:
    """Random tabular MDP with sparse-ish Dirichlet transitions.

    Rewards are uniform on [reward_low, 1].
    """
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    T = int(rng.integers(1, max_horizon + 1))
    conc = float(rng.choice([0.1, 0.5, 1.0]))
    P = rng.dirichlet(np.full(S, conc), size=(S, A))
    P /= P.sum(axis=-1, keepdims=True)
    R = rng.uniform(reward_low, 1.0, size=(S, A))
    d0 = rng.dirichlet(np.full(S, conc))
    return MdpSpec(P=P, R=R, horizon=T, d0=d0 / d0.sum())


def optimal_stationary_policy(mdp: MdpSpec) -> np.ndarray:
    from .estimators import backward_induction

    q0 = backward_induction(mdp)[0]
    return deterministic_policy(np.argmax(q0, axis=1), mdp.n_actions)


def random_instance(seed: int, max_states: int = 20, max_actions: int = 5, max_horizon: int = 10,
                    optimal_expert: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, max_states, max_actions, max_horizon)
    S, A = mdp.n_states, mdp.n_actions
    if optimal_expert:
        pi_star = optimal_stationary_policy(mdp)
    else:
        pi_star = deterministic_policy(rng.integers(0, A, size=S), A)
    # learner: a mixture of expert and noise, sometimes very close to the expert
    eta = float(rng.choice([1e-3, 0.05, 0.3, 1.0]))
    pi = (1.0 - eta) * pi_star + eta * random_policy(rng, S, A)
    pi_beta = random_policy(rng, S, A, concentration=float(rng.choice([0.2, 1.0, 5.0])))
    return {"mdp": mdp, "pi": pi, "pi_star": pi_star, "pi_beta": pi_beta, "seed": int(seed)}


@dataclass
class FuzzSummary:
    check: str
    count: int = 0
    failures: list = field(default_factory=list)  # reproduction seeds
    worst_margin: float | None = None

    @property
    def passed(self) -> bool:
        return not self.failures

    def add(self, report: BoundCheckReport, seed: int) -> None:
        self.count += 1
        if not report.holds:
            self.failures.append(int(seed))
        if self.worst_margin is None or report.margin < self.worst_margin:
            self.worst_margin = report.margin

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def fuzz_shift_bound(n: int, seed: int, metric: str = "tv", **kw) -> FuzzSummary:
    summary = FuzzSummary(f"shift-bound-{metric}")
    for i in range(n):
        s = derive_seed(seed, "shift-bound", i)
        inst = random_instance(s, **kw)
        pi_star = inst["pi_star"]
        if metric == "kl":
            # KL needs a full-support reference policy
            pi_star = 0.9 * pi_star + 0.1 / pi_star.shape[1]
        summary.add(check_shift_bound(inst["mdp"], inst["pi"], pi_star, inst["pi_beta"], metric), s)
    return summary


def fuzz_performance_gap(n: int, seed: int, **kw) -> FuzzSummary:
    summary = FuzzSummary("performance-gap")
    for i in range(n):
        s = derive_seed(seed, "performance-gap", i)
        inst = random_instance(s, optimal_expert=True, **kw)
        summary.add(check_performance_gap(inst["mdp"], inst["pi"], inst["pi_star"]), s)
    return summary


# ---------------------------------------------------------------------------
# generalization bound coverage


@dataclass(frozen=True)
class CoverageConfig:
    m: int = 100
    delta: float = 0.05
    repetitions: int = 10_000
    support: int = 20
    w_max: float = 4.0
    zero_error: bool = False
    seed: int = 0


def importance_pair(rng, support: int, w_max: float):
    """(d, d') on a finite support with max_s d(s)/d'(s) <= w_max."""
    dp = rng.dirichlet(np.ones(support))
    raw = rng.dirichlet(np.ones(support))
    ratio = raw / dp
    top = ratio.max()
    theta = 1.0 if top <= w_max else max(0.0, (w_max - 1.0) / (top - 1.0))
    d = dp + theta * (raw - dp)
    return d / d.sum(), dp


def coverage_frequency(cfg: CoverageConfig) -> float:
    """Fraction of repetitions where eps > eps_hat + sqrt(sum w_i^2 log(2/delta)) / m.

    Samples s_1..s_m ~ d' i.i.d.; the per-state error f(s) in [0, 1] is a
    fixed random function (or zero); eps = E_d[f] exactly.
    """
    if cfg.m < 1 or not 0.0 < cfg.delta < 1.0:
        raise ValueError("need m >= 1 and delta in (0, 1)")
    rng = np.random.default_rng(cfg.seed)
    d, dp = importance_pair(rng, cfg.support, cfg.w_max)
    f = np.zeros(cfg.support) if cfg.zero_error else rng.uniform(0.0, 1.0, cfg.support)
    w = d / dp
    eps = float(d @ f)
    log_term = math.log(2.0 / cfg.delta)
    cum = np.cumsum(dp)
    cum[-1] = 1.0
    violations = 0
    chunk = max(1, 2_000_000 // cfg.m)
    for lo in range(0, cfg.repetitions, chunk):
        reps = min(chunk, cfg.repetitions - lo)
        idx = np.searchsorted(cum, rng.random((reps, cfg.m)), side="right")
        wi = w[idx]
        eps_hat = (wi * f[idx]).mean(axis=1)
        bound = eps_hat + np.sqrt((wi ** 2).sum(axis=1) * log_term) / cfg.m
        violations += int(np.sum(eps > bound))
    return violations / cfg.repetitions


def coverage_limit(delta: float, repetitions: int) -> float:
    """delta plus five binomial standard errors."""
    return delta + 5.0 * math.sqrt(delta * (1.0 - delta) / repetitions)


# ---------------------------------------------------------------------------
# per-step budget allocation


@dataclass(frozen=True)
class AllocationProblem:
    C: tuple  # C_t >= 1 for t = 0..T-1
    N: float

    def __post_init__(self):
        if len(self.C) < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.C) < 1.0:
            raise ValueError("C_t = chi^2 + 1 is at least 1")
        if self.N <= 0:
            raise ValueError("budget must be positive")

    @property
    def horizon(self) -> int:
        return len(self.C)

    def coefficients(self) -> np.ndarray:
        T = self.horizon
        return (T - np.arange(T)) * np.sqrt(np.asarray(self.C, dtype=np.float64))


def allocation_objective(prob: AllocationProblem, n) -> np.ndarray:
    """sum_t (T - t) sqrt(C_t / n_t); vectorised over leading axes of ``n``."""
    n = np.asarray(n, dtype=np.float64)
    return (prob.coefficients() / np.sqrt(n)).sum(axis=-1)


def optimal_allocation(prob: AllocationProblem) -> np.ndarray:
    """n_t = N w_t / sum w with w_t = ((T - t)^2 C_t)^(1/3)."""
    T = prob.horizon
    w = np.cbrt((T - np.arange(T)) ** 2 * np.asarray(prob.C, dtype=np.float64))
    return prob.N * w / w.sum()


def _project_capped_simplex(v: np.ndarray, total: float, lower: float) -> np.ndarray:
    """Euclidean projection onto {x >= lower, sum x = total}."""
    u = v - lower
    s = total - lower * len(v)
    srt = np.sort(u)[::-1]
    css = np.cumsum(srt) - s
    k = np.arange(1, len(u) + 1)
    rho = np.flatnonzero(srt - css / k > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(u - tau, 0.0) + lower


def projected_gradient_allocation(prob: AllocationProblem, iters: int = 20_000, tol: float = 1e-15) -> np.ndarray:
    """Numerical minimiser of the allocation objective (projected gradient, Armijo steps)."""
    T = prob.horizon
    a = prob.coefficients()
    lower = prob.N * 1e-9
    n = np.full(T, prob.N / T)
    f = allocation_objective(prob, n)
    step = prob.N
    for _ in range(iters):
        g = -0.5 * a * n ** -1.5
        while True:
            cand = _project_capped_simplex(n - step * g, prob.N, lower)
            fc = allocation_objective(prob, cand)
            if fc <= f - 1e-4 * g @ (n - cand) or step < 1e-30:
                break
            step *= 0.5
        done = f - fc <= tol * f
        n, f = cand, fc
        if done:
            break
        step *= 2.0
    return n


def round_allocation(n, total: int) -> np.ndarray:
    """Largest-remainder rounding to integers summing to ``total``."""
    n = np.asarray(n, dtype=np.float64)
    scaled = n * total / n.sum()
    base = np.floor(scaled).astype(np.int64)
    short = int(total - base.sum())
    order = np.lexsort((np.arange(len(n)), -(scaled - base)))
    base[order[:short]] += 1
    return base
