"""Exact inner minimisation over the average-KL ball, and its dual.

Everything is computed on enumerated trajectory distributions. The primal route
finds the Gibbs tilt whose average KL equals the radius by bisection on
log lambda; the dual route maximises the concave one-dimensional dual by grid
search followed by golden-section refinement. The two never share a solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .env import PromptDist, RewardModel, TabularPolicy, TableReward, VocabSpec, trajectory_set
from .errors import BisectionNotConverged

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DualInstance:
    policy: TabularPolicy
    reward: RewardModel
    prompt_dist: PromptDist
    rho: float

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"radius must be >= 0, got {self.rho}")
        self.policy.vocab.check_enumerable()

    @property
    def log_pi(self) -> np.ndarray:
        return self.policy.trajectory_log_probs

    @property
    def rewards(self) -> np.ndarray:
        return self.reward.cached_table(self.policy.vocab, self.policy.n_contexts)

    @property
    def p(self) -> np.ndarray:
        return self.prompt_dist.probs


@dataclass
class WorstCaseResult:
    q: np.ndarray  # (C, K)
    lambda_star: float  # inf when rho == 0, 0.0 for the lambda -> 0+ limit
    primal_value: float
    kl_attained: float
    at_zero_limit: bool = False


# ---------------------------------------------------------------------------
# helpers on (log_pi, r) tables


def entropic_risk_rows(log_pi: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    """-lam log E_pi e^{-r/lam} per context."""
    pi = np.exp(log_pi)
    if math.isinf(lam):
        return (pi * r).sum(axis=-1)
    support = pi > 0
    m = np.where(support, r, np.inf).min(axis=-1, keepdims=True)
    x = np.where(support, -(r - m) / lam, 0.0)
    # when r/lam varies little, log1p/expm1 keeps the error O(eps |r|) instead of O(eps lam)
    near = -lam * np.log1p((pi * np.expm1(x)).sum(axis=-1))
    far = -lam * logsumexp(np.where(support, log_pi + x, -np.inf), axis=-1)
    return np.where(np.abs(x).max(axis=-1) < 0.5, near, far) + m[..., 0]


def _tilt(log_pi, r, lam):
    if math.isinf(lam):
        return log_pi.copy()
    a = log_pi - r / lam
    return a - logsumexp(a, axis=-1, keepdims=True)


def _zero_limit(log_pi, r):
    """pi restricted to each context's argmin-reward set (support of pi only)."""
    support = np.isfinite(log_pi)
    rmin = np.where(support, r, np.inf).min(axis=-1, keepdims=True)
    in_set = support & (r <= rmin)
    a = np.where(in_set, log_pi, -np.inf)
    return a - logsumexp(a, axis=-1, keepdims=True)


def _avg_kl(log_q, log_pi, p):
    q = np.exp(log_q)
    diff = np.where(q > 0, log_q - log_pi, 0.0)
    per = (q * diff).sum(axis=-1)
    return float(p @ per)


# ---------------------------------------------------------------------------
# public API


def gibbs_tilt(instance: DualInstance, lam: float) -> np.ndarray:
    """Q(y|x) proportional to pi(y|x) exp(-r(x,y)/lam); lam = inf returns pi."""
    if not lam > 0:
        raise ValueError("lambda must be > 0 (use gibbs_zero_limit for 0+)")
    return np.exp(_tilt(instance.log_pi, instance.rewards, lam))


def gibbs_zero_limit(instance: DualInstance) -> np.ndarray:
    return np.exp(_zero_limit(instance.log_pi, instance.rewards))


def tilt_kl(instance: DualInstance, lam: float) -> float:
    return _avg_kl(_tilt(instance.log_pi, instance.rewards, lam), instance.log_pi, instance.p)


def worst_case_q(instance: DualInstance, tol: float = 1e-10, max_iter: int = 200) -> WorstCaseResult:
    log_pi, r, p, rho = instance.log_pi, instance.rewards, instance.p, instance.rho
    pi = np.exp(log_pi)
    if rho == 0:
        return WorstCaseResult(pi, math.inf, float(p @ (pi * r).sum(axis=-1)), 0.0)
    log_q0 = _zero_limit(log_pi, r)
    kl0 = _avg_kl(log_q0, log_pi, p)
    if rho >= kl0:
        q0 = np.exp(log_q0)
        return WorstCaseResult(q0, 0.0, float(p @ (q0 * r).sum(axis=-1)), kl0, True)

    def resid(log_lam):
        return _avg_kl(_tilt(log_pi, r, math.exp(log_lam)), log_pi, p) - rho

    lo, hi = math.log(1e-8), math.log(1e8)
    while resid(lo) < 0 and lo > -700:
        lo -= math.log(1e4)
    while resid(hi) > 0 and hi < 700:
        hi += math.log(1e4)
    f_lo, f_hi = resid(lo), resid(hi)
    if f_lo < 0 or f_hi > 0:
        raise BisectionNotConverged("could not bracket the KL root", min(abs(f_lo), abs(f_hi)))
    mid, f_mid = lo, f_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = resid(mid)
        if abs(f_mid) < tol * 1e-2 or hi - lo < 1e-15:
            break
        if f_mid > 0:
            lo = mid
        else:
            hi = mid
    if abs(f_mid) >= tol:
        raise BisectionNotConverged(f"KL residual {abs(f_mid):.3g} after bisection", abs(f_mid))
    lam = math.exp(mid)
    log_q = _tilt(log_pi, r, lam)
    q = np.exp(log_q)
    return WorstCaseResult(q, lam, float(p @ (q * r).sum(axis=-1)), _avg_kl(log_q, log_pi, p))


def dual_objective(instance: DualInstance, lam: float) -> float:
    """-E_x[lam log Z(x)] - lam rho, with the lam -> 0+ and lam = inf limits."""
    log_pi, r, p, rho = instance.log_pi, instance.rewards, instance.p, instance.rho
    if lam == 0:
        support = np.isfinite(log_pi)
        return float(p @ np.where(support, r, np.inf).min(axis=-1))
    if math.isinf(lam):
        return float(p @ entropic_risk_rows(log_pi, r, lam)) if rho == 0 else -math.inf
    return float(p @ entropic_risk_rows(log_pi, r, lam)) - lam * rho


def dual_value(instance: DualInstance, rel_tol: float = 1e-8):
    """Maximise the dual over lambda >= 0; returns (value, lambda_star)."""
    g = lambda log_lam: dual_objective(instance, math.exp(log_lam))  # noqa: E731
    lo_dec, hi_dec = -4, 4
    while True:
        grid = np.linspace(lo_dec, hi_dec, 8 * (hi_dec - lo_dec) + 1) * math.log(10)
        vals = np.array([g(x) for x in grid])
        k = int(np.argmax(vals))
        # the dual is concave, so a boundary maximiser means the optimum lies beyond
        if k == 0 and lo_dec > -16:
            lo_dec -= 4
            continue
        if k == len(grid) - 1 and hi_dec < 16:
            hi_dec += 4
            continue
        break
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, len(grid) - 1)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    gc, gd = g(c), g(d)
    while b - a > rel_tol:  # width in log lambda is |d lambda| / lambda
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - GOLDEN * (b - a)
            gc = g(c)
        else:
            a, c, gc = c, d, gd
            d = a + GOLDEN * (b - a)
            gd = g(d)
    x = 0.5 * (a + b)
    best_lam, best = math.exp(x), g(x)
    for cand in (0.0, math.inf):
        v = dual_objective(instance, cand)
        if v > best:
            best_lam, best = cand, v
    return best, best_lam


def duality_gap(instance: DualInstance) -> float:
    primal = worst_case_q(instance).primal_value
    dual, _ = dual_value(instance)
    return abs(primal - dual)


def entropic_risk_exact(policy: TabularPolicy, reward: RewardModel, lam: float,
                        prompt_dist: PromptDist) -> float:
    """E_x[-lam log E_{y~pi} e^{-r/lam}]; lam = inf gives E[r]."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    r = reward.cached_table(policy.vocab, policy.n_contexts)
    return float(prompt_dist.probs @ entropic_risk_rows(policy.trajectory_log_probs, r, lam))


def mean_variance_report(policy: TabularPolicy, reward: RewardModel, lam: float,
                         prompt_dist: PromptDist):
    """(exact entropic risk, E[r] - Var(r)/(2 lam), absolute difference).

    The variance is the within-context one, averaged over prompts, which is what
    the per-context Taylor expansion produces.
    """
    if lam < 1:
        raise ValueError("the mean-variance approximation is only checked for lambda >= 1")
    r = reward.cached_table(policy.vocab, policy.n_contexts)
    pi = policy.trajectory_probs
    mean = (pi * r).sum(axis=-1)
    var = (pi * (r - mean[:, None]) ** 2).sum(axis=-1)
    p = prompt_dist.probs
    exact = entropic_risk_exact(policy, reward, lam, prompt_dist)
    approx = float(p @ (mean - var / (2 * lam)))
    return exact, approx, abs(exact - approx)


def mean_variance_slope(policy, reward, prompt_dist, lams=(1.0, 10.0, 100.0, 1000.0)) -> float:
    errs = np.array([mean_variance_report(policy, reward, lam, prompt_dist)[2] for lam in lams])
    return float(np.polyfit(np.log(lams), np.log(errs), 1)[0])


VERIFICATION_VOCABS = (
    VocabSpec(2, 0, 1), VocabSpec(3, 0, 2), VocabSpec(4, 0, 2), VocabSpec(3, 0, 3),
    VocabSpec(4, 0, 3), VocabSpec(2, 0, 5), VocabSpec(8, 0, 2), VocabSpec(5, 0, 2),
)


def random_instance(seed: int, rho: float | None = None) -> DualInstance:
    """Random instance with C <= 4 contexts and <= 64 trajectories per context."""
    rng = np.random.default_rng([int(seed), 17])
    vocab = VERIFICATION_VOCABS[rng.integers(len(VERIFICATION_VOCABS))]
    C = int(rng.integers(1, 5))
    K = len(trajectory_set(vocab))
    policy = TabularPolicy(1.5 * rng.standard_normal((C, vocab.max_len, vocab.n_prev, vocab.vocab_size)), vocab)
    reward = TableReward(rng.random((C, K)))
    prompt = PromptDist(rng.dirichlet(np.ones(C)))
    if rho is None:
        rho = float(10 ** rng.uniform(-3, 0))
    return DualInstance(policy, reward, prompt, rho)
