"""Monte Carlo statistics of the on-policy estimators.

On-policy every importance ratio is one, so a group is fully described by which
enumerated trajectories it drew. Groups are therefore sampled as categorical
draws over the enumeration, which has exactly the policy's law and lets 10^5
groups be processed as one array.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .env import PromptDist, RewardModel, TabularPolicy, TableReward, VocabSpec, stream, trajectory_set
from .dual import entropic_risk_rows
from .errors import InsufficientSignal
from .estimators import token_units
from .objectives import onpolicy_frpo_coef, onpolicy_grpo_coef

_BIAS_KEY = 2
_VARIANCE_KEY = 3


def sample_indices(policy: TabularPolicy, x: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Enumeration indices drawn i.i.d. from policy(. | x)."""
    cdf = np.cumsum(policy.trajectory_probs[x])
    idx = np.searchsorted(cdf, rng.random(shape) * cdf[-1], side="right")
    return np.minimum(idx, cdf.size - 1)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


# ---------------------------------------------------------------------------
# bias of -lambda log Z_hat


def neg_lam_log_mean_exp(r: np.ndarray, lam: float, axis=-1) -> np.ndarray:
    """-lam log mean(exp(-r / lam)), shifted by the minimum so constants are exact."""
    if math.isinf(lam):
        return r.mean(axis=axis)
    rmin = r.min(axis=axis, keepdims=True)
    n = r.shape[axis]
    val = logsumexp(-(r - rmin) / lam, axis=axis) - math.log(n)
    return -lam * val + np.squeeze(rmin, axis=axis)


def plain_and_jackknife(r: np.ndarray, lam: float):
    """Per-group plain and jackknifed estimates of -lam log E e^{-r/lam}; r is (n, G).

    Both are translation-equivariant, so they are formed on min-shifted rewards
    and shifted back; a constant group then returns its constant exactly.
    """
    G = r.shape[-1]
    m = r.min(axis=-1, keepdims=True)
    s = r - m
    plain = neg_lam_log_mean_exp(s, lam)
    if math.isinf(lam):
        return plain + m[..., 0], plain + m[..., 0]
    keep = ~np.eye(G, dtype=bool)
    loo = np.stack([neg_lam_log_mean_exp(s[:, keep[j]], lam) for j in range(G)], axis=-1)
    jack = G * plain - (G - 1) / G * loo.sum(axis=-1)
    return plain + m[..., 0], jack + m[..., 0]


@dataclass
class BiasReport:
    lam: float
    G: list
    n_mc: int
    plain_bias: list
    plain_se: list
    jackknife_bias: list
    jackknife_se: list
    plain_slope: float
    jackknife_slope: float
    exact: float

    def signal(self, which: str = "plain") -> np.ndarray:
        b = np.abs(np.asarray(getattr(self, f"{which}_bias")))
        se = np.asarray(getattr(self, f"{which}_se"))
        return b > np.maximum(3 * se, _ROUNDOFF * max(1.0, abs(self.exact)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "G", "n_mc", "plain_bias", "plain_se", "jackknife_bias", "jackknife_se",
                    "plain_slope", "jackknife_slope"])
        for k, G in enumerate(self.G):
            w.writerow([_fmt(self.lam), G, self.n_mc, repr(self.plain_bias[k]), repr(self.plain_se[k]),
                        repr(self.jackknife_bias[k]), repr(self.jackknife_se[k]),
                        repr(self.plain_slope), repr(self.jackknife_slope)])
        return buf.getvalue()


_ROUNDOFF = 1e-12  # biases below this are floating-point noise, not signal


def fit_slope(G, bias, se) -> float:
    """Least-squares slope of log|bias| on log G over cells with |bias| > 3 SE."""
    G, bias, se = (np.asarray(a, dtype=float) for a in (G, bias, se))
    ok = np.abs(bias) > np.maximum(3 * se, _ROUNDOFF)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(G[ok]), np.log(np.abs(bias[ok])), 1)[0])


def bias_sweep(policy: TabularPolicy, reward: RewardModel, lam: float, G_list: Sequence[int],
               n_mc: int, seed: int, prompt_dist: PromptDist | None = None) -> BiasReport:
    """Bias of the plain and jackknifed estimators of the entropic risk, per G.

    The estimators act on raw rewards: -lam log((1/G) sum_i e^{-r_i/lam}) and
    its jackknife. Exact values come from enumeration.
    """
    G_list = [int(g) for g in G_list]
    if G_list[0] < 3 or any(b <= a for a, b in zip(G_list, G_list[1:])):
        raise ValueError("G_list must be strictly increasing with minimum >= 3")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    prompt_dist = prompt_dist or PromptDist.uniform(policy.n_contexts)
    p = prompt_dist.probs
    table = reward.cached_table(policy.vocab, policy.n_contexts)
    lp = policy.trajectory_log_probs
    exact_ctx = np.array([_exact_row(lp[x], table[x], lam) for x in range(policy.n_contexts)])
    rows = {k: [] for k in ("pb", "ps", "jb", "js")}
    for G in G_list:
        pb = ps = jb = js = 0.0
        for x in range(policy.n_contexts):
            if p[x] == 0:
                continue
            rng = stream(seed, _BIAS_KEY, G, x)
            r = table[x][sample_indices(policy, x, (n_mc, G), rng)]
            plain, jack = plain_and_jackknife(r, lam)
            pb += p[x] * (plain - exact_ctx[x]).mean()
            jb += p[x] * (jack - exact_ctx[x]).mean()
            ps += p[x] ** 2 * plain.var(ddof=1) / n_mc
            js += p[x] ** 2 * jack.var(ddof=1) / n_mc
        rows["pb"].append(float(pb))
        rows["ps"].append(float(math.sqrt(ps)))
        rows["jb"].append(float(jb))
        rows["js"].append(float(math.sqrt(js)))
    report = BiasReport(
        lam=float(lam), G=G_list, n_mc=int(n_mc),
        plain_bias=rows["pb"], plain_se=rows["ps"], jackknife_bias=rows["jb"], jackknife_se=rows["js"],
        plain_slope=fit_slope(G_list, rows["pb"], rows["ps"]),
        jackknife_slope=fit_slope(G_list, rows["jb"], rows["js"]),
        exact=float(p @ exact_ctx),
    )
    if not (report.signal("plain").any() or report.signal("jackknife").any()):
        raise InsufficientSignal("no G shows a bias beyond 3 standard errors", report)
    return report


def _exact_row(log_pi, r, lam):
    return float(entropic_risk_rows(log_pi, r, lam))


# ---------------------------------------------------------------------------
# gradient variance with and without the baseline


class _Moments:
    """Chunked mean and M2 accumulation (Chan et al. pairwise update)."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, chunk: np.ndarray):
        nb = chunk.shape[0]
        mb = chunk.mean(axis=0)
        m2b = ((chunk - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * nb / n
        self.m2 = self.m2 + m2b + delta**2 * self.n * nb / n
        self.n = n

    @property
    def var(self):
        return self.m2 / (self.n - 1)


def batched_score(policy: TabularPolicy, x: int, tokens: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Per-group gradient rows of context ``x``: tokens/coef are (n, G, T); returns (n, T*P*V)."""
    _, T, P, V = policy.logits.shape
    n = tokens.shape[0]
    mask = tokens >= 0
    pos = np.broadcast_to(np.arange(T), tokens.shape)
    prev = np.zeros_like(tokens)
    prev[..., 1:] = tokens[..., :-1] + 1
    row = pos * P + np.where(mask, prev, 0)
    gid = np.broadcast_to(np.arange(n)[:, None, None], tokens.shape)
    n_rows = T * P
    flat_row = (gid * n_rows + row)[mask]
    c = np.broadcast_to(coef, tokens.shape)[mask]
    row_total = np.bincount(flat_row, weights=c, minlength=n * n_rows).reshape(n, n_rows, 1)
    onehot = np.bincount(flat_row * V + tokens[mask], weights=c, minlength=n * n_rows * V)
    probs = policy.probs[x].reshape(1, n_rows, V)
    return (onehot.reshape(n, n_rows, V) - row_total * probs).reshape(n, -1)


@dataclass
class VarianceCell:
    lam: float
    var_with: np.ndarray
    var_without: np.ndarray
    mean_with: np.ndarray
    mean_without: np.ndarray
    diff_z: np.ndarray  # paired z-score of the mean difference per coordinate

    @property
    def ratio_median(self) -> float:
        ok = self.var_with > 0
        if not ok.any():
            return math.inf if np.any(self.var_without > 0) else math.nan
        return float(np.median(self.var_without[ok] / self.var_with[ok]))

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.diff_z))) if self.diff_z.size else 0.0

    @property
    def variance_dominated(self) -> bool:
        """With-baseline variance <= without-baseline variance at every coordinate."""
        return bool(np.all(self.var_with <= self.var_without))


@dataclass
class VarianceReport:
    n_mc: int
    group_size: int
    cells: list = field(default_factory=list)
    alpha: float = 0.0027  # two-sided 3 sigma

    @property
    def z_critical(self) -> float:
        m = max(self.cells[0].var_with.size, 1) if self.cells else 1
        return float(norm.isf(self.alpha / (2 * m)))

    def neutral(self, cell: VarianceCell) -> bool:
        return cell.max_abs_z <= self.z_critical

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "n_mc", "group_size", "median_var_with", "median_var_without",
                    "ratio_median", "max_abs_z", "z_critical", "neutral"])
        for c in self.cells:
            w.writerow([_fmt(c.lam), self.n_mc, self.group_size, repr(float(np.median(c.var_with))),
                        repr(float(np.median(c.var_without))), repr(c.ratio_median),
                        repr(c.max_abs_z), repr(self.z_critical), int(self.neutral(c))])
        return buf.getvalue()


def variance_study(policy: TabularPolicy, reward: RewardModel, lam_list: Sequence[float], n_mc: int,
                   seed: int, group_size: int = 8, prompt_dist: PromptDist | None = None,
                   use_jackknife: bool = False, weighting: str = "token_avg",
                   chunk: int = 5000) -> VarianceReport:
    """Per-coordinate variance of the on-policy FRPO gradient with and without the baseline.

    One Monte Carlo sample is one group per context, combined with prompt
    weights, i.e. the gradient a training step would take. Both variants are
    evaluated on the same groups, so the mean-equality check uses paired
    differences. Only coordinates the sampler can reach are reported.
    """
    prompt_dist = prompt_dist or PromptDist.uniform(policy.n_contexts)
    p = prompt_dist.probs
    table = reward.cached_table(policy.vocab, policy.n_contexts)
    ts = trajectory_set(policy.vocab)
    report = VarianceReport(int(n_mc), int(group_size))
    for lam in lam_list:
        with_m, without_m, diff_m = [], [], []
        for x in range(policy.n_contexts):
            dim = int(np.prod(policy.logits.shape[1:]))
            mw, mo, md = _Moments(dim), _Moments(dim), _Moments(dim)
            rng = stream(seed, _VARIANCE_KEY, x)
            done = 0
            while done < n_mc:
                n = min(chunk, n_mc - done)
                idx = sample_indices(policy, x, (n, group_size), rng)
                tokens = ts.tokens[idx]
                mask = tokens >= 0
                d = table[x][idx]
                d = d - d[..., :1]  # same centring as Group: constant groups give exact zeros
                adv = d - d.mean(axis=-1, keepdims=True)
                zero, w = token_units(np.zeros(tokens.shape), mask, weighting)
                if math.isinf(lam):
                    cw = co = onpolicy_grpo_coef(adv, w, zero, 0.0)
                else:
                    cw = onpolicy_frpo_coef(adv, w, zero, lam, 0.0, True, use_jackknife)
                    co = onpolicy_frpo_coef(adv, w, zero, lam, 0.0, False, use_jackknife)
                gw = p[x] * batched_score(policy, x, tokens, cw)
                go = p[x] * batched_score(policy, x, tokens, co)
                mw.add(gw)
                mo.add(go)
                md.add(gw - go)
                done += n
            with_m.append(mw)
            without_m.append(mo)
            diff_m.append(md)
        vw = np.concatenate([m.var for m in with_m])
        vo = np.concatenate([m.var for m in without_m])
        vd = np.concatenate([m.var for m in diff_m])
        mean_d = np.concatenate([m.mean for m in diff_m])
        reach = (vw > 0) | (vo > 0)
        se = np.sqrt(vd / n_mc)
        z = np.where(se > 0, mean_d / np.where(se > 0, se, 1.0), np.where(mean_d == 0, 0.0, np.inf))
        report.cells.append(VarianceCell(
            lam=float(lam), var_with=vw[reach], var_without=vo[reach],
            mean_with=np.concatenate([m.mean for m in with_m])[reach],
            mean_without=np.concatenate([m.mean for m in without_m])[reach],
            diff_z=z[reach],
        ))
    return report


# ---------------------------------------------------------------------------
# committed instances


def committed_bias_instance():
    """Two contexts, reward 1 iff token 1 appears; success rates near 0.40 and 0.44."""
    vocab = VocabSpec(3, 0, 2)
    policy = TabularPolicy.random(vocab, 2, seed=8)
    ts = trajectory_set(vocab)
    success = np.array([1.0 if 1 in s else 0.0 for s in ts.sequences])
    return policy, TableReward(np.stack([success, success])), PromptDist.uniform(2)


def committed_kl_instance(fixed_length: bool = True):
    """(theta, ref, prompt) for the KL-estimator check.

    With ``fixed_length`` EOS is suppressed (logit -30) before the last
    position, so every response has length max_len and the token-averaged k3
    estimator is unbiased for the token-averaged KL.
    """
    vocab = VocabSpec(4, 0, 3)
    theta = TabularPolicy.random(vocab, 2, seed=3)
    ref = TabularPolicy.random(vocab, 2, seed=103)
    if fixed_length:
        theta, ref = (_suppress_early_eos(p) for p in (theta, ref))
    return theta, ref, PromptDist.uniform(2)


def _suppress_early_eos(policy: TabularPolicy) -> TabularPolicy:
    logits = policy.logits.copy()
    logits[:, : policy.vocab.max_len - 1, :, policy.vocab.eos_token] = -30.0
    return policy.with_logits(logits)
