"""Sampled estimators used by the GRPO and FRPO objectives.

The kernels work on "unit" arrays shaped ``(..., G, U)``. With token averaging a
unit is a token, weighted by ``1/|y_i|``; with sequence weighting each trajectory
is one unit carrying its whole-sequence log-ratio and weight 1. Leading axes are
batch axes, so Monte Carlo studies can push many groups through at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from .env import Group, TabularPolicy, token_log_ratio
from .errors import DegenerateGroup, NonFiniteInput

Weighting = Literal["token_avg", "sequence"]


@dataclass(frozen=True)
class ClipSpec:
    epsilon: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"clip epsilon must be in (0, 1), got {self.epsilon}")

    @property
    def log_upper(self) -> float:
        return math.log1p(self.epsilon)

    @property
    def log_lower(self) -> float:
        return math.log1p(-self.epsilon)


@dataclass(frozen=True)
class RiskSpec:
    """Risk temperature lambda; ``math.inf`` is the GRPO-limit sentinel."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")

    @classmethod
    def infinite(cls) -> "RiskSpec":
        return cls(math.inf)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lam)


# ---------------------------------------------------------------------------
# unit construction


def token_units(token_logr: np.ndarray, mask: np.ndarray, weighting: Weighting = "token_avg"):
    """Turn per-token log-ratios ``(..., G, T)`` into unit log-ratios and weights."""
    token_logr = np.where(mask, token_logr, 0.0)
    if weighting == "token_avg":
        lengths = mask.sum(axis=-1, keepdims=True)
        return token_logr, mask / lengths
    if weighting == "sequence":
        return token_logr.sum(axis=-1, keepdims=True), np.ones(mask.shape[:-1] + (1,))
    raise ValueError(f"unknown weighting {weighting!r}")


def group_logps(policy: TabularPolicy, group: Group) -> np.ndarray:
    return policy.token_log_probs(group.context, group.tokens)


def check_finite(*policies: TabularPolicy):
    for p in policies:
        if not np.all(np.isfinite(p.logits)):
            raise NonFiniteInput("policy logits contain non-finite values")


# ---------------------------------------------------------------------------
# kernels


def clipped_logr(logr: np.ndarray, clip: ClipSpec) -> np.ndarray:
    return np.minimum(logr, clip.log_upper)


def unclipped(logr: np.ndarray, clip: ClipSpec) -> np.ndarray:
    # at the boundary the clip counts as saturated, so no gradient flows
    return logr < clip.log_upper


def _log_weighted_mean_exp(ell, weights, axes):
    """log sum(weights * exp(ell)) for weights summing to one along ``axes``.

    Near zero the log1p/expm1 form keeps absolute accuracy, which matters when
    the result is multiplied by a large lambda.
    """
    small = np.all(np.abs(np.where(weights > 0, ell, 0.0)) < 0.5, axis=axes)
    with np.errstate(over="ignore", invalid="ignore"):
        near = np.log1p((weights * np.expm1(np.where(weights > 0, ell, 0.0))).sum(axis=axes))
    active = np.where(weights > 0, ell, -np.inf)
    top = active.max(axis=axes, keepdims=True)
    with np.errstate(divide="ignore"):
        far = np.log((weights * np.exp(active - top)).sum(axis=axes)) + np.squeeze(top, axis=axes)
    return np.where(small, near, far)


def _tilted(logr, adv, lam, clip):
    ell = clipped_logr(logr, clip)
    if not math.isinf(lam):
        ell = ell - adv[..., None] / lam
    return ell


def log_partition_kernel(logr, w, adv, lam, clip) -> np.ndarray:
    G = logr.shape[-2]
    return _log_weighted_mean_exp(_tilted(logr, adv, lam, clip), w / G, (-2, -1))


def loo_log_partition_kernel(logr, w, adv, lam, clip, recenter: bool = False) -> np.ndarray:
    """Leave-one-out log partitions, shape ``(..., G)`` indexed by the dropped j."""
    G = logr.shape[-2]
    if G < 3:
        raise DegenerateGroup(f"leave-one-out needs G >= 3, got {G}")
    ell = _tilted(logr, adv, lam, clip)
    # row j gathers the G-1 survivors, so each entry is the subgroup estimate verbatim
    others = np.array([[i for i in range(G) if i != j] for j in range(G)])
    out = _log_weighted_mean_exp(ell[..., others, :], w[..., others, :] / (G - 1), (-2, -1))
    if recenter and not math.isinf(lam):
        # re-centring on the G-1 survivors shifts every advantage by A_j/(G-1)
        out = out - adv / ((G - 1) * lam)
    return out


def jackknife_combine(log_full: np.ndarray, log_loo: np.ndarray) -> np.ndarray:
    G = log_loo.shape[-1]
    return G * log_full - (G - 1) / G * log_loo.sum(axis=-1)


def log1p_excess(z: np.ndarray) -> np.ndarray:
    """z - log1p(z), by series near zero where the subtraction would cancel."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-2
    zs = np.where(small, z, 0.0)
    series = np.zeros_like(zs)
    for k in range(12, 1, -1):
        series = zs * (series + (-1.0) ** k / k)
    series = zs * series
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = z - np.log1p(np.where(small, 0.0, z))
    return np.where(small, series, direct)


def risk_value_kernel(logr, w, adv, lam, clip, jackknife=False, recenter=False) -> np.ndarray:
    """-log Z_hat (or its jackknife) + baseline - 1, without lambda factors.

    Written as (B - 1 - z) + excess terms with z = Z_hat - 1, so that the two
    O(ratio - 1) pieces cancel analytically instead of in floating point.
    """
    G = logr.shape[-2]
    rbar = clipped_logr(logr, clip)
    c = np.zeros_like(adv) if math.isinf(lam) else -adv / lam
    ell = rbar + c[..., None]
    if np.any(np.abs(np.where(w > 0, ell, 0.0)) >= 0.5):
        log_z = log_partition_kernel(logr, w, adv, lam, clip)
        if jackknife:
            loo = loo_log_partition_kernel(logr, w, adv, lam, clip, recenter)
            log_z = jackknife_combine(log_z, loo)
        return baseline_excess_kernel(logr, w, clip) - log_z
    b_minus_z = (w / G * -np.exp(rbar) * np.expm1(c)[..., None]).sum(axis=(-2, -1))
    e = (w * np.expm1(np.where(w > 0, ell, 0.0))).sum(axis=-1)  # (..., G)
    z = e.sum(axis=-1) / G
    if not jackknife:
        return b_minus_z + log1p_excess(z)
    z_loo = (e.sum(axis=-1, keepdims=True) - e) / (G - 1)
    out = b_minus_z + G * log1p_excess(z) - (G - 1) / G * log1p_excess(z_loo).sum(axis=-1)
    if recenter and not math.isinf(lam):
        out = out - adv.sum(axis=-1) / (G * lam)
    return out


def risk_gradient_kernel(logr, w, adv, lam, clip, jackknife=False, baseline=True) -> np.ndarray:
    """d/d logr of -log Z_hat (or its jackknife), plus the baseline when asked.

    No lambda factor. Units with a saturated clip get zero. With the baseline
    each unit's coefficient is (w/G) ratio (1 - e^{-A/lam}/Z_hat), evaluated as
    -expm1 to stay accurate when lambda is large.
    """
    G = logr.shape[-2]
    rbar = clipped_logr(logr, clip)
    c = np.zeros_like(adv) if math.isinf(lam) else -adv / lam
    log_z = log_partition_kernel(logr, w, adv, lam, clip)

    def unit(scale_w, log_norm):
        # scale_w: (..., G, U) weights; log_norm broadcast against (..., G, 1)
        if baseline:
            return scale_w * np.exp(rbar) * -np.expm1(c[..., None] - log_norm)
        return -scale_w * np.exp(rbar + c[..., None] - log_norm)

    if not jackknife:
        coef = unit(w / G, log_z[..., None, None])
    else:
        loo = loo_log_partition_kernel(logr, w, adv, lam, clip)  # (..., G_j)
        full = unit(w, log_z[..., None, None])
        # rows j of the (..., G_j, G, U) grid drop sample j
        grid = unit((w / (G - 1))[..., None, :, :],
                    loo[..., :, None, None])
        idx = np.arange(G)
        grid[..., idx, idx, :] = 0.0
        coef = full - (G - 1) / G * grid.sum(axis=-3)
    return coef * unclipped(logr, clip)


def baseline_kernel(logr, w, clip) -> np.ndarray:
    """(1/G) sum_i sum_u w_iu min(ratio, 1+eps), without the lambda factor."""
    return 1.0 + baseline_excess_kernel(logr, w, clip)


def baseline_excess_kernel(logr, w, clip) -> np.ndarray:
    """Baseline minus its on-policy value 1, computed without cancellation."""
    G = logr.shape[-2]
    return (w * np.expm1(clipped_logr(logr, clip))).sum(axis=(-2, -1)) / G


def k3_terms(logr_ref_theta: np.ndarray) -> np.ndarray:
    """ratio - log ratio - 1 with ratio = pi_ref / pi_theta; always >= 0."""
    return np.expm1(logr_ref_theta) - logr_ref_theta


def k3_kernel(logr_ref_theta, w) -> np.ndarray:
    G = w.shape[-2]
    return (w * k3_terms(logr_ref_theta)).sum(axis=(-2, -1)) / G


# ---------------------------------------------------------------------------
# group-level API


def pair_units(group, policy_a, policy_b, weighting):
    """Unit log-ratios log(pi_a / pi_b) and weights for a group."""
    logr = token_log_ratio(policy_a, policy_b, group.context, group.tokens)
    return token_units(logr, group.mask, weighting)


def kl_estimator_k3(group: Group, policy_theta: TabularPolicy, policy_ref: TabularPolicy,
                    weighting: Weighting = "token_avg") -> float:
    logr, w = pair_units(group, policy_ref, policy_theta, weighting)
    return float(k3_kernel(logr, w))


def partition_hat(group: Group, policy_theta: TabularPolicy, policy_old: TabularPolicy,
                  risk: RiskSpec, clip: ClipSpec, weighting: Weighting = "token_avg") -> float:
    return math.exp(log_partition_hat(group, policy_theta, policy_old, risk, clip, weighting))


def log_partition_hat(group, policy_theta, policy_old, risk, clip, weighting="token_avg") -> float:
    check_finite(policy_theta, policy_old)
    logr, w = pair_units(group, policy_theta, policy_old, weighting)
    return float(log_partition_kernel(logr, w, group.advantages, risk.lam, clip))


def partition_loo(group: Group, policy_theta: TabularPolicy, policy_old: TabularPolicy,
                  risk: RiskSpec, clip: ClipSpec, leave_out: int,
                  weighting: Weighting = "token_avg", recenter: bool = False) -> float:
    if group.size < 3:
        raise DegenerateGroup(f"leave-one-out needs G >= 3, got {group.size}")
    if not 0 <= leave_out < group.size:
        raise IndexError(f"leave_out {leave_out} outside group of size {group.size}")
    return math.exp(log_partition_loo(group, policy_theta, policy_old, risk, clip,
                                      weighting, recenter)[leave_out])


def log_partition_loo(group, policy_theta, policy_old, risk, clip, weighting="token_avg",
                      recenter=False) -> np.ndarray:
    check_finite(policy_theta, policy_old)
    logr, w = pair_units(group, policy_theta, policy_old, weighting)
    return loo_log_partition_kernel(logr, w, group.advantages, risk.lam, clip, recenter)


def jackknife_log_partition(group: Group, policy_theta: TabularPolicy, policy_old: TabularPolicy,
                            risk: RiskSpec, clip: ClipSpec, weighting: Weighting = "token_avg",
                            recenter: bool = False) -> float:
    """G log Z_hat - (G-1)/G sum_j log Z_hat_{-j}."""
    full = log_partition_hat(group, policy_theta, policy_old, risk, clip, weighting)
    loo = log_partition_loo(group, policy_theta, policy_old, risk, clip, weighting, recenter)
    return float(jackknife_combine(np.float64(full), loo))


def baseline_term(group: Group, policy_theta: TabularPolicy, policy_old: TabularPolicy,
                  risk: RiskSpec, clip: ClipSpec, weighting: Weighting = "token_avg") -> float:
    """lambda * (1/G) sum_i (1/|y_i|) sum_t min(ratio, 1+eps); reward-independent."""
    if risk.is_infinite:
        raise ValueError("the baseline diverges in the lambda = inf limit")
    logr, w = pair_units(group, policy_theta, policy_old, weighting)
    return risk.lam * float(baseline_kernel(logr, w, clip))
