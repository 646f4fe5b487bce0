"""GRPO and FRPO objective values and their gradients w.r.t. the policy logits.

Every gradient here is assembled the same way: a coefficient per sampled token
(d objective / d log pi_theta of that token) is pushed through the softmax score
``onehot(token) - softmax(row)`` of the row the token was drawn from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import estimators as est
from .env import Group, TabularPolicy, prev_index
from .errors import NonDeterministicObjective
from .estimators import ClipSpec, RiskSpec, Weighting


@dataclass(frozen=True)
class ObjectiveConfig:
    risk: RiskSpec = RiskSpec(1.0)
    clip: ClipSpec = ClipSpec(0.2)
    beta: float = 0.0
    use_baseline: bool = True
    use_jackknife: bool = True
    weighting: Weighting = "token_avg"
    normalize_risk_scale: bool = False
    recenter_loo: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @property
    def lam(self) -> float:
        return self.risk.lam

    @property
    def risk_scale(self) -> float:
        """Prefactor of the partition and baseline terms."""
        return 1.0 if self.normalize_risk_scale else self.lam


def _group_weights(groups: Sequence[Group], weights):
    if weights is None:
        return np.full(len(groups), 1.0 / len(groups))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(groups),):
        raise ValueError("need one weight per group")
    return weights


def _units(group, theta, other, weighting):
    return est.pair_units(group, theta, other, weighting)


def _ref_units(group, theta, ref, weighting):
    return _units(group, ref, theta, weighting)


# ---------------------------------------------------------------------------
# objective values


def grpo_group_value(group, theta, old, ref, cfg: ObjectiveConfig) -> float:
    logr, w = _units(group, theta, old, cfg.weighting)
    G = group.size
    ratio = np.exp(logr)
    eps = cfg.clip.epsilon
    adv = group.advantages[:, None]
    surrogate = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
    value = (w * surrogate).sum() / G
    if cfg.beta:
        lref, wref = _ref_units(group, theta, ref, cfg.weighting)
        value -= cfg.beta * est.k3_kernel(lref, wref)
    return float(value)


def frpo_group_value(group, theta, old, ref, cfg: ObjectiveConfig, offset_free: bool = False) -> float:
    if cfg.risk.is_infinite:
        return grpo_group_value(group, theta, old, ref, cfg)
    est.check_finite(theta, old)
    logr, w = _units(group, theta, old, cfg.weighting)
    adv = group.advantages
    lam = cfg.lam
    log_z = est.log_partition_kernel(logr, w, adv, lam, cfg.clip)
    if cfg.use_jackknife:
        loo = est.loo_log_partition_kernel(logr, w, adv, lam, cfg.clip, cfg.recenter_loo)
        log_z = est.jackknife_combine(log_z, loo)
    if cfg.use_baseline:
        fused = est.risk_value_kernel(logr, w, adv, lam, cfg.clip, cfg.use_jackknife, cfg.recenter_loo)
        value = cfg.risk_scale * (fused if offset_free else 1.0 + fused)
    else:
        value = -cfg.risk_scale * log_z
    if cfg.beta:
        lref, wref = _ref_units(group, theta, ref, cfg.weighting)
        value -= cfg.beta * est.k3_kernel(lref, wref)
    return float(value)


def grpo_objective(groups, policy_theta, policy_old, policy_ref, cfg: ObjectiveConfig, weights=None) -> float:
    """Clipped-ratio surrogate with centred advantages minus beta times the k3 estimate."""
    weights = _group_weights(groups, weights)
    return float(sum(wt * grpo_group_value(g, policy_theta, policy_old, policy_ref, cfg)
                     for wt, g in zip(weights, groups)))


def frpo_objective(groups, policy_theta, policy_old, policy_ref, cfg: ObjectiveConfig,
                   weights=None, offset_free: bool = False) -> float:
    """-lambda log Z (jackknifed if configured) + baseline - beta k3, averaged over groups.

    ``offset_free`` drops the baseline's on-policy value lambda, a constant in
    theta; finite differences at large lambda need it. The lambda = inf sentinel
    returns the GRPO objective, i.e. the limit with that constant removed.
    """
    weights = _group_weights(groups, weights)
    return float(sum(wt * frpo_group_value(g, policy_theta, policy_old, policy_ref, cfg, offset_free)
                     for wt, g in zip(weights, groups)))


# ---------------------------------------------------------------------------
# gradient assembly


def scatter_score(policy: TabularPolicy, context, tokens: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum over tokens of coef * d log pi(token) / d logits.

    ``tokens`` and ``coef`` are ``(..., T)``; ``context`` broadcasts against the
    leading axes. Returns a gradient shaped like ``policy.logits``.
    """
    C, T, P, V = policy.logits.shape
    ctx, tokens = np.broadcast_arrays(np.asarray(context)[..., None], np.asarray(tokens))
    mask = tokens >= 0
    pos = np.broadcast_to(np.arange(T), tokens.shape)
    prev = prev_index(tokens)
    row = ((ctx * T + pos) * P + prev)[mask]
    c = np.broadcast_to(np.asarray(coef, dtype=float), tokens.shape)[mask]
    tok = tokens[mask]
    n_rows = C * T * P
    row_total = np.bincount(row, weights=c, minlength=n_rows)
    onehot = np.bincount(row * V + tok, weights=c, minlength=n_rows * V)
    grad = onehot.reshape(C, T, P, V) - row_total.reshape(C, T, P, 1) * policy.probs
    return grad


def score_gradient(policy: TabularPolicy, trajectory) -> np.ndarray:
    """Gradient of log pi(trajectory) w.r.t. all logits."""
    tokens = np.full(policy.vocab.max_len, -1, dtype=np.int64)
    tokens[: len(trajectory.tokens)] = trajectory.tokens
    return scatter_score(policy, trajectory.context, tokens, np.ones(policy.vocab.max_len))


def _unit_to_token(unit_coef: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # sequence units are (G, 1) and broadcast over every token of the trajectory
    return np.where(mask, unit_coef, 0.0)


def _accumulate(policy, groups, weights, coef_fn) -> np.ndarray:
    # fixed-order pairwise reduction keeps the sum independent of how work is split
    parts = [wt * scatter_score(policy, g.context, g.tokens, _unit_to_token(coef_fn(g), g.mask))
             for wt, g in zip(weights, groups)]
    return pairwise_sum(parts)


def pairwise_sum(parts: list) -> np.ndarray:
    if not parts:
        raise ValueError("nothing to sum")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _k3_coef(group, theta, ref, cfg) -> np.ndarray:
    lref, wref = _ref_units(group, theta, ref, cfg.weighting)
    return cfg.beta * wref * np.expm1(lref) / group.size


def grpo_unit_coef(group, theta, old, ref, cfg) -> np.ndarray:
    logr, w = _units(group, theta, old, cfg.weighting)
    eps = cfg.clip.epsilon
    ratio = np.exp(logr)
    adv = np.broadcast_to(group.advantages[:, None], logr.shape)
    active = ((adv > 0) & (ratio < 1 + eps)) | ((adv < 0) & (ratio > 1 - eps))
    coef = np.where(active, w * ratio * adv, 0.0) / group.size
    if cfg.beta:
        coef = coef + _k3_coef(group, theta, ref, cfg)
    return coef


def frpo_unit_coef(group, theta, old, ref, cfg) -> np.ndarray:
    if cfg.risk.is_infinite:
        return grpo_unit_coef(group, theta, old, ref, cfg)
    logr, w = _units(group, theta, old, cfg.weighting)
    adv, lam, clip = group.advantages, cfg.lam, cfg.clip
    coef = cfg.risk_scale * est.risk_gradient_kernel(logr, w, adv, lam, clip, cfg.use_jackknife,
                                                     cfg.use_baseline)
    if cfg.beta:
        coef = coef + _k3_coef(group, theta, ref, cfg)
    return coef


def grpo_gradient(groups, policy_theta, policy_old, policy_ref, cfg, weights=None) -> np.ndarray:
    """Gradient of :func:`grpo_objective`, clip-aware, valid off-policy."""
    weights = _group_weights(groups, weights)
    return _accumulate(policy_theta, groups, weights,
                       lambda g: grpo_unit_coef(g, policy_theta, policy_old, policy_ref, cfg))


def frpo_gradient(groups, policy_theta, policy_old, policy_ref, cfg, weights=None) -> np.ndarray:
    """Gradient of :func:`frpo_objective`, clip-aware, valid off-policy."""
    weights = _group_weights(groups, weights)
    return _accumulate(policy_theta, groups, weights,
                       lambda g: frpo_unit_coef(g, policy_theta, policy_old, policy_ref, cfg))


# ---------------------------------------------------------------------------
# on-policy closed forms (pi_old == pi_theta, so every ratio is 1)


def onpolicy_frpo_coef(adv, w, logr_ref, lam, beta, use_baseline=True, use_jackknife=False,
                       risk_scale=None):
    """Per-unit coefficients of the on-policy gradient; arrays may carry batch axes.

    Plain form: w/G * (-lam e^{-A/lam}/u + lam [baseline] + beta (ratio_ref - 1))
    with u = mean_i e^{-A_i/lam}. With the baseline, lam (1 - e^{-A/lam}/u) is
    evaluated as -lam expm1(-A/lam - log u).
    """
    scale = lam if risk_scale is None else risk_scale
    G = w.shape[-2]
    c = -adv / lam  # (..., G)
    per_traj = np.expm1(c)  # e^{-A_i/lam} - 1; every trajectory's weights sum to 1
    log_u = np.log1p(per_traj.mean(axis=-1, keepdims=True))  # (..., 1)

    def piece(log_norm):
        if use_baseline:
            return -np.expm1(c - log_norm)
        return -np.exp(c - log_norm)

    if not use_jackknife:
        traj_coef = piece(log_u) / G
    else:
        tot = per_traj.sum(axis=-1, keepdims=True)
        log_u_loo = np.log1p((tot - per_traj) / (G - 1))  # (..., G_j)
        grid = piece(log_u_loo[..., :, None]) / (G - 1)  # (..., G_j, G_i)
        idx = np.arange(G)
        grid[..., idx, idx] = 0.0
        traj_coef = piece(log_u) - (G - 1) / G * grid.sum(axis=-2)
    coef = scale * traj_coef[..., None] * w
    if beta:
        coef = coef + beta * w * np.expm1(logr_ref) / G
    return coef


def onpolicy_grpo_coef(adv, w, logr_ref, beta):
    G = w.shape[-2]
    coef = adv[..., None] * w / G
    if beta:
        coef = coef + beta * w * np.expm1(logr_ref) / G
    return coef


def _onpolicy(groups, policy, policy_ref, cfg, weights, grpo: bool):
    weights = _group_weights(groups, weights)

    def coef(g):
        lref, w = _ref_units(g, policy, policy_ref, cfg.weighting)
        if grpo or cfg.risk.is_infinite:
            return onpolicy_grpo_coef(g.advantages, w, lref, cfg.beta)
        return onpolicy_frpo_coef(g.advantages, w, lref, cfg.lam, cfg.beta, cfg.use_baseline,
                                  cfg.use_jackknife, cfg.risk_scale)

    return _accumulate(policy, groups, weights, coef)


def frpo_gradient_onpolicy(groups, policy, policy_ref, cfg: ObjectiveConfig, weights=None) -> np.ndarray:
    return _onpolicy(groups, policy, policy_ref, cfg, weights, grpo=False)


def grpo_gradient_onpolicy(groups, policy, policy_ref, cfg: ObjectiveConfig, weights=None) -> np.ndarray:
    return _onpolicy(groups, policy, policy_ref, cfg, weights, grpo=True)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_err: float
    mean_rel_err: float
    max_abs_err_small: float
    n_checked: int
    numeric: np.ndarray

    def passed(self, rel_tol: float = 1e-5, abs_tol: float = 1e-9) -> bool:
        return self.max_rel_err < rel_tol and self.max_abs_err_small <= abs_tol


def finite_diff_check(objective: Callable[[TabularPolicy], float], policy: TabularPolicy,
                      h: float = 1e-5, gradient: np.ndarray | None = None,
                      small: float = 1e-8, order: int = 4) -> FDReport:
    """Central differences of ``objective`` at every logit, compared to ``gradient``.

    The objective must be a deterministic function of the logits (frozen groups).
    Entries with |analytic| <= ``small`` are judged by absolute error instead.
    ``order`` picks the 2-point or 4-point central stencil; the FRPO objective's
    curvature scales with lambda, so large lambda needs the 4-point one.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    if gradient is None:
        raise ValueError("an analytic gradient is required")
    base = policy.logits
    if objective(policy) != objective(policy.with_logits(base.copy())):
        raise NonDeterministicObjective("objective differs between identical evaluations")
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)

    def at(k, step):
        x = flat.copy()
        x[k] += step
        return objective(policy.with_logits(x.reshape(base.shape)))

    for k in range(flat.size):
        d1 = at(k, h) - at(k, -h)
        if order == 2:
            num_flat[k] = d1 / (2 * h)
        else:
            d2 = at(k, 2 * h) - at(k, -2 * h)
            num_flat[k] = (8 * d1 - d2) / (12 * h)
    analytic = np.asarray(gradient)
    big = np.abs(analytic) > small
    rel = np.abs(numeric[big] - analytic[big]) / np.abs(analytic[big])
    abs_small = np.abs(numeric[~big] - analytic[~big])
    return FDReport(
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        mean_rel_err=float(rel.mean()) if rel.size else 0.0,
        max_abs_err_small=float(abs_small.max()) if abs_small.size else 0.0,
        n_checked=int(big.sum()),
        numeric=numeric,
    )
