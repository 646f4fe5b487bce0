"""Outer training loop for GRPO and FRPO on tabular policies.

One iteration: refresh the lagged sampling policy every ``sync_every`` steps,
sample one group per minibatch context from it, take a single gradient ascent
step on the surrogate, then log exact metrics of the updated policy.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from .env import PromptDist, RewardModel, TabularPolicy, exact_kl, expected_reward, sample_group, stream
from .errors import DivergenceDetected
from .estimators import ClipSpec, RiskSpec
from .objectives import ObjectiveConfig, frpo_gradient, frpo_objective, grpo_gradient, grpo_objective

GRAD_NORM_LIMIT = 1e6

# stream keys; sampling and minibatch permutations never share a generator
_SAMPLE_KEY = 0
_EPOCH_KEY = 1


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Literal["GRPO", "FRPO"] = "FRPO"
    lam: float = 1.0  # math.inf selects the exact GRPO limit
    beta: float = 0.0
    epsilon: float = 0.2
    group_size: int = 8
    learning_rate: float = 0.5
    momentum: float = 0.0
    iterations: int = 100
    sync_every: int = 1
    minibatch_contexts: int | None = None  # None: every context each iteration
    seed: int = 0
    use_baseline: bool = True
    use_jackknife: bool = True
    weighting: Literal["token_avg", "sequence"] = "token_avg"
    normalize_risk_scale: bool = False

    def __post_init__(self):
        problems = []
        if self.algorithm not in ("GRPO", "FRPO"):
            problems.append(f"algorithm must be GRPO or FRPO, got {self.algorithm!r}")
        if not self.lam > 0:
            problems.append("lam must be > 0")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if not 0 < self.epsilon < 1:
            problems.append("epsilon must be in (0, 1)")
        if self.group_size < 2:
            problems.append("group_size must be >= 2")
        if self.algorithm == "FRPO" and self.use_jackknife and self.group_size < 3:
            problems.append("the jackknife needs group_size >= 3")
        if self.learning_rate < 0:
            problems.append("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.sync_every < 1:
            problems.append("sync_every must be >= 1")
        if self.minibatch_contexts is not None and self.minibatch_contexts < 1:
            problems.append("minibatch_contexts must be >= 1")
        if self.weighting not in ("token_avg", "sequence"):
            problems.append(f"unknown weighting {self.weighting!r}")
        if problems:
            raise ValueError("; ".join(problems))

    def objective_config(self) -> ObjectiveConfig:
        risk = RiskSpec.infinite() if self.algorithm == "GRPO" else RiskSpec(self.lam)
        return ObjectiveConfig(risk=risk, clip=ClipSpec(self.epsilon), beta=self.beta,
                               use_baseline=self.use_baseline, use_jackknife=self.use_jackknife,
                               weighting=self.weighting, normalize_risk_scale=self.normalize_risk_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lam"] = "inf" if math.isinf(self.lam) else self.lam
        return d


LOG_FIELDS = ("iteration", "mean_reward", "kl_to_ref", "entropy", "objective", "grad_norm")


@dataclass
class TrainLog:
    iteration: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    kl_to_ref: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def append(self, **row):
        for name in LOG_FIELDS:
            getattr(self, name).append(row[name])

    def rows(self):
        return list(zip(*(getattr(self, name) for name in LOG_FIELDS)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in self.rows():
            writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()


def entropy(policy: TabularPolicy, prompt_dist: PromptDist) -> float:
    """Entropy of the whole-trajectory distribution, averaged over prompts."""
    lp = policy.trajectory_log_probs
    p = np.exp(lp)
    per_ctx = -np.where(p > 0, p * lp, 0.0).sum(axis=1)
    return max(float(prompt_dist.probs @ per_ctx), 0.0)


class _ContextSchedule:
    """Minibatches of contexts, drawn without replacement within each epoch."""

    def __init__(self, n_contexts: int, batch: int | None, seed: int):
        self.n = n_contexts
        self.batch = n_contexts if batch is None else min(batch, n_contexts)
        self.seed = seed
        self.per_epoch = math.ceil(self.n / self.batch)

    def contexts(self, iteration: int) -> np.ndarray:
        if self.batch == self.n:
            return np.arange(self.n)
        epoch, slot = divmod(iteration, self.per_epoch)
        perm = stream(self.seed, _EPOCH_KEY, epoch).permutation(self.n)
        return np.sort(perm[slot * self.batch:(slot + 1) * self.batch])


def sample_groups(policy, contexts, reward, G, seed, iteration, workers: int = 1) -> list:
    """One group per context from its own (seed, iteration, context) stream."""
    def one(c):
        return sample_group(policy, int(c), G, reward, stream(seed, _SAMPLE_KEY, iteration, c))

    if workers > 1 and len(contexts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, contexts))
    return [one(c) for c in contexts]


def train(prompt_dist: PromptDist, reward: RewardModel, ref_policy: TabularPolicy, cfg: TrainConfig,
          workers: int = 1, init_policy: TabularPolicy | None = None,
          callback: Callable[[int, TabularPolicy], None] | None = None):
    """Run the loop; returns ``(final_policy, TrainLog)``.

    The reference policy anchors the KL penalty and the logged KL; training
    starts from it unless ``init_policy`` is given. ``callback(iteration, policy)``
    sees the policy after every update.
    """
    if prompt_dist.n_contexts != ref_policy.n_contexts:
        raise ValueError("prompt distribution size differs from context count")
    ocfg = cfg.objective_config()
    theta = ref_policy if init_policy is None else init_policy
    theta.check_compatible(ref_policy)
    objective_fn = grpo_objective if cfg.algorithm == "GRPO" else frpo_objective
    gradient_fn = grpo_gradient if cfg.algorithm == "GRPO" else frpo_gradient
    schedule = _ContextSchedule(theta.n_contexts, cfg.minibatch_contexts, cfg.seed)
    p = prompt_dist.probs
    velocity = np.zeros_like(theta.logits)
    log = TrainLog()
    old = theta
    for it in range(cfg.iterations):
        if it % cfg.sync_every == 0:
            old = theta
        ctx = schedule.contexts(it)
        groups = sample_groups(old, ctx, reward, cfg.group_size, cfg.seed, it, workers)
        weights = p[ctx] / p[ctx].sum()
        value = objective_fn(groups, theta, old, ref_policy, ocfg, weights)
        grad = gradient_fn(groups, theta, old, ref_policy, ocfg, weights)
        grad_norm = float(np.sqrt((grad * grad).sum()))
        if not math.isfinite(grad_norm) or grad_norm > GRAD_NORM_LIMIT:
            raise DivergenceDetected(f"gradient norm {grad_norm:.3g} at iteration {it}", log)
        velocity = cfg.momentum * velocity + grad
        logits = theta.logits + cfg.learning_rate * velocity
        if not np.all(np.isfinite(logits)):
            raise DivergenceDetected(f"non-finite logits at iteration {it}", log)
        theta = theta.with_logits(logits)
        with np.errstate(all="ignore"):
            row = dict(iteration=it, mean_reward=expected_reward(theta, reward, prompt_dist),
                       kl_to_ref=exact_kl(theta, ref_policy, prompt_dist),
                       entropy=entropy(theta, prompt_dist), objective=value, grad_norm=grad_norm)
            finite = np.all(np.isfinite(theta.log_probs))
        # logits can be finite yet so far apart that the softmax overflows
        if not finite or not all(math.isfinite(row[k]) for k in LOG_FIELDS[1:]):
            raise DivergenceDetected(f"non-finite policy or metrics at iteration {it}", log)
        log.append(**row)
        if callback is not None:
            callback(it, theta)
    return theta, log
