"""Two-stage experiment: train a base policy, fine-tune it on a conflicting task,
and track how much base reward survives as the policy drifts in KL.

The SFT stage uses the exact gradient of the demonstration log-likelihood, so
differences between retention curves come from the base policies alone.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .env import (PromptDist, RewardModel, TabularPolicy, TargetMatchReward,
                  Trajectory, VocabSpec, exact_kl, expected_reward)
from .objectives import scatter_score
from .trainer import TrainConfig, train

KL_GRID = (0.05, 0.1, 0.2, 0.4)


@dataclass(frozen=True)
class FinetuneConfig:
    mode: Literal["SFT", "RL"] = "SFT"
    demos: tuple = ()  # ((context, tokens), ...)
    learning_rate: float = 0.1
    steps: int = 100
    eval_every: int = 10
    downstream_reward: RewardModel | None = None
    train: TrainConfig | None = None  # RL mode; its iterations override ``steps``
    task_contexts: tuple | None = None  # contexts the downstream metric averages over

    def __post_init__(self):
        if self.mode not in ("SFT", "RL"):
            raise ValueError(f"mode must be SFT or RL, got {self.mode!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.mode == "SFT":
            if not self.learning_rate > 0:
                raise ValueError("learning_rate must be > 0")
            if not self.demos:
                raise ValueError("SFT needs at least one demonstration")
            if self.steps < 0:
                raise ValueError("steps must be >= 0")
        else:
            if self.downstream_reward is None or self.train is None:
                raise ValueError("RL mode needs downstream_reward and train")

    @property
    def n_steps(self) -> int:
        return self.train.iterations if self.mode == "RL" else self.steps


@dataclass
class FinetuneTrace:
    step: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    base_reward: list = field(default_factory=list)
    downstream_metric: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def record(self, step, kl, base_reward, downstream_metric):
        self.step.append(int(step))
        self.kl.append(float(kl))
        self.base_reward.append(float(base_reward))
        self.downstream_metric.append(float(downstream_metric))


class _Demos:
    """Padded demonstration arrays with per-demo weights p(x) / (#demos at x)."""

    def __init__(self, demos, vocab: VocabSpec, prompt_dist: PromptDist):
        T = vocab.max_len
        self.contexts = np.array([int(c) for c, _ in demos], dtype=np.int64)
        self.tokens = np.full((len(demos), T), -1, dtype=np.int64)
        for k, (c, toks) in enumerate(demos):
            Trajectory(int(c), tuple(toks)).validate(vocab)
            self.tokens[k, :len(toks)] = toks
        counts = np.bincount(self.contexts, minlength=prompt_dist.n_contexts)
        w = prompt_dist.probs[self.contexts] / counts[self.contexts]
        self.weights = w / w.sum()

    def log_likelihood(self, policy: TabularPolicy) -> float:
        lp = policy.token_log_probs(self.contexts, self.tokens).sum(axis=-1)
        return float(self.weights @ lp)

    def gradient(self, policy: TabularPolicy) -> np.ndarray:
        coef = np.where(self.tokens >= 0, self.weights[:, None], 0.0)
        return scatter_score(policy, self.contexts, self.tokens, coef)


def _metric_dist(prompt_dist: PromptDist, contexts) -> PromptDist:
    p = np.zeros(prompt_dist.n_contexts)
    idx = np.asarray(sorted(set(int(c) for c in contexts)))
    p[idx] = prompt_dist.probs[idx]
    return PromptDist(p / p.sum())


def finetune(base_policy: TabularPolicy, cfg: FinetuneConfig, base_reward: RewardModel,
             prompt_dist: PromptDist, workers: int = 1) -> FinetuneTrace:
    """Fine-tune ``base_policy`` and record (KL to base, base reward, downstream metric).

    The downstream metric is E_Q[downstream_reward] over the task contexts when a
    downstream reward is set, and the weighted demo log-likelihood otherwise.
    """
    if cfg.task_contexts is not None:
        task = cfg.task_contexts
    elif cfg.mode == "SFT":
        task = [c for c, _ in cfg.demos]
    else:
        task = range(base_policy.n_contexts)
    metric_dist = _metric_dist(prompt_dist, task)
    demos = _Demos(cfg.demos, base_policy.vocab, prompt_dist) if cfg.mode == "SFT" else None

    def metric(q):
        if cfg.downstream_reward is not None:
            return expected_reward(q, cfg.downstream_reward, metric_dist)
        return demos.log_likelihood(q)

    trace = FinetuneTrace()

    def record(step, q):
        trace.record(step, exact_kl(q, base_policy, prompt_dist),
                     expected_reward(q, base_reward, prompt_dist), metric(q))

    record(0, base_policy)
    n = cfg.n_steps
    if cfg.mode == "SFT":
        q = base_policy
        for step in range(1, n + 1):
            q = q.with_logits(q.logits + cfg.learning_rate * demos.gradient(q))
            if step % cfg.eval_every == 0 or step == n:
                record(step, q)
    else:
        def on_step(it, q):
            step = it + 1
            if step % cfg.eval_every == 0 or step == n:
                record(step, q)

        train(prompt_dist, cfg.downstream_reward, base_policy, cfg.train, workers=workers, callback=on_step)
    return trace


def retention_curve(trace: FinetuneTrace) -> list:
    """(kl, base_reward) pairs sorted by KL, averaging rows with equal KL."""
    if not len(trace):
        raise ValueError("empty trace")
    buckets: dict = {}
    for kl, r in zip(trace.kl, trace.base_reward):
        buckets.setdefault(kl, []).append(r)
    return [(kl, float(np.mean(rs))) for kl, rs in sorted(buckets.items())]


def retention_at(trace: FinetuneTrace, kl_points: Sequence[float]) -> np.ndarray:
    """Base reward at the given KL values by linear interpolation; NaN past the trace."""
    curve = retention_curve(trace)
    kls = np.array([k for k, _ in curve])
    rs = np.array([r for _, r in curve])
    pts = np.asarray(kl_points, dtype=float)
    out = np.interp(pts, kls, rs)
    return np.where(pts <= kls[-1], out, np.nan)


def check_matched(trace_a: FinetuneTrace, trace_b: FinetuneTrace, kl_points, rel_tol: float = 0.1):
    """Refuse comparisons where the runs did not reach the same KL or adaptation."""
    reach = min(trace_a.kl[-1], trace_b.kl[-1])
    if max(kl_points) > reach:
        raise ValueError(f"KL grid point {max(kl_points)} beyond trace reach {reach:.4g}")
    a, b = trace_a.downstream_metric[-1], trace_b.downstream_metric[-1]
    if abs(a - b) > rel_tol * max(abs(a), abs(b)):
        raise ValueError(f"downstream metrics {a:.4g} and {b:.4g} differ by more than {rel_tol:.0%}")


# ---------------------------------------------------------------------------
# committed conflict benchmark


@dataclass(frozen=True, eq=False)
class ConflictBenchmark:
    vocab: VocabSpec
    prompt_dist: PromptDist
    ref_policy: TabularPolicy
    base_reward: RewardModel
    finetune: FinetuneConfig
    train_template: TrainConfig
    protected: tuple
    task: tuple
    kl_grid: tuple = KL_GRID
    kl_budget: float = 0.2


def conflict_benchmark(n_contexts: int = 8, iterations: int = 500, sft_steps: int = 1000) -> ConflictBenchmark:
    """Protected contexts reward target A; task contexts get SFT demos of target B.

    A quarter of the contexts are both protected and task, and there A and B
    disagree, so fine-tuning costs base reward. Task-only contexts have their
    base reward on B as well, so only the overlap conflicts.
    """
    vocab = VocabSpec(4, 0, 3)
    n_overlap = max(1, n_contexts // 4)
    half = n_contexts // 2
    protected = tuple(range(0, half + n_overlap))
    task = tuple(range(half, n_contexts))
    target_a = (1, 2, 0)
    target_b = (3, 3, 0)
    base_targets = [target_a if c in protected else target_b for c in range(n_contexts)]
    base_reward = TargetMatchReward(base_targets)
    demos = tuple((c, target_b) for c in task)
    ft = FinetuneConfig(mode="SFT", demos=demos, learning_rate=0.05, steps=sft_steps, eval_every=5,
                        downstream_reward=TargetMatchReward([target_b] * n_contexts), task_contexts=task)
    tmpl = TrainConfig(algorithm="GRPO", group_size=8, learning_rate=8.0, iterations=iterations,
                       normalize_risk_scale=True)
    return ConflictBenchmark(vocab, PromptDist.uniform(n_contexts), TabularPolicy.uniform(vocab, n_contexts),
                             base_reward, ft, tmpl, protected, task)


def _train_cfg(template: TrainConfig, lam: float, seed: int) -> TrainConfig:
    if math.isinf(lam):
        return replace(template, algorithm="GRPO", lam=math.inf, seed=seed)
    return replace(template, algorithm="FRPO", lam=lam, seed=seed)


@dataclass
class SweepCell:
    lam: float
    seed: int
    base_policy: TabularPolicy
    trace: FinetuneTrace
    retention: np.ndarray  # at the benchmark's KL grid


@dataclass
class SweepResult:
    cells: list
    kl_grid: tuple
    kl_budget: float

    def lambdas(self) -> list:
        return sorted({c.lam for c in self.cells}, key=lambda v: (-v if math.isfinite(v) else -math.inf))

    def cells_for(self, lam) -> list:
        return sorted((c for c in self.cells if c.lam == lam), key=lambda c: c.seed)

    def mean_retention(self, lam) -> np.ndarray:
        return np.mean([c.retention for c in self.cells_for(lam)], axis=0)

    def summary(self) -> list:
        out = []
        for lam in self.lambdas():
            vals = np.array([retention_at(c.trace, [self.kl_budget])[0] for c in self.cells_for(lam)])
            out.append((lam, float(vals.mean()), float(vals.std())))
        return out

    def retention_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "seed", "kl", "base_reward", "downstream_metric"])
        for lam in self.lambdas():
            for c in self.cells_for(lam):
                for kl, r, m in zip(c.trace.kl, c.trace.base_reward, c.trace.downstream_metric):
                    w.writerow([_fmt(lam), c.seed, repr(kl), repr(r), repr(m)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "mean_retention_at_budget", "std"])
        for lam, mean, std in self.summary():
            w.writerow([_fmt(lam), repr(mean), repr(std)])
        return buf.getvalue()


def _fmt(lam: float) -> str:
    return "inf" if math.isinf(lam) else repr(float(lam))


def run_cell(bench: ConflictBenchmark, lam: float, seed: int) -> SweepCell:
    cfg = _train_cfg(bench.train_template, lam, seed)
    base, _ = train(bench.prompt_dist, bench.base_reward, bench.ref_policy, cfg)
    trace = finetune(base, bench.finetune, bench.base_reward, bench.prompt_dist)
    return SweepCell(lam, seed, base, trace, retention_at(trace, bench.kl_grid))


def lambda_sweep(bench: ConflictBenchmark, lambdas: Sequence[float], seeds: Sequence[int],
                 workers: int = 1) -> SweepResult:
    """Train and fine-tune one base policy per (lambda, seed); cells are independent."""
    keys = sorted({(float(l), int(s)) for l in lambdas for s in seeds})
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda k: run_cell(bench, *k), keys))
    else:
        cells = [run_cell(bench, *k) for k in keys]
    return SweepResult(cells, bench.kl_grid, bench.kl_budget)
