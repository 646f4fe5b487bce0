"""Experiment pipelines behind the CLI subcommands.

Each ``run_*`` takes plain, already validated parameters and returns a mapping
from output file name to its text, so the CLI only has to write files and the
tests can call the same code without touching disk.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import replace

import numpy as np

from . import dual, lab
from .downstream import FinetuneConfig, conflict_benchmark, lambda_sweep, run_cell
from .env import (PromptDist, TabularPolicy, TableReward, VocabSpec, policy_to_dict, reward_from_dict,
                  sample_group, trajectory_set)
from .estimators import ClipSpec, RiskSpec
from .objectives import (ObjectiveConfig, finite_diff_check, frpo_gradient_onpolicy, frpo_objective,
                         grpo_gradient_onpolicy, grpo_objective)
from .trainer import TrainConfig, train


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    v = float(v)
    return "inf" if math.isinf(v) else repr(v)


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# dual-check


def run_dual_check(n_instances: int = 200, first_seed: int = 0, rho: float | None = None) -> dict:
    rows = []
    for seed in range(first_seed, first_seed + n_instances):
        inst = dual.random_instance(seed, rho)
        wc = dual.worst_case_q(inst)
        value, _ = dual.dual_value(inst)
        rows.append([seed, _num(inst.rho), _num(wc.primal_value), _num(value),
                     _num(abs(wc.primal_value - value)), _num(wc.lambda_star)])
    return {"dual_check.csv": _csv(["instance_seed", "rho", "primal", "dual", "gap", "lambda_star"], rows)}


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_instance(seed: int, group_size: int = 4):
    """Random (policy, reference, frozen groups) triple on a small vocabulary."""
    vocab = VocabSpec(3, 0, 2)
    rng = np.random.default_rng([int(seed), 29])
    C = 2
    policy = TabularPolicy(rng.standard_normal((C, vocab.max_len, vocab.n_prev, vocab.vocab_size)), vocab)
    ref = TabularPolicy(policy.logits + 0.3 * rng.standard_normal(policy.logits.shape), vocab)
    reward = TableReward(rng.random((C, len(trajectory_set(vocab)))))
    groups = [sample_group(policy, c, group_size, reward, [int(seed), 31, c]) for c in range(C)]
    return policy, ref, groups


def gradcheck_cases(policy, ref, groups, lam: float, beta: float, h: float = 1e-5):
    """FD reports for on-policy FRPO (jackknife off and on) and GRPO gradients."""
    out = []
    for jk in (False, True):
        cfg = ObjectiveConfig(RiskSpec(lam), ClipSpec(0.2), beta, use_baseline=True, use_jackknife=jk)
        grad = frpo_gradient_onpolicy(groups, policy, ref, cfg)
        rep = finite_diff_check(lambda q: frpo_objective(groups, q, policy, ref, cfg, offset_free=True),
                                policy, h, grad)
        out.append(("FRPO" + ("+jackknife" if jk else ""), rep))
    cfg = ObjectiveConfig(RiskSpec.infinite(), ClipSpec(0.2), beta)
    grad = grpo_gradient_onpolicy(groups, policy, ref, cfg)
    out.append(("GRPO", finite_diff_check(lambda q: grpo_objective(groups, q, policy, ref, cfg), policy, h, grad)))
    return out


def run_gradcheck(n_instances: int = 20, first_seed: int = 0, lambdas=(0.1, 0.5, 2.0, 10.0, 1e8),
                  betas=(0.0, 0.05), h: float = 1e-5, rel_tol: float = 1e-5) -> dict:
    rows = []
    for seed in range(first_seed, first_seed + n_instances):
        policy, ref, groups = gradcheck_instance(seed)
        for lam in lambdas:
            for beta in betas:
                for name, rep in gradcheck_cases(policy, ref, groups, lam, beta, h):
                    if name == "GRPO" and lam != lambdas[0]:
                        continue  # GRPO does not depend on lambda
                    rows.append([seed, name, _num(lam if name != "GRPO" else math.inf), _num(beta),
                                 _num(rep.max_rel_err), _num(rep.mean_rel_err), _num(rep.max_abs_err_small),
                                 rep.n_checked, int(rep.passed(rel_tol))])
    header = ["instance_seed", "gradient", "lambda", "beta", "max_rel_err", "mean_rel_err",
              "max_abs_err_small", "n_checked", "passed"]
    return {"gradcheck.csv": _csv(header, rows)}


# ---------------------------------------------------------------------------
# estimator lab


def run_estimator_bias(lam: float = 0.3, G_list=(3, 4, 6, 8, 12, 16, 24, 32), n_mc: int = 100_000,
                       seed: int = 0) -> dict:
    policy, reward, prompt = lab.committed_bias_instance()
    report = lab.bias_sweep(policy, reward, lam, G_list, n_mc, seed, prompt)
    return {"bias_report.csv": report.to_csv()}


def run_variance_study(lambdas=(0.1, 1.0, 10.0, 1e4), n_mc: int = 100_000, seed: int = 0,
                       group_size: int = 8, weighting: str = "sequence") -> dict:
    policy, reward, prompt = lab.committed_bias_instance()
    report = lab.variance_study(policy, reward, lambdas, n_mc, seed, group_size, prompt,
                                weighting=weighting)
    return {"variance_report.csv": report.to_csv()}


# ---------------------------------------------------------------------------
# train / finetune / sweep


def build_policy(vocab: VocabSpec, n_contexts: int, init: dict) -> TabularPolicy:
    if init["kind"] == "uniform":
        return TabularPolicy.uniform(vocab, n_contexts)
    return TabularPolicy.random(vocab, n_contexts, seed=init["seed"], scale=init["scale"])


def run_train(vocab: VocabSpec, n_contexts: int, init: dict, reward_doc: dict, prompt_probs,
              train_cfg: TrainConfig, workers: int = 1) -> dict:
    ref = build_policy(vocab, n_contexts, init)
    reward = reward_from_dict(reward_doc)
    prompt = PromptDist.uniform(n_contexts) if prompt_probs is None else PromptDist(np.asarray(prompt_probs))
    final, log = train(prompt, reward, ref, train_cfg, workers=workers)
    return {"train_log.csv": log.to_csv(), "initial_policy.json": _json(policy_to_dict(ref)),
            "final_policy.json": _json(policy_to_dict(final))}


def _benchmark(params: dict):
    return conflict_benchmark(params["n_contexts"], params["iterations"], params["sft_steps"])


def _retention_rows(lam, seed, trace):
    return [[_num(lam), seed, _num(k), _num(r), _num(m)]
            for k, r, m in zip(trace.kl, trace.base_reward, trace.downstream_metric)]


RETENTION_HEADER = ["lambda", "seed", "kl", "base_reward", "downstream_metric"]


def run_finetune(benchmark: dict, lam: float, seeds, mode: str = "SFT", rl_iterations: int = 200) -> dict:
    bench = _benchmark(benchmark)
    if mode == "RL":
        ft = FinetuneConfig(mode="RL", eval_every=bench.finetune.eval_every,
                            downstream_reward=bench.finetune.downstream_reward,
                            train=replace(bench.train_template, iterations=rl_iterations),
                            task_contexts=bench.task)
        bench = replace(bench, finetune=ft)
    rows, out = [], {}
    for seed in sorted(set(int(s) for s in seeds)):
        cell = run_cell(bench, lam, seed)
        rows.extend(_retention_rows(lam, seed, cell.trace))
        out[f"base_policy_seed{seed}.json"] = _json(policy_to_dict(cell.base_policy))
    out["retention.csv"] = _csv(RETENTION_HEADER, rows)
    return out


def run_sweep(benchmark: dict, lambdas, seeds, workers: int = 1) -> dict:
    res = lambda_sweep(_benchmark(benchmark), lambdas, seeds, workers=workers)
    return {"retention.csv": res.retention_csv(), "sweep_summary.csv": res.summary_csv()}
