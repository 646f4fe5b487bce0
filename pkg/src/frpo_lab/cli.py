"""Command-line entry point: ``frpo-lab <subcommand> --config <path|defaults> ...``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when a
numerical routine gives up (divergence, bisection failure).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

from . import pipelines
from .env import VocabSpec, reward_from_dict
from .errors import ConfigError, FrpoLabError, NumericalFailure
from .trainer import TrainConfig

SUBCOMMANDS = ("train", "finetune", "sweep-lambda", "dual-check", "estimator-bias", "variance-study",
               "gradcheck")
WORKERS_ENV = "FRPO_LAB_WORKERS"


# ---------------------------------------------------------------------------
# schema


class Field:
    def __init__(self, *types, nullable=False, lam=False, freeform=False, items=None):
        self.types = types
        self.nullable = nullable
        self.lam = lam  # number or the string "inf"
        self.freeform = freeform
        self.items = items  # element Field for lists

    def check(self, value, path, problems):
        if value is None:
            if not self.nullable:
                problems.append(f"{path}: must not be null")
            return
        if self.freeform:
            return
        if self.lam and value == "inf":
            return
        if isinstance(value, bool) and bool not in self.types:
            problems.append(f"{path}: expected {self._names()}, got a boolean")
            return
        if float in self.types and isinstance(value, int) and not isinstance(value, bool):
            return
        if not isinstance(value, self.types):
            problems.append(f"{path}: expected {self._names()}, got {type(value).__name__}")
            return
        if self.items is not None:
            for k, v in enumerate(value):
                self.items.check(v, f"{path}[{k}]", problems)

    def _names(self):
        names = [t.__name__ for t in self.types]
        if self.lam:
            names.append('"inf"')
        return " or ".join(names)


INT, FLOAT, BOOL, STR = Field(int), Field(float), Field(bool), Field(str)
LAM = Field(float, lam=True)

TRAIN_SCHEMA = {
    "algorithm": STR, "lam": LAM, "beta": FLOAT, "epsilon": FLOAT, "group_size": INT,
    "learning_rate": FLOAT, "momentum": FLOAT, "iterations": INT, "sync_every": INT,
    "minibatch_contexts": Field(int, nullable=True), "use_baseline": BOOL, "use_jackknife": BOOL,
    "weighting": STR, "normalize_risk_scale": BOOL,
}
BENCH_SCHEMA = {"n_contexts": INT, "iterations": INT, "sft_steps": INT}
COMMON = {"seed": INT, "output_dir": Field(str, nullable=True)}

SCHEMAS = {
    "train": {**COMMON, "vocab": {"vocab_size": INT, "eos_token": INT, "max_len": INT},
              "n_contexts": INT, "init": {"kind": STR, "seed": INT, "scale": FLOAT},
              "reward": Field(dict, freeform=True),
              "prompt_probs": Field(list, nullable=True, items=FLOAT), "train": TRAIN_SCHEMA},
    "finetune": {**COMMON, "benchmark": BENCH_SCHEMA, "lam": LAM, "mode": STR, "rl_iterations": INT},
    "sweep-lambda": {**COMMON, "benchmark": BENCH_SCHEMA, "lambdas": Field(list, items=LAM), "n_seeds": INT},
    "dual-check": {**COMMON, "n_instances": INT, "rho": Field(float, nullable=True)},
    "estimator-bias": {**COMMON, "lam": LAM, "G_list": Field(list, items=INT), "n_mc": INT},
    "variance-study": {**COMMON, "lambdas": Field(list, items=LAM), "n_mc": INT, "group_size": INT,
                       "weighting": STR},
    "gradcheck": {**COMMON, "n_instances": INT, "lambdas": Field(list, items=LAM),
                  "betas": Field(list, items=FLOAT), "h": FLOAT, "rel_tol": FLOAT},
}


def default_config(subcommand: str) -> dict:
    text = resources.files("frpo_lab").joinpath("configs", f"{subcommand}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(schema: dict, defaults: dict, doc: dict, path: str, problems: list) -> dict:
    if not isinstance(doc, dict):
        problems.append(f"{path or '<root>'}: expected an object")
        return copy.deepcopy(defaults)
    for key in sorted(set(doc) - set(schema)):
        problems.append(f"{path}{key}: unknown key")
    out = {}
    for key, spec in schema.items():
        sub = f"{path}{key}"
        if isinstance(spec, dict):
            out[key] = _merge(spec, defaults[key], doc.get(key, {}), sub + ".", problems)
        else:
            value = doc.get(key, copy.deepcopy(defaults[key]))
            spec.check(value, sub, problems)
            out[key] = value
    return out


def resolve_config(subcommand: str, doc: dict) -> dict:
    """Fill defaults and validate; raises ConfigError naming every offending key."""
    problems: list = []
    cfg = _merge(SCHEMAS[subcommand], default_config(subcommand), doc, "", problems)
    if problems:
        raise ConfigError(problems)
    _semantic_checks(subcommand, cfg)
    return cfg


def _lam(v) -> float:
    return math.inf if v == "inf" else float(v)


def _train_config(d: dict, seed: int) -> TrainConfig:
    return TrainConfig(**{**d, "lam": _lam(d["lam"])}, seed=seed)


def _semantic_checks(subcommand, cfg):
    problems = []
    try:
        if subcommand == "train":
            VocabSpec(**cfg["vocab"])
            reward_from_dict(cfg["reward"])
            _train_config(cfg["train"], cfg["seed"])
            if cfg["init"]["kind"] not in ("uniform", "random"):
                problems.append("init.kind: must be 'uniform' or 'random'")
        elif subcommand == "finetune" and cfg["mode"] not in ("SFT", "RL"):
            problems.append("mode: must be 'SFT' or 'RL'")
        elif subcommand == "variance-study" and cfg["weighting"] not in ("token_avg", "sequence"):
            problems.append("weighting: must be 'token_avg' or 'sequence'")
    except (ValueError, KeyError, TypeError) as exc:
        problems.append(str(exc))
    if problems:
        raise ConfigError(problems)


# ---------------------------------------------------------------------------
# dispatch


def _run(subcommand: str, cfg: dict, workers: int) -> dict:
    seed = cfg["seed"]
    if subcommand == "train":
        return pipelines.run_train(VocabSpec(**cfg["vocab"]), cfg["n_contexts"], cfg["init"], cfg["reward"],
                                   cfg["prompt_probs"], _train_config(cfg["train"], seed), workers)
    if subcommand == "finetune":
        return pipelines.run_finetune(cfg["benchmark"], _lam(cfg["lam"]), [seed], cfg["mode"],
                                      cfg["rl_iterations"])
    if subcommand == "sweep-lambda":
        seeds = [seed + k for k in range(cfg["n_seeds"])]
        return pipelines.run_sweep(cfg["benchmark"], [_lam(v) for v in cfg["lambdas"]], seeds, workers)
    if subcommand == "dual-check":
        return pipelines.run_dual_check(cfg["n_instances"], seed, cfg["rho"])
    if subcommand == "estimator-bias":
        return pipelines.run_estimator_bias(_lam(cfg["lam"]), cfg["G_list"], cfg["n_mc"], seed)
    if subcommand == "variance-study":
        return pipelines.run_variance_study([_lam(v) for v in cfg["lambdas"]], cfg["n_mc"], seed,
                                            cfg["group_size"], cfg["weighting"])
    if subcommand == "gradcheck":
        return pipelines.run_gradcheck(cfg["n_instances"], seed, [_lam(v) for v in cfg["lambdas"]],
                                       cfg["betas"], cfg["h"], cfg["rel_tol"])
    raise ConfigError(f"unknown subcommand {subcommand!r}")


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def manifest(subcommand: str, cfg: dict, outputs: dict) -> dict:
    hashed = {k: v for k, v in cfg.items() if k != "output_dir"}
    canonical = json.dumps({"subcommand": subcommand, "config": hashed}, sort_keys=True)
    return {
        "subcommand": subcommand,
        "config": cfg,
        "input_hash": _sha256(canonical),
        "outputs": {name: _sha256(text) for name, text in sorted(outputs.items())},
    }


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frpo-lab", description="GRPO/FRPO tabular laboratory")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default="defaults", help="JSON config path, or 'defaults'")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    return parser


def _workers(flag) -> int:
    if flag is not None:
        n = flag
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("--workers must be >= 1")
    return n


def dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        workers = _workers(args.workers)
        if args.config == "defaults":
            doc = {}
        else:
            try:
                doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from None
            if isinstance(doc, dict) and "input_hash" in doc:
                # a previous run's manifest: rerun its resolved config verbatim
                doc = doc.get("config", {})
        if args.seed is not None:
            if not isinstance(doc, dict):
                raise ConfigError("<root>: expected an object")
            doc = {**doc, "seed": args.seed}
        if args.output_dir is not None and isinstance(doc, dict):
            doc = {**doc, "output_dir": args.output_dir}
        cfg = resolve_config(args.subcommand, doc)
        if cfg["output_dir"] is None:
            cfg["output_dir"] = str(Path("runs") / args.subcommand)
        outputs = _run(args.subcommand, cfg, workers)
    except ConfigError as exc:
        print("frpo-lab: configuration error", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"frpo-lab: numerical failure: {exc}", file=sys.stderr)
        return 2
    except FrpoLabError as exc:
        print(f"frpo-lab: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in outputs.items():
        (out_dir / name).write_bytes(text.encode("utf-8"))
    doc = manifest(args.subcommand, cfg, outputs)
    (out_dir / "manifest.json").write_bytes((json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    print(f"wrote {len(outputs)} file(s) and manifest.json to {out_dir}")
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
