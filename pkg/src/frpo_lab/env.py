"""Tabular autoregressive policies, trajectory enumeration and sampling, rewards.

Logits of a :class:`TabularPolicy` are indexed ``[context, position, prev, token]``
where ``prev == 0`` is the beginning-of-sequence slot and ``prev == v + 1`` means
the previous token was ``v``. A trajectory stops at the first EOS token or after
``max_len`` tokens, so its length counts the EOS when present.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import DegenerateGroup, EnumerationTooLarge, ShapeMismatch

BOS = 0
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class VocabSpec:
    vocab_size: int
    eos_token: int
    max_len: int
    enumeration_bound: int = 10**6

    def __post_init__(self):
        if not 1 <= self.vocab_size <= 16:
            raise ValueError(f"vocab_size must be in [1, 16], got {self.vocab_size}")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ValueError(f"eos_token {self.eos_token} outside [0, {self.vocab_size})")
        if not 1 <= self.max_len <= 6:
            raise ValueError(f"max_len must be in [1, 6], got {self.max_len}")

    @property
    def n_prev(self) -> int:
        return self.vocab_size + 1

    def check_enumerable(self):
        size = self.vocab_size**self.max_len
        if size > self.enumeration_bound:
            raise EnumerationTooLarge(
                f"V^T_max = {size} exceeds enumeration bound {self.enumeration_bound}"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "eos_token": self.eos_token,
            "max_len": self.max_len,
            "enumeration_bound": self.enumeration_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        return cls(
            int(d["vocab_size"]),
            int(d["eos_token"]),
            int(d["max_len"]),
            int(d.get("enumeration_bound", 10**6)),
        )


@dataclass(frozen=True)
class PromptDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("prompt distribution must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("prompt probabilities must be >= 0 and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_contexts: int) -> "PromptDist":
        return cls(np.full(n_contexts, 1.0 / n_contexts))

    @property
    def n_contexts(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class Trajectory:
    context: int
    tokens: tuple

    def __len__(self):
        return len(self.tokens)

    def validate(self, vocab: VocabSpec):
        toks = self.tokens
        if not 1 <= len(toks) <= vocab.max_len:
            raise ValueError(f"trajectory length {len(toks)} outside [1, {vocab.max_len}]")
        if any(not 0 <= t < vocab.vocab_size for t in toks):
            raise ValueError("token id out of range")
        if vocab.eos_token in toks[:-1]:
            raise ValueError("token after EOS")
        if toks[-1] != vocab.eos_token and len(toks) != vocab.max_len:
            raise ValueError("trajectory must end with EOS or have length max_len")


class TrajectorySet:
    """Every valid token sequence for a vocabulary, as padded index arrays."""

    def __init__(self, vocab: VocabSpec):
        vocab.check_enumerable()
        V, T, eos = vocab.vocab_size, vocab.max_len, vocab.eos_token
        non_eos = [v for v in range(V) if v != eos]
        seqs = []
        for L in range(1, T + 1):
            for prefix in itertools.product(non_eos, repeat=L - 1):
                if L < T:
                    seqs.append(prefix + (eos,))
                else:
                    seqs.extend(prefix + (last,) for last in range(V))
        K = len(seqs)
        tokens = np.full((K, T), -1, dtype=np.int64)
        for k, s in enumerate(seqs):
            tokens[k, : len(s)] = s
        self.vocab = vocab
        self.sequences = seqs
        self.tokens = tokens
        self.lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        self.mask = tokens >= 0
        self.prev = prev_index(tokens)
        keys = encode(tokens, vocab)
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]

    def __len__(self):
        return len(self.sequences)

    def index_of(self, tokens: np.ndarray) -> np.ndarray:
        """Enumeration indices of padded token rows."""
        keys = encode(np.atleast_2d(tokens), self.vocab)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        if np.any(self._sorted_keys[pos] != keys):
            raise ValueError("token rows are not valid trajectories")
        return self._order[pos]


def encode(tokens: np.ndarray, vocab: VocabSpec) -> np.ndarray:
    base = vocab.vocab_size + 1
    weights = base ** np.arange(tokens.shape[-1], dtype=np.int64)
    return ((tokens + 1) * weights).sum(axis=-1)


def prev_index(tokens: np.ndarray) -> np.ndarray:
    """Row index of the previous-token slot for every position (0 = BOS)."""
    prev = np.zeros_like(tokens)
    prev[..., 1:] = tokens[..., :-1] + 1
    prev[tokens < 0] = 0
    return prev


@functools.lru_cache(maxsize=32)
def trajectory_set(vocab: VocabSpec) -> TrajectorySet:
    return TrajectorySet(vocab)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    logits: np.ndarray
    vocab: VocabSpec

    def __post_init__(self):
        arr = np.array(self.logits, dtype=float)
        v = self.vocab
        if arr.ndim != 4 or arr.shape[1:] != (v.max_len, v.n_prev, v.vocab_size):
            raise ShapeMismatch(
                f"logits shape {arr.shape} incompatible with "
                f"(C, {v.max_len}, {v.n_prev}, {v.vocab_size})"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @classmethod
    def uniform(cls, vocab: VocabSpec, n_contexts: int) -> "TabularPolicy":
        shape = (n_contexts, vocab.max_len, vocab.n_prev, vocab.vocab_size)
        return cls(np.zeros(shape), vocab)

    @classmethod
    def random(cls, vocab: VocabSpec, n_contexts: int, seed, scale: float = 1.0) -> "TabularPolicy":
        rng = np.random.default_rng(seed)
        shape = (n_contexts, vocab.max_len, vocab.n_prev, vocab.vocab_size)
        return cls(scale * rng.standard_normal(shape), vocab)

    def with_logits(self, logits: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(logits, self.vocab)

    @property
    def n_contexts(self) -> int:
        return self.logits.shape[0]

    @functools.cached_property
    def log_probs(self) -> np.ndarray:
        out = log_softmax(self.logits, axis=-1)
        out.setflags(write=False)
        return out

    @functools.cached_property
    def probs(self) -> np.ndarray:
        out = np.exp(self.log_probs)
        out.setflags(write=False)
        return out

    @functools.cached_property
    def trajectory_log_probs(self) -> np.ndarray:
        """``(C, K)`` log-probabilities of every enumerated trajectory."""
        ts = trajectory_set(self.vocab)
        lp = self.token_log_probs(np.arange(self.n_contexts)[:, None], ts.tokens[None])
        out = lp.sum(axis=-1)
        out.setflags(write=False)
        return out

    @property
    def trajectory_probs(self) -> np.ndarray:
        return np.exp(self.trajectory_log_probs)

    def token_log_probs(self, context, tokens: np.ndarray) -> np.ndarray:
        """Per-token log-probabilities of padded token arrays; 0 at padding.

        ``context`` broadcasts against the leading axes of ``tokens``.
        """
        ctx, tokens = np.broadcast_arrays(np.asarray(context)[..., None], np.asarray(tokens))
        pos = np.broadcast_to(np.arange(tokens.shape[-1]), tokens.shape)
        prev = prev_index(tokens)
        safe = np.where(tokens >= 0, tokens, 0)
        lp = self.log_probs[ctx, pos, prev, safe]
        return np.where(tokens >= 0, lp, 0.0)

    def check_compatible(self, other: "TabularPolicy"):
        if self.vocab != other.vocab or self.logits.shape != other.logits.shape:
            raise ShapeMismatch("policies differ in vocabulary or context count")


def log_ratio_rows(policy_a: TabularPolicy, policy_b: TabularPolicy) -> np.ndarray:
    """log(pi_a / pi_b) for every next-token row entry.

    For nearby logits the normaliser difference is taken as
    log1p(sum_k p_b,k expm1(d_k)), which avoids the cancellation of subtracting
    two log-softmaxes.
    """
    policy_a.check_compatible(policy_b)
    d = policy_a.logits - policy_b.logits
    near_rows = np.abs(d).max(axis=-1, keepdims=True) < 1.0
    dd = np.where(near_rows, d, 0.0)
    near = dd - np.log1p((policy_b.probs * np.expm1(dd)).sum(axis=-1, keepdims=True))
    return np.where(near_rows, near, policy_a.log_probs - policy_b.log_probs)


def token_log_ratio(policy_a: TabularPolicy, policy_b: TabularPolicy, context, tokens) -> np.ndarray:
    """Per-token log(pi_a / pi_b) of padded token arrays; 0 at padding."""
    table = log_ratio_rows(policy_a, policy_b)
    ctx, tokens = np.broadcast_arrays(np.asarray(context)[..., None], np.asarray(tokens))
    pos = np.broadcast_to(np.arange(tokens.shape[-1]), tokens.shape)
    safe = np.where(tokens >= 0, tokens, 0)
    out = table[ctx, pos, prev_index(tokens), safe]
    return np.where(tokens >= 0, out, 0.0)


def enumerate_trajectories(policy: TabularPolicy, x: int) -> list:
    ts = trajectory_set(policy.vocab)
    probs = policy.trajectory_probs[x]
    return [(Trajectory(int(x), s), float(p)) for s, p in zip(ts.sequences, probs)]


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) cell."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def sample_tokens(policy: TabularPolicy, x: int, n: int, rng: np.random.Generator):
    """Draw ``n`` trajectories token by token; returns padded tokens and lengths."""
    vocab = policy.vocab
    T = vocab.max_len
    tokens = np.full((n, T), -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    prev = np.zeros(n, dtype=np.int64)
    for t in range(T):
        # one uniform per row per step keeps stream consumption independent of EOS timing
        u = rng.random(n)
        cdf = np.cumsum(policy.probs[x, t, prev], axis=-1)
        tok = (u[:, None] >= cdf[:, :-1]).sum(axis=-1)
        tokens[alive, t] = tok[alive]
        alive &= tok != vocab.eos_token
        prev = tok + 1
        if not alive.any():
            break
    lengths = (tokens >= 0).sum(axis=1)
    return tokens, lengths


# ---------------------------------------------------------------------------
# rewards


class RewardModel:
    """Deterministic outcome reward r(x, y) in [0, 1]."""

    def table(self, vocab: VocabSpec, n_contexts: int) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, context: int, tokens: Sequence[int], vocab: VocabSpec, n_contexts: int) -> float:
        ts = trajectory_set(vocab)
        row = np.full(vocab.max_len, -1, dtype=np.int64)
        row[: len(tokens)] = tokens
        k = ts.index_of(row)[0]
        return float(self.cached_table(vocab, n_contexts)[context, k])

    def cached_table(self, vocab: VocabSpec, n_contexts: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_table_cache", {})
        key = (vocab, n_contexts)
        if key not in cache:
            tab = np.asarray(self.table(vocab, n_contexts), dtype=float)
            if tab.shape != (n_contexts, len(trajectory_set(vocab))):
                raise ShapeMismatch(f"reward table shape {tab.shape} is wrong")
            if np.any(tab < 0) or np.any(tab > 1) or not np.all(np.isfinite(tab)):
                raise ValueError("rewards must lie in [0, 1]")
            tab.setflags(write=False)
            cache[key] = tab
        return cache[key]

    def rewards_for(self, context, tokens: np.ndarray, vocab: VocabSpec, n_contexts: int) -> np.ndarray:
        ts = trajectory_set(vocab)
        idx = ts.index_of(tokens.reshape(-1, tokens.shape[-1])).reshape(tokens.shape[:-1])
        return self.cached_table(vocab, n_contexts)[context, idx]


class TableReward(RewardModel):
    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    @classmethod
    def constant(cls, value: float, vocab: VocabSpec, n_contexts: int) -> "TableReward":
        return cls(np.full((n_contexts, len(trajectory_set(vocab))), float(value)))

    def table(self, vocab, n_contexts):
        return self.values


class TargetMatchReward(RewardModel):
    """Position-wise agreement with a per-context target sequence.

    Score is the number of matching positions divided by the longer of the two
    lengths, so only the exact target scores 1.
    """

    def __init__(self, targets: Sequence[Sequence[int]]):
        self.targets = [tuple(int(v) for v in t) for t in targets]

    def table(self, vocab, n_contexts):
        if len(self.targets) != n_contexts:
            raise ShapeMismatch(f"{len(self.targets)} targets for {n_contexts} contexts")
        ts = trajectory_set(vocab)
        out = np.zeros((n_contexts, len(ts)))
        for c, target in enumerate(self.targets):
            Trajectory(c, target).validate(vocab)
            for k, seq in enumerate(ts.sequences):
                hits = sum(a == b for a, b in zip(seq, target))
                out[c, k] = hits / max(len(seq), len(target))
        return out


class CompositeReward(RewardModel):
    """Weighted mix of two rewards, each active on its own context subset.

    On contexts covered by both, the result is the weight-normalised average;
    on contexts covered by one, it is that component alone.
    """

    def __init__(self, first: RewardModel, second: RewardModel, first_weight: float,
                 first_contexts: Sequence[int], second_contexts: Sequence[int]):
        if not 0.0 <= first_weight <= 1.0:
            raise ValueError("first_weight must be in [0, 1]")
        self.first = first
        self.second = second
        self.first_weight = float(first_weight)
        self.first_contexts = sorted(int(c) for c in first_contexts)
        self.second_contexts = sorted(int(c) for c in second_contexts)

    def table(self, vocab, n_contexts):
        m1 = np.zeros(n_contexts)
        m1[self.first_contexts] = 1.0
        m2 = np.zeros(n_contexts)
        m2[self.second_contexts] = 1.0
        w1 = self.first_weight * m1
        w2 = (1.0 - self.first_weight) * m2
        total = w1 + w2
        if np.any(total <= 0):
            raise ValueError("every context needs a component with positive weight")
        t1 = self.first.cached_table(vocab, n_contexts)
        t2 = self.second.cached_table(vocab, n_contexts)
        return (w1[:, None] * t1 + w2[:, None] * t2) / total[:, None]


def reward_to_dict(reward: RewardModel) -> dict:
    if isinstance(reward, TableReward):
        return {"kind": "table", "values": reward.values.tolist()}
    if isinstance(reward, TargetMatchReward):
        return {"kind": "target_match", "targets": [list(t) for t in reward.targets]}
    if isinstance(reward, CompositeReward):
        return {
            "kind": "composite",
            "first": reward_to_dict(reward.first),
            "second": reward_to_dict(reward.second),
            "first_weight": reward.first_weight,
            "first_contexts": reward.first_contexts,
            "second_contexts": reward.second_contexts,
        }
    raise TypeError(f"cannot serialise {type(reward).__name__}")


def reward_from_dict(d: dict) -> RewardModel:
    kind = d["kind"]
    if kind == "table":
        return TableReward(d["values"])
    if kind == "target_match":
        return TargetMatchReward(d["targets"])
    if kind == "composite":
        return CompositeReward(
            reward_from_dict(d["first"]), reward_from_dict(d["second"]),
            d["first_weight"], d["first_contexts"], d["second_contexts"],
        )
    raise ValueError(f"unknown reward kind {kind!r}")


# ---------------------------------------------------------------------------
# groups


@dataclass(frozen=True, eq=False)
class Group:
    context: int
    tokens: np.ndarray
    lengths: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if tokens.ndim != 2 or rewards.shape != (tokens.shape[0],):
            raise ShapeMismatch("group tokens must be (G, T) with G rewards")
        if self.advantages is None:
            # centring about the first reward makes a constant group exactly zero
            d = rewards - (rewards[0] if rewards.size else 0.0)
            advantages = d - d.mean()
        else:
            advantages = np.asarray(self.advantages, dtype=float)
        lengths = np.asarray(self.lengths, dtype=np.int64)
        for name, arr in (("tokens", tokens), ("lengths", lengths),
                          ("rewards", rewards), ("advantages", advantages)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_tokens(cls, context: int, tokens: np.ndarray, rewards) -> "Group":
        tokens = np.asarray(tokens, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=float)
        if tokens.shape[0] < 2:
            raise DegenerateGroup(f"group size {tokens.shape[0]} < 2")
        return cls(int(context), tokens, (tokens >= 0).sum(axis=1), rewards)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.tokens >= 0

    @property
    def trajectories(self) -> list:
        return [Trajectory(self.context, tuple(int(v) for v in row[row >= 0])) for row in self.tokens]

    def subgroup(self, keep) -> "Group":
        """Copy restricted to ``keep`` indices, advantages carried over unchanged."""
        keep = np.asarray(keep)
        return Group(self.context, self.tokens[keep].copy(), self.lengths[keep].copy(),
                     self.rewards[keep].copy(), self.advantages[keep].copy())

    def with_rewards(self, rewards) -> "Group":
        return Group.from_tokens(self.context, self.tokens, rewards)


def sample_group(policy: TabularPolicy, x: int, G: int, reward: RewardModel, stream_seed) -> Group:
    """Sample ``G`` i.i.d. trajectories for context ``x`` and centre their rewards.

    ``stream_seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if G < 2:
        raise DegenerateGroup(f"group size {G} < 2")
    rng = stream_seed if isinstance(stream_seed, np.random.Generator) else np.random.default_rng(stream_seed)
    tokens, _ = sample_tokens(policy, x, G, rng)
    rewards = reward.rewards_for(x, tokens, policy.vocab, policy.n_contexts)
    return Group.from_tokens(x, tokens, rewards)


# ---------------------------------------------------------------------------
# exact quantities


def exact_kl(policy_a: TabularPolicy, policy_b: TabularPolicy, prompt_dist: PromptDist) -> float:
    """E_x KL(a(.|x) || b(.|x)) over whole trajectories, by enumeration."""
    policy_a.check_compatible(policy_b)
    if prompt_dist.n_contexts != policy_a.n_contexts:
        raise ShapeMismatch("prompt distribution size differs from context count")
    la = policy_a.trajectory_log_probs
    lb = policy_b.trajectory_log_probs
    per_ctx = (np.exp(la) * (la - lb)).sum(axis=1)
    return max(float(prompt_dist.probs @ per_ctx), 0.0)


def expected_reward(policy: TabularPolicy, reward: RewardModel, prompt_dist: PromptDist) -> float:
    tab = reward.cached_table(policy.vocab, policy.n_contexts)
    per_ctx = (policy.trajectory_probs * tab).sum(axis=1)
    return float(prompt_dist.probs @ per_ctx)


def token_averaged_kl(policy: TabularPolicy, ref: TabularPolicy, prompt_dist: PromptDist) -> float:
    """E_x E_{y~policy} [(1/|y|) sum_t KL of the next-token rows along y]."""
    policy.check_compatible(ref)
    row_kl = (policy.probs * (policy.log_probs - ref.log_probs)).sum(axis=-1)
    ts = trajectory_set(policy.vocab)
    C, T = policy.n_contexts, policy.vocab.max_len
    along = row_kl[np.arange(C)[:, None, None], np.arange(T)[None, None, :], ts.prev[None]]
    along = np.where(ts.mask[None], along, 0.0).sum(axis=-1) / ts.lengths[None]
    per_ctx = (policy.trajectory_probs * along).sum(axis=1)
    return float(prompt_dist.probs @ per_ctx)


# ---------------------------------------------------------------------------
# serialisation


def policy_to_dict(policy: TabularPolicy) -> dict:
    return {"version": SCHEMA_VERSION, "vocab": policy.vocab.to_dict(), "logits": policy.logits.tolist()}


def policy_from_dict(d: dict) -> TabularPolicy:
    if d.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    return TabularPolicy(np.array(d["logits"], dtype=float), VocabSpec.from_dict(d["vocab"]))


def save_policy(path, policy: TabularPolicy):
    # json writes floats with repr(), which round-trips IEEE-754 doubles exactly
    Path(path).write_text(json.dumps(policy_to_dict(policy)) + "\n", encoding="utf-8")


def load_policy(path) -> TabularPolicy:
    return policy_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_reward(path, reward: RewardModel, vocab: VocabSpec):
    doc = {"version": SCHEMA_VERSION, "vocab": vocab.to_dict(), "reward": reward_to_dict(reward)}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_reward(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported reward file version {doc.get('version')!r}")
    return reward_from_dict(doc["reward"]), VocabSpec.from_dict(doc["vocab"])
