import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from frpo_lab.env import (CompositeReward, Group, PromptDist, TableReward, TabularPolicy, TargetMatchReward,
                          Trajectory, VocabSpec, enumerate_trajectories, exact_kl, expected_reward,
                          load_policy, load_reward, policy_from_dict, policy_to_dict, reward_from_dict,
                          reward_to_dict, sample_group, sample_tokens, save_policy, save_reward, stream,
                          token_averaged_kl, trajectory_set)
from frpo_lab.errors import DegenerateGroup, EnumerationTooLarge, ShapeMismatch

SMALL_VOCABS = [VocabSpec(2, 0, 1), VocabSpec(2, 0, 2), VocabSpec(3, 0, 2), VocabSpec(3, 2, 3),
                VocabSpec(4, 0, 3)]


def brute_force_probs(policy, x):
    """Plain-Python product of next-token softmax probabilities along each trajectory."""
    probs = policy.probs
    out = []
    for seq in trajectory_set(policy.vocab).sequences:
        p, prev = 1.0, 0
        for t, tok in enumerate(seq):
            p *= probs[x, t, prev, tok]
            prev = tok + 1
        out.append(p)
    return np.array(out)


# ---------------------------------------------------------------------------
# vocab / enumeration


def test_vocab_rejects_bad_specs():
    with pytest.raises(ValueError):
        VocabSpec(3, 3, 2)
    with pytest.raises(ValueError):
        VocabSpec(3, 0, 0)


def test_enumeration_bound_is_enforced():
    with pytest.raises(EnumerationTooLarge):
        trajectory_set(VocabSpec(16, 0, 6))
    with pytest.raises(EnumerationTooLarge):
        trajectory_set(VocabSpec(3, 0, 4, enumeration_bound=50))


def test_length_one_base_case():
    pol = TabularPolicy.uniform(VocabSpec(2, 0, 1), 1)
    traj = enumerate_trajectories(pol, 0)
    assert len(traj) == 2
    assert sum(p for _, p in traj) == pytest.approx(1.0, abs=1e-15)


def test_uniform_eos_first_probability():
    pol = TabularPolicy.uniform(VocabSpec(2, 0, 2), 1)
    probs = dict((t.tokens, p) for t, p in enumerate_trajectories(pol, 0))
    assert probs[(0,)] == 0.5
    assert set(probs) == {(0,), (1, 0), (1, 1)}


@pytest.mark.parametrize("vocab", SMALL_VOCABS, ids=str)
def test_every_trajectory_appears_once(vocab):
    ts = trajectory_set(vocab)
    assert len(set(ts.sequences)) == len(ts)
    V, T = vocab.vocab_size, vocab.max_len
    # (V-1)^(L-1) sequences end in EOS at each L < T, and (V-1)^(T-1) * V run to the cap
    expected = sum((V - 1) ** (L - 1) for L in range(1, T)) + (V - 1) ** (T - 1) * V
    assert len(ts) == expected
    for seq in ts.sequences:
        Trajectory(0, seq).validate(vocab)
    np.testing.assert_array_equal(ts.index_of(ts.tokens), np.arange(len(ts)))


@pytest.mark.parametrize("vocab", SMALL_VOCABS, ids=str)
def test_trajectory_probs_match_brute_force(vocab):
    pol = TabularPolicy.random(vocab, 2, seed=4, scale=2.0)
    for x in range(2):
        np.testing.assert_allclose(pol.trajectory_probs[x], brute_force_probs(pol, x), rtol=1e-12)


def test_enumeration_matches_monte_carlo():
    vocab = VocabSpec(4, 0, 3)
    pol = TabularPolicy.random(vocab, 1, seed=7)
    ts = trajectory_set(vocab)
    tokens, _ = sample_tokens(pol, 0, 10**6, stream(7, 99))
    freq = np.bincount(ts.index_of(tokens), minlength=len(ts)) / 10**6
    assert np.abs(freq - pol.trajectory_probs[0]).max() < 3e-3


def test_invalid_trajectories_rejected():
    vocab = VocabSpec(3, 0, 3)
    with pytest.raises(ValueError):
        Trajectory(0, (1, 0, 2)).validate(vocab)  # token after EOS
    with pytest.raises(ValueError):
        Trajectory(0, (1, 2)).validate(vocab)  # neither EOS nor cap
    with pytest.raises(ValueError):
        Trajectory(0, ()).validate(vocab)


# ---------------------------------------------------------------------------
# groups


def test_constant_reward_gives_zero_advantages():
    vocab = VocabSpec(3, 0, 2)
    pol = TabularPolicy.random(vocab, 2, seed=1)
    reward = TableReward.constant(0.7, vocab, 2)
    for G in (2, 5, 17):
        g = sample_group(pol, 1, G, reward, [3, G])
        assert np.all(g.advantages == 0.0)


def test_advantage_example():
    g = Group.from_tokens(0, np.array([[0, -1]] * 4), [1.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(g.advantages, [0.5, -0.5, 0.5, -0.5])


def test_degenerate_group():
    pol = TabularPolicy.uniform(VocabSpec(3, 0, 2), 1)
    with pytest.raises(DegenerateGroup):
        sample_group(pol, 0, 1, TableReward.constant(0.0, pol.vocab, 1), 0)


def test_group_frequencies_within_binomial_bounds():
    vocab = VocabSpec(3, 0, 2)
    pol = TabularPolicy.random(vocab, 1, seed=2)
    reward = TableReward.constant(0.0, vocab, 1)
    ts = trajectory_set(vocab)
    G, n = 4, 10**5
    counts = np.zeros(len(ts))
    for k in range(n):
        counts += np.bincount(ts.index_of(sample_group(pol, 0, G, reward, [5, k]).tokens), minlength=len(ts))
    p = pol.trajectory_probs[0]
    N = G * n
    sigma = np.sqrt(p * (1 - p) / N)
    assert np.all(np.abs(counts / N - p) <= 3 * sigma + 1e-12)


def test_sample_group_is_reproducible():
    pol = TabularPolicy.random(VocabSpec(4, 0, 3), 3, seed=0)
    reward = TargetMatchReward([(1, 2, 0)] * 3)
    a = sample_group(pol, 2, 8, reward, stream(11, 0, 5, 2))
    b = sample_group(pol, 2, 8, reward, stream(11, 0, 5, 2))
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    c = sample_group(pol, 2, 8, reward, stream(11, 0, 6, 2))
    assert not np.array_equal(a.tokens, c.tokens)


def test_subgroup_copies_and_keeps_advantages():
    g = Group.from_tokens(0, np.array([[1, 0], [0, -1], [1, 1]]), [0.2, 0.5, 0.8])
    sub = g.subgroup([0, 2])
    np.testing.assert_array_equal(sub.advantages, g.advantages[[0, 2]])
    assert not np.shares_memory(sub.tokens, g.tokens)


# ---------------------------------------------------------------------------
# rewards


def test_reward_models_are_bounded_and_deterministic():
    vocab = VocabSpec(4, 0, 3)
    tm = TargetMatchReward([(1, 2, 0), (3, 3, 3)])
    tab = tm.table(vocab, 2)
    assert tab.min() >= 0 and tab.max() <= 1
    assert tm(0, (1, 2, 0), vocab, 2) == 1.0
    assert tm(1, (3, 3, 3), vocab, 2) == 1.0
    np.testing.assert_array_equal(tab, tm.table(vocab, 2))
    comp = CompositeReward(tm, TableReward.constant(1.0, vocab, 2), 0.25, [0, 1], [1])
    ctab = comp.table(vocab, 2)
    assert ctab.min() >= 0 and ctab.max() <= 1
    np.testing.assert_array_equal(ctab[0], tab[0])  # second component inactive on context 0
    np.testing.assert_allclose(ctab[1], 0.25 * tab[1] + 0.75)
    bad = TableReward(np.full((1, len(trajectory_set(vocab))), 1.5))
    with pytest.raises(ValueError):
        bad.cached_table(vocab, 1)  # range is checked when the table is first used


def test_rewards_for_matches_call():
    vocab = VocabSpec(3, 0, 3)
    reward = TableReward(np.random.default_rng(0).random((2, len(trajectory_set(vocab)))))
    pol = TabularPolicy.random(vocab, 2, seed=3)
    tokens, _ = sample_tokens(pol, 1, 20, stream(0))
    got = reward.rewards_for(1, tokens, vocab, 2)
    for row, r in zip(tokens, got):
        assert r == reward(1, tuple(int(v) for v in row[row >= 0]), vocab, 2)


# ---------------------------------------------------------------------------
# KL and expectations


def test_kl_identity_and_shift_invariance():
    vocab = VocabSpec(4, 0, 3)
    a = TabularPolicy.random(vocab, 3, seed=0)
    prompt = PromptDist.uniform(3)
    assert exact_kl(a, a, prompt) == 0.0
    shift = np.random.default_rng(1).standard_normal(a.logits.shape[:-1])[..., None]
    b = a.with_logits(a.logits + shift)
    assert exact_kl(a, b, prompt) < 1e-14


def test_kl_matches_enumeration():
    vocab = VocabSpec(4, 0, 3)
    a = TabularPolicy.random(vocab, 2, seed=3)
    b = TabularPolicy.random(vocab, 2, seed=30)
    prompt = PromptDist(np.array([0.3, 0.7]))
    total = 0.0
    for x in range(2):
        pa, pb = brute_force_probs(a, x), brute_force_probs(b, x)
        total += prompt.probs[x] * sum(p * np.log(p / q) for p, q in zip(pa, pb))
    assert exact_kl(a, b, prompt) == pytest.approx(total, rel=1e-10)
    assert exact_kl(a, b, prompt) != pytest.approx(exact_kl(b, a, prompt), rel=1e-3)


def test_kl_shape_mismatch():
    a = TabularPolicy.uniform(VocabSpec(3, 0, 2), 2)
    with pytest.raises(ShapeMismatch):
        exact_kl(a, TabularPolicy.uniform(VocabSpec(3, 0, 2), 3), PromptDist.uniform(2))
    with pytest.raises(ShapeMismatch):
        exact_kl(a, TabularPolicy.uniform(VocabSpec(4, 0, 2), 2), PromptDist.uniform(2))


def test_token_averaged_kl_by_hand():
    vocab = VocabSpec(3, 0, 2)
    a = TabularPolicy.random(vocab, 1, seed=5)
    b = TabularPolicy.random(vocab, 1, seed=6)
    pa, lpa, lpb = a.probs, a.log_probs, b.log_probs
    total = 0.0
    for seq, w in zip(trajectory_set(vocab).sequences, brute_force_probs(a, 0)):
        prev, acc = 0, 0.0
        for t, tok in enumerate(seq):
            acc += float((pa[0, t, prev] * (lpa[0, t, prev] - lpb[0, t, prev])).sum())
            prev = tok + 1
        total += w * acc / len(seq)
    assert token_averaged_kl(a, b, PromptDist.uniform(1)) == pytest.approx(total, rel=1e-12)


def test_expected_reward_by_enumeration():
    vocab = VocabSpec(3, 0, 3)
    pol = TabularPolicy.random(vocab, 2, seed=8)
    reward = TargetMatchReward([(1, 0), (2, 2, 1)])
    prompt = PromptDist(np.array([0.25, 0.75]))
    direct = sum(prompt.probs[x] * p * reward(x, t.tokens, vocab, 2)
                 for x in range(2) for t, p in enumerate_trajectories(pol, x))
    assert expected_reward(pol, reward, prompt) == pytest.approx(direct, rel=1e-13)


def test_prompt_dist_validation():
    with pytest.raises(ValueError):
        PromptDist(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        PromptDist(np.array([-0.1, 1.1]))


# ---------------------------------------------------------------------------
# serialisation


def test_policy_round_trip_is_exact(tmp_path):
    pol = TabularPolicy.random(VocabSpec(4, 1, 3), 2, seed=12, scale=3.0)
    path = tmp_path / "policy.json"
    save_policy(path, pol)
    back = load_policy(path)
    np.testing.assert_array_equal(back.logits, pol.logits)
    assert back.vocab == pol.vocab
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["version"] == 1
    assert np.array(doc["logits"]).shape == pol.logits.shape
    with pytest.raises(ValueError):
        policy_from_dict({**policy_to_dict(pol), "version": 2})


def test_reward_round_trip(tmp_path):
    vocab = VocabSpec(4, 0, 3)
    reward = CompositeReward(TargetMatchReward([(1, 2, 0), (3, 0)]),
                             TableReward(np.random.default_rng(0).random((2, len(trajectory_set(vocab))))), 0.3,
                             [0, 1], [1])
    save_reward(tmp_path / "r.json", reward, vocab)
    back, v2 = load_reward(tmp_path / "r.json")
    assert v2 == vocab
    np.testing.assert_array_equal(back.table(vocab, 2), reward.table(vocab, 2))
    np.testing.assert_array_equal(reward_from_dict(reward_to_dict(reward)).table(vocab, 2), reward.table(vocab, 2))


# ---------------------------------------------------------------------------
# properties

vocabs = st.sampled_from(SMALL_VOCABS)


@given(vocabs, st.integers(0, 2**31), st.floats(0.1, 6.0))
def test_softmax_rows_and_enumeration_sum_to_one(vocab, seed, scale):
    pol = TabularPolicy.random(vocab, 2, seed=seed, scale=scale)
    assert np.abs(pol.probs.sum(axis=-1) - 1).max() <= 1e-12
    assert np.abs(pol.trajectory_probs.sum(axis=1) - 1).max() <= 1e-10


@given(vocabs, st.integers(0, 2**31), st.integers(0, 2**31))
def test_kl_nonnegative(vocab, s1, s2):
    a = TabularPolicy.random(vocab, 2, seed=s1, scale=2.0)
    b = TabularPolicy.random(vocab, 2, seed=s2, scale=2.0)
    prompt = PromptDist.uniform(2)
    assert exact_kl(a, b, prompt) >= 0
    assert exact_kl(a, a, prompt) == 0
    assert token_averaged_kl(a, b, prompt) >= 0


@given(st.lists(st.floats(0, 1), min_size=2, max_size=32))
def test_advantages_centered(rewards):
    g = Group.from_tokens(0, np.zeros((len(rewards), 1), dtype=int), rewards)
    assert abs(g.advantages.sum()) <= 1e-12 * max(1, len(rewards))
    np.testing.assert_allclose(g.advantages, g.rewards - g.rewards.mean(), rtol=0, atol=1e-15)
    if len(set(rewards)) == 1:
        assert np.all(g.advantages == 0.0)


@given(vocabs, st.integers(0, 2**31), st.integers(2, 12))
def test_sampled_trajectories_are_valid(vocab, seed, G):
    pol = TabularPolicy.random(vocab, 1, seed=seed, scale=2.0)
    g = sample_group(pol, 0, G, TableReward.constant(0.5, vocab, 1), seed)
    for traj in g.trajectories:
        traj.validate(vocab)
    np.testing.assert_array_equal(g.lengths, [len(t) for t in g.trajectories])
