import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from frpo_lab.env import Group, TableReward, TabularPolicy, Trajectory, VocabSpec, sample_group, trajectory_set
from frpo_lab.errors import NonDeterministicObjective
from frpo_lab.estimators import ClipSpec, RiskSpec, baseline_term, jackknife_log_partition, kl_estimator_k3
from frpo_lab.objectives import (ObjectiveConfig, finite_diff_check, frpo_gradient, frpo_gradient_onpolicy,
                                 frpo_objective, grpo_gradient, grpo_gradient_onpolicy, grpo_objective,
                                 pairwise_sum, scatter_score, score_gradient)

from oracles import naive_frpo_objective, naive_grpo_objective


def instance(seed, G=5, C=2, vocab=VocabSpec(3, 0, 2), drift=0.3, ref_drift=0.5):
    rng = np.random.default_rng([seed, 1])
    old = TabularPolicy(rng.standard_normal((C, vocab.max_len, vocab.n_prev, vocab.vocab_size)), vocab)
    theta = old.with_logits(old.logits + drift * rng.standard_normal(old.logits.shape))
    ref = old.with_logits(old.logits + ref_drift * rng.standard_normal(old.logits.shape))
    reward = TableReward(rng.random((C, len(trajectory_set(vocab)))))
    groups = [sample_group(old, c, G, reward, [seed, 2, c]) for c in range(C)]
    return theta, old, ref, groups


def cfg(lam=1.0, beta=0.0, baseline=True, jackknife=False, eps=0.2, **kw):
    risk = RiskSpec.infinite() if math.isinf(lam) else RiskSpec(lam)
    return ObjectiveConfig(risk, ClipSpec(eps), beta, baseline, jackknife, **kw)


def constant(groups, value=0.6):
    return [g.with_rewards(np.full(g.size, value)) for g in groups]


# ---------------------------------------------------------------------------
# values


def test_grpo_degenerate_is_zero():
    _, old, _, groups = instance(0)
    assert grpo_objective(constant(groups), old, old, old, cfg(beta=0.1)) == 0.0


def test_grpo_on_policy_constant_rewards_is_kl_penalty():
    _, old, ref, groups = instance(1)
    gs = constant(groups)
    expected = 0.5 * sum(-0.1 * kl_estimator_k3(g, old, ref) for g in gs)
    assert grpo_objective(gs, old, old, ref, cfg(beta=0.1)) == pytest.approx(expected, rel=1e-15)


def test_grpo_matches_transcription():
    theta, old, ref, groups = instance(5, drift=0.5)
    c = cfg(beta=0.05)
    assert grpo_objective(groups, theta, old, ref, c) == pytest.approx(
        naive_grpo_objective(groups, theta, old, ref, 0.2, 0.05), rel=1e-12)
    w = [0.3, 0.7]
    assert grpo_objective(groups, theta, old, ref, c, weights=w) == pytest.approx(
        naive_grpo_objective(groups, theta, old, ref, 0.2, 0.05, weights=w), rel=1e-12)


def test_frpo_degenerate_is_lambda():
    _, old, _, groups = instance(2)
    for lam in (0.1, 1.0, 7.5):
        assert frpo_objective(constant(groups), old, old, old, cfg(lam, jackknife=True)) == lam


def test_frpo_matches_transcription():
    theta, old, ref, groups = instance(6, drift=0.5)
    for lam in (0.3, 2.0):
        for baseline in (True, False):
            got = frpo_objective(groups, theta, old, ref, cfg(lam, 0.05, baseline))
            assert got == pytest.approx(naive_frpo_objective(groups, theta, old, ref, lam, 0.2, 0.05, baseline),
                                        rel=1e-12)


def test_frpo_matches_components():
    theta, old, ref, groups = instance(7, drift=0.4)
    risk, clip = RiskSpec(0.7), ClipSpec(0.2)
    c = cfg(0.7, 0.05, baseline=False, jackknife=True)
    pieces = [-0.7 * jackknife_log_partition(g, theta, old, risk, clip) - 0.05 * kl_estimator_k3(g, theta, ref)
              for g in groups]
    assert frpo_objective(groups, theta, old, ref, c) == 0.5 * pieces[0] + 0.5 * pieces[1]
    c = cfg(0.7, 0.05, baseline=True, jackknife=True)
    with_b = [p + baseline_term(g, theta, old, risk, clip) for p, g in zip(pieces, groups)]
    # the fused evaluation cancels the O(ratio - 1) terms analytically, so agreement is to rounding
    assert frpo_objective(groups, theta, old, ref, c) == pytest.approx(0.5 * sum(with_b), rel=1e-12)


def test_sentinel_value_is_grpo():
    theta, old, ref, groups = instance(8)
    assert frpo_objective(groups, theta, old, ref, cfg(math.inf, 0.05)) == \
        grpo_objective(groups, theta, old, ref, cfg(math.inf, 0.05))


def test_large_lambda_value_on_policy():
    _, old, ref, groups = instance(9)
    lam = 1e8
    frpo = frpo_objective(groups, old, old, ref, cfg(lam, 0.05), offset_free=True)
    with_const = frpo_objective(groups, old, old, ref, cfg(lam, 0.05))
    grpo = grpo_objective(groups, old, old, ref, cfg(math.inf, 0.05))
    assert frpo == pytest.approx(grpo, abs=1e-6)
    assert with_const - lam == pytest.approx(grpo, abs=1e-6)


def test_normalised_risk_scale_drops_lambda_prefactor():
    theta, old, ref, groups = instance(10)
    a = frpo_objective(groups, theta, old, ref, cfg(0.5), offset_free=True)
    b = frpo_objective(groups, theta, old, ref, cfg(0.5, normalize_risk_scale=True), offset_free=True)
    assert a == pytest.approx(0.5 * b, rel=1e-14)


# ---------------------------------------------------------------------------
# score function


def test_score_uniform_example():
    pol = TabularPolicy.uniform(VocabSpec(2, 1, 1), 1)
    grad = score_gradient(pol, Trajectory(0, (0,)))
    np.testing.assert_array_equal(grad[0, 0, 0], [0.5, -0.5])
    assert np.count_nonzero(grad) == 2


def test_score_matches_finite_differences():
    vocab = VocabSpec(4, 0, 3)
    pol = TabularPolicy.random(vocab, 2, seed=3)
    for seq in [(1, 2, 3), (2, 0), (0,)]:
        traj = Trajectory(1, seq)
        idx = trajectory_set(vocab).sequences.index(seq)
        rep = finite_diff_check(lambda q: float(q.trajectory_log_probs[1, idx]), pol, 1e-5,
                                score_gradient(pol, traj), order=2)
        assert rep.max_rel_err < 1e-6


@given(st.integers(0, 10**6), st.integers(2, 8))
def test_score_rows_sum_to_zero(seed, G):
    vocab = VocabSpec(4, 0, 3)
    pol = TabularPolicy.random(vocab, 2, seed=seed)
    g = sample_group(pol, 1, G, TableReward.constant(0.0, vocab, 2), seed)
    coef = np.random.default_rng(seed).standard_normal(g.tokens.shape)
    grad = scatter_score(pol, 1, g.tokens, coef)
    assert np.abs(grad.sum(axis=-1)).max() < 1e-12
    assert np.all(np.isfinite(grad))


# ---------------------------------------------------------------------------
# on-policy gradients


def test_drift_cancellation():
    _, old, ref, groups = instance(11)
    gs = constant(groups)
    for jk in (False, True):
        grad = frpo_gradient_onpolicy(gs, old, ref, cfg(2.0, 0.0, True, jk))
        assert np.all(grad == 0.0)
        assert np.all(frpo_gradient(gs, old, old, ref, cfg(2.0, 0.0, True, jk)) == 0.0)


def test_grpo_onpolicy_constant_is_zero():
    _, old, ref, groups = instance(12)
    assert np.all(grpo_gradient_onpolicy(constant(groups), old, ref, cfg(math.inf)) == 0.0)


def test_grpo_onpolicy_two_sample_example():
    vocab = VocabSpec(3, 0, 2)
    pol = TabularPolicy.random(vocab, 1, seed=4)
    g = Group.from_tokens(0, np.array([[1, 2], [0, -1]]), [1.0, 0.0])
    grad = grpo_gradient_onpolicy([g], pol, pol, cfg(math.inf))
    s1 = score_gradient(pol, Trajectory(0, (1, 2)))
    s2 = score_gradient(pol, Trajectory(0, (0,)))
    # (1/G) * (+0.5 / |y_1| * s1 - 0.5 / |y_2| * s2)
    np.testing.assert_allclose(grad, 0.5 * (0.5 / 2 * s1 - 0.5 * s2), rtol=1e-14, atol=1e-16)


def test_onpolicy_closed_form_equals_general_path():
    _, old, ref, groups = instance(13)
    for c in (cfg(0.5, 0.05), cfg(0.5, 0.05, jackknife=True), cfg(3.0, 0.0, baseline=False)):
        np.testing.assert_allclose(frpo_gradient_onpolicy(groups, old, ref, c),
                                   frpo_gradient(groups, old, old, ref, c), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grpo_gradient_onpolicy(groups, old, ref, cfg(math.inf, 0.05)),
                               grpo_gradient(groups, old, old, ref, cfg(math.inf, 0.05)), rtol=1e-12, atol=1e-15)


def test_large_lambda_gradient_matches_grpo():
    _, old, ref, groups = instance(14)
    frpo = frpo_gradient_onpolicy(groups, old, ref, cfg(1e8, 0.05))
    grpo = grpo_gradient_onpolicy(groups, old, ref, cfg(math.inf, 0.05))
    assert np.abs(frpo - grpo).max() < 1e-4


def test_convergence_to_grpo_is_monotone():
    _, old, ref, groups = instance(15)
    grpo = grpo_gradient_onpolicy(groups, old, ref, cfg(math.inf, 0.05))
    gaps = [np.abs(frpo_gradient_onpolicy(groups, old, ref, cfg(lam, 0.05)) - grpo).max()
            for lam in (1e2, 1e4, 1e6, 1e8)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-8


def test_jackknife_limit_is_rescaled_grpo():
    # the jackknife turns the plug-in covariance (1/G) into the unbiased one (1/(G-1))
    G = 5
    _, old, ref, groups = instance(16, G=G)
    grpo = grpo_gradient_onpolicy(groups, old, ref, cfg(math.inf))
    jk = frpo_gradient_onpolicy(groups, old, ref, cfg(1e8, jackknife=True))
    np.testing.assert_allclose(jk, G / (G - 1) * grpo, rtol=1e-6, atol=1e-9)


def test_offpolicy_gap_to_grpo_grows_linearly_in_lambda():
    # off-policy the mean clipped ratio m differs from 1 and lambda (m - 1 - log m) survives
    theta, old, ref, groups = instance(17)
    grpo = grpo_gradient(groups, theta, old, ref, cfg(math.inf))
    gaps = [np.abs(frpo_gradient(groups, theta, old, ref, cfg(lam)) - grpo).max() for lam in (1e4, 1e6, 1e8)]
    assert gaps[0] > 1e-3
    assert gaps[2] / gaps[1] == pytest.approx(100, rel=1e-3)


@pytest.mark.parametrize("jackknife", [False, True])
def test_frpo_gradient_finite_differences(jackknife):
    theta, old, ref, groups = instance(13, G=4)
    for lam in (0.1, 2.0):
        c = cfg(lam, 0.05, jackknife=jackknife)
        g = frpo_gradient_onpolicy(groups, old, ref, c)
        rep = finite_diff_check(lambda q: frpo_objective(groups, q, old, ref, c, offset_free=True), old, 1e-5, g)
        assert rep.passed(1e-5), rep.max_rel_err


def test_grpo_gradient_finite_differences():
    theta, old, ref, groups = instance(13, G=4)
    c = cfg(math.inf, 0.05)
    g = grpo_gradient_onpolicy(groups, old, ref, c)
    rep = finite_diff_check(lambda q: grpo_objective(groups, q, old, ref, c), old, 1e-5, g)
    assert rep.passed(1e-5), rep.max_rel_err


@pytest.mark.parametrize("lam", [0.5, math.inf])
def test_off_policy_gradients_finite_differences(lam):
    # moderate drift puts some ratios past the clip; the saturated units must carry no gradient
    theta, old, ref, groups = instance(17, G=4, drift=0.25)
    c = cfg(lam, 0.05)
    grad_fn = grpo_gradient if math.isinf(lam) else frpo_gradient
    obj_fn = grpo_objective if math.isinf(lam) else frpo_objective
    g = grad_fn(groups, theta, old, ref, c)
    rep = finite_diff_check(lambda q: obj_fn(groups, q, old, ref, c), theta, 1e-6, g)
    assert rep.passed(1e-5), rep.max_rel_err


# ---------------------------------------------------------------------------
# finite-difference harness


def test_fd_linear_objective_is_exact():
    pol = TabularPolicy.random(VocabSpec(3, 0, 2), 1, seed=0)
    a = np.random.default_rng(1).standard_normal(pol.logits.shape)
    rep = finite_diff_check(lambda q: float((a * q.logits).sum()), pol, 1e-3, a, order=2)
    assert rep.max_rel_err < 1e-10


def test_fd_detects_nondeterminism():
    pol = TabularPolicy.uniform(VocabSpec(3, 0, 2), 1)
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicObjective):
        finite_diff_check(lambda q: float(rng.random()), pol, 1e-5, np.zeros(pol.logits.shape))


def test_fd_step_bounds():
    pol = TabularPolicy.uniform(VocabSpec(3, 0, 2), 1)
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, pol, 1e-2, np.zeros(pol.logits.shape))


# ---------------------------------------------------------------------------
# properties

dyadic = st.integers(0, 16).map(lambda k: k / 16)


@given(st.integers(0, 500), st.lists(dyadic, min_size=4, max_size=4), st.floats(-10, 10),
       st.sampled_from([0.1, 1.0, 1e4]), st.booleans())
def test_gradients_shift_invariant(seed, rewards, shift, lam, jackknife):
    # advantages are centred on differences r_i - r_0, which stay exact for dyadic rewards
    shift = round(shift * 16) / 16
    _, old, ref, groups = instance(seed, G=4, C=1)
    g = groups[0].with_rewards(rewards)
    h = groups[0].with_rewards(np.asarray(rewards) + shift)
    c = cfg(lam, 0.05, jackknife=jackknife)
    assert np.array_equal(frpo_gradient_onpolicy([g], old, ref, c), frpo_gradient_onpolicy([h], old, ref, c))
    assert np.array_equal(grpo_gradient_onpolicy([g], old, ref, c), grpo_gradient_onpolicy([h], old, ref, c))


@given(st.integers(0, 500), st.floats(-3, 3))
def test_gradients_shift_invariant_general(seed, shift):
    _, old, ref, groups = instance(seed, G=4, C=1)
    h = groups[0].with_rewards(groups[0].rewards + shift)
    c = cfg(0.5, 0.05)
    np.testing.assert_allclose(frpo_gradient_onpolicy([h], old, ref, c),
                               frpo_gradient_onpolicy(groups, old, ref, c), rtol=1e-9, atol=1e-13)


@given(st.lists(st.integers(-100, 100), min_size=1, max_size=9))
def test_pairwise_sum_order(values):
    parts = [np.array([float(v)]) for v in values]
    assert pairwise_sum(parts)[0] == sum(values)
