import itertools
import json
import math

import numpy as np
import pytest
from scipy import stats

from helpers import rel_err
from marank.metrics import ndcg
from marank.numeric import MlpParams, finite_diff_gradient, init_mlp, make_rng
from marank.ranking import (
    ExactModeTooLarge,
    PolicyGradient,
    RankingHead,
    RankingPolicy,
    all_permutations,
    alternating_detached_train,
    apply_head_gradient,
    expected_reward,
    expected_reward_gradient,
    head_log_prob,
    head_ranking_prob,
    modal_ranking,
    per_ranking,
    plackett_luce_prob,
    sample_ranking,
    sample_rankings,
)


def pl_oracle(scores, perm):
    # product of sequential softmax choices, straight from the definition
    p = 1.0
    left = list(range(len(scores)))
    for item in perm:
        p *= math.exp(scores[item]) / sum(math.exp(scores[j]) for j in left)
        left.remove(item)
    return p


def head_oracle(taus, eps, scores, perm):
    p = 1.0
    left = list(range(len(scores)))
    for r, item in enumerate(perm):
        m = len(left)
        tau = taus[min(r, len(taus) - 1)]
        if tau == 0:
            q = 1.0 if item == max(left, key=lambda j: (scores[j], -j)) else 0.0
        else:
            q = math.exp(scores[item] / tau) / sum(math.exp(scores[j] / tau) for j in left)
        p *= (1 - eps) * q + eps / m if m > 1 else 1.0
        left.remove(item)
    return p


def test_plackett_luce_examples():
    for perm in itertools.permutations(range(3)):
        assert plackett_luce_prob([0.4, 0.4, 0.4], perm) == pytest.approx(1 / 6, abs=1e-15)
    assert plackett_luce_prob([2.5], [0]) == 1.0
    s = make_rng(0).normal(size=4)
    assert abs(sum(plackett_luce_prob(s, p) for p in itertools.permutations(range(4))) - 1) < 1e-10


def test_plackett_luce_matches_definition_and_is_stable():
    s = make_rng(1).normal(size=5)
    for perm in itertools.permutations(range(5)):
        assert plackett_luce_prob(s, perm) == pytest.approx(pl_oracle(s, perm), rel=1e-12)
    assert np.isfinite(plackett_luce_prob([1000.0, 0.0, -1000.0], [0, 1, 2]))


@pytest.mark.parametrize("draw", range(50))
def test_normalization_over_all_permutations(draw):
    rng = make_rng(1000 + draw)
    n = 1 + draw % 5
    s = rng.normal(scale=2.0, size=n)
    head = RankingHead(rng.uniform(0.1, 3.0, size=n), float(rng.uniform(0, 0.5)))
    perms = all_permutations(n)
    assert abs(sum(plackett_luce_prob(s, p) for p in perms) - 1) < 1e-10
    assert abs(np.exp(head_log_prob(head, s, perms)).sum() - 1) < 1e-10


def test_head_matches_oracle_and_collapses_to_plackett_luce():
    rng = make_rng(2)
    s = rng.normal(size=4)
    taus = np.array([0.5, 2.0, 0.0])
    head = RankingHead(taus, 0.2)
    for perm in itertools.permutations(range(4)):
        assert head_ranking_prob(head, s, perm) == pytest.approx(head_oracle(taus, 0.2, s, perm), abs=1e-14)
        assert head_ranking_prob(RankingHead.plackett_luce(4), s, perm) == pytest.approx(
            plackett_luce_prob(s, perm), rel=1e-12)


def test_two_item_closed_form():
    for s1, s2, tau in ((0.3, -1.1, 0.7), (2.0, 2.5, 3.0)):
        head = RankingHead([tau, 1.0])
        assert head_ranking_prob(head, [s1, s2], [0, 1]) == pytest.approx(1 / (1 + math.exp(-(s1 - s2) / tau)), rel=1e-12)


def test_greedy_head_sorts_with_stable_ties():
    head = RankingHead.sorting(4)
    scores = [0.5, 2.0, 0.5, -1.0]
    rng = make_rng(0)
    for _ in range(5):
        assert sample_ranking(head, scores, rng) == (1, 0, 2, 3)
    assert head_ranking_prob(head, scores, [1, 0, 2, 3]) == 1.0
    assert head_ranking_prob(head, scores, [1, 2, 0, 3]) == 0.0


def chi2_pvalue(head, scores, n_draws, seed):
    perms = all_permutations(len(scores))
    draws = sample_rankings(head, scores, make_rng(seed), n_draws)
    index = {tuple(p): i for i, p in enumerate(perms)}
    counts = np.bincount([index[tuple(d)] for d in draws], minlength=len(perms))
    expected = np.exp(head_log_prob(head, scores, perms)) * n_draws
    return stats.chisquare(counts, expected).pvalue


def test_sampler_matches_plackett_luce_chi2():
    assert chi2_pvalue(RankingHead.plackett_luce(3), np.array([1.0, 0.2, -0.5]), 100_000, 7) > 0.001


def test_sampler_matches_temperature_head_chi2():
    head = RankingHead([0.4, 2.5, 1.0], explore=0.15)
    assert chi2_pvalue(head, np.array([0.3, 1.0, -0.4]), 100_000, 8) > 0.001


def test_equal_scores_give_uniform_positions():
    draws = sample_rankings(RankingHead([0.3, 2.0, 1.0, 1.0]), np.zeros(4), make_rng(3), 40_000)
    for pos in range(4):
        freq = np.bincount(draws[:, pos], minlength=4) / len(draws)
        assert np.all(np.abs(freq - 0.25) < 4 * math.sqrt(0.25 * 0.75 / len(draws)))


def test_batched_sampling_shapes():
    out = sample_rankings(RankingHead.plackett_luce(5), make_rng(0).normal(size=(3, 5)), make_rng(1), 7)
    assert out.shape == (3, 7, 5)
    assert all(sorted(row) == list(range(5)) for row in out.reshape(-1, 5))


def test_modal_ranking_is_the_argmax():
    rng = make_rng(4)
    for _ in range(300):
        n = int(rng.integers(2, 6))
        s = rng.normal(scale=2.0, size=n)
        head = RankingHead(rng.uniform(0.05, 3.0, size=n), float(rng.uniform(0, 0.5)))
        perms = all_permutations(n)
        logp = head_log_prob(head, s, perms)
        assert head_log_prob(head, s, modal_ranking(head, s)) == logp.max()


def linear_policy(weights, head):
    w = np.asarray(weights, dtype=float)
    return RankingPolicy(MlpParams([w[None, :]], [np.zeros(1)]), head)


def test_expected_reward_constant_and_hand_enumeration():
    x = make_rng(5).normal(size=(3, 2))
    policy = linear_policy([0.7, -0.2], RankingHead([0.8, 1.5]))
    value, se = expected_reward(policy, lambda P: np.full(len(P), 2.5), x)
    assert value == 2.5 and se == 0.0
    rewards = {p: float(i) ** 2 for i, p in enumerate(itertools.permutations(range(3)))}
    s = policy.scores(x)
    hand = sum(head_oracle([0.8, 1.5], 0.0, s, p) * r for p, r in rewards.items())
    got, _ = expected_reward(policy, per_ranking(lambda p: rewards[tuple(int(i) for i in p)]), x)
    assert got == pytest.approx(hand, rel=1e-12)


def test_exact_mode_refuses_large_lists():
    policy = linear_policy([1.0], RankingHead.plackett_luce(8))
    with pytest.raises(ExactModeTooLarge):
        expected_reward(policy, lambda P: np.zeros(len(P)), np.ones((8, 1)))


def test_sampled_estimate_within_three_standard_errors():
    rng = make_rng(6)
    x = rng.normal(size=(5, 3))
    labels = np.array([3, 0, 1, 2, 0])
    policy = linear_policy([0.5, 0.1, -0.4], RankingHead([1.0, 0.5, 2.0], 0.1))
    reward = per_ranking(lambda p: ndcg(labels, p, 5))
    exact, _ = expected_reward(policy, reward, x)
    est, se = expected_reward(policy, reward, x, "sampled", 20_000, make_rng(7))
    assert abs(est - exact) < 3 * se


def test_constant_reward_gradient_is_zero():
    rng = make_rng(8)
    policy = RankingPolicy(init_mlp([3, 4, 1], rng), RankingHead([0.7, 1.2, 2.0], 0.1))
    g = expected_reward_gradient(policy, lambda P: np.full(len(P), 3.0), rng.normal(size=(4, 3)))
    assert np.all(np.abs(g.scorer.flat()) < 1e-15)
    assert np.all(np.abs(g.log_tau) < 1e-15) and abs(g.explore) < 1e-15


@pytest.mark.parametrize("seed", range(4))
def test_exact_gradient_matches_finite_differences(seed):
    rng = make_rng(20 + seed)
    x = rng.normal(size=(4, 3))
    labels = np.array([2, 0, 3, 1])
    scorer = init_mlp([3, 4, 1], rng)
    scorer = scorer.with_flat(rng.normal(scale=0.6, size=scorer.n_params))
    log_tau = np.log(rng.uniform(0.5, 2.0, size=3))
    explore = 0.15
    reward = per_ranking(lambda p: ndcg(labels, p, 3))

    def value(params, lt, eps):
        return expected_reward(RankingPolicy(params, RankingHead(np.exp(lt), eps)), reward, x)[0]

    g = expected_reward_gradient(RankingPolicy(scorer, RankingHead(np.exp(log_tau), explore)), reward, x)
    fd = finite_diff_gradient(lambda p: value(p, log_tau, explore), scorer)
    assert rel_err(g.scorer.flat(), fd.flat()) < 1e-4
    h = 1e-6
    fd_tau = np.array([(value(scorer, log_tau + h * e, explore) - value(scorer, log_tau - h * e, explore)) / (2 * h)
                       for e in np.eye(3)])
    assert rel_err(g.log_tau, fd_tau) < 1e-4
    fd_eps = (value(scorer, log_tau, explore + h) - value(scorer, log_tau, explore - h)) / (2 * h)
    assert rel_err(g.explore, fd_eps) < 1e-4


def test_sampled_gradient_is_unbiased():
    rng = make_rng(30)
    x = rng.normal(size=(4, 2))
    labels = np.array([0, 3, 1, 2])
    policy = RankingPolicy(init_mlp([2, 3, 1], rng), RankingHead([1.0, 0.6, 1.4], 0.1))
    reward = per_ranking(lambda p: ndcg(labels, p, 4))
    exact = expected_reward_gradient(policy, reward, x)
    ref = np.concatenate([exact.scorer.flat(), exact.log_tau, [exact.explore]])
    draws = []
    for seed in range(50):
        g = expected_reward_gradient(policy, reward, x, "sampled", make_rng(seed), n_samples=200)
        draws.append(np.concatenate([g.scorer.flat(), g.log_tau, [g.explore]]))
    draws = np.array(draws)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - ref) <= 3 * se + 1e-12)


def test_apply_head_gradient_keeps_greedy_positions():
    head = RankingHead([0.0, 1.0, 2.0], 0.0)
    g = PolicyGradient(None, np.array([5.0, 0.5, -0.5]), 10.0, 0.0)
    new = apply_head_gradient(head, g, 0.1)
    assert new.temperatures[0] == 0.0
    np.testing.assert_allclose(new.temperatures[1:], [math.exp(0.05), 2 * math.exp(-0.05)])
    assert new.explore == 0.95


def ndcg_toy(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(4, 3))
    labels = rng.integers(0, 4, size=4)
    return x, labels


def test_alternating_training_improves_and_traces_blocks():
    x, labels = ndcg_toy(3)
    reward = per_ranking(lambda p: ndcg(labels, p, 4))
    policy = RankingPolicy.create(3, [], make_rng(4), max_len=4)
    before, _ = expected_reward(policy, reward, x)
    trained, trace = alternating_detached_train(policy, [reward], [x], 20, 5, 0.5, make_rng(5))
    after, _ = expected_reward(trained, reward, x)
    assert len(trace.expected_reward) == 5
    assert after >= before
    assert trace.expected_reward[-1] == pytest.approx(after)


def test_fixed_head_reduces_to_scorer_training():
    x, labels = ndcg_toy(6)
    reward = per_ranking(lambda p: ndcg(labels, p, 4))
    policy = RankingPolicy.create(3, [], make_rng(7), max_len=4, head=RankingHead([0.5, 1.0, 1.5], 0.1))
    trained, _ = alternating_detached_train(policy, [reward], [x], 3, 2, 0.5, make_rng(8), train_head=False)
    np.testing.assert_array_equal(trained.head.temperatures, policy.head.temperatures)
    # same scorer trajectory as plain gradient ascent
    scorer = policy.scorer
    for _ in range(6):
        g = expected_reward_gradient(RankingPolicy(scorer, policy.head), reward, x)
        scorer = scorer.with_flat(scorer.flat() + 0.5 * g.scorer.flat())
    np.testing.assert_allclose(trained.scorer.flat(), scorer.flat(), rtol=1e-12)
    with pytest.raises(ValueError):
        alternating_detached_train(policy, [reward], [x], 1, 0, 0.5, make_rng(0))


def test_policy_round_trip(tmp_path):
    policy = RankingPolicy.create(3, [4], make_rng(0), max_len=5, dropout=0.2,
                                  head=RankingHead([0.5, 1.0], 0.05))
    policy.save(tmp_path / "p.json")
    back = RankingPolicy.from_dict(json.loads((tmp_path / "p.json").read_text()))
    np.testing.assert_array_equal(back.scorer.flat(), policy.scorer.flat())
    np.testing.assert_array_equal(back.head.temperatures, [0.5, 1.0])
    assert back.head.explore == 0.05
