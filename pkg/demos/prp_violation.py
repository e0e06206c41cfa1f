"""Optimise a stochastic ranking policy against a redundancy-penalising
engagement metric and compare it with sorting by relevance label."""

import numpy as np

from marank.metrics import EngagementParams, engagement_score
from marank.numeric import init_mlp, make_rng
from marank.ranking import (RankingHead, RankingPolicy, all_permutations, expected_reward,
                            expected_reward_gradient, modal_ranking, per_ranking)

# items 0 and 1 are near duplicates; showing both near the top is penalised
feats = np.array([[1.0, 0.0, 0.0], [0.98, 0.02, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
labels = np.array([3, 3, 2, 0])
params = EngagementParams(redundancy=8.0)
reward = per_ranking(lambda p: engagement_score(labels, feats, p, params))

policy = RankingPolicy(init_mlp([3, 16, 1], make_rng(8)), RankingHead.plackett_luce(4))
for step in range(1500):
    g = expected_reward_gradient(policy, reward, feats)
    policy.scorer = policy.scorer.with_flat(policy.scorer.flat() + 0.2 * g.scorer.flat())
    if step % 300 == 0:
        print(f"step {step:4d}  expected engagement {g.value:.4f}")

table = reward(all_permutations(4))
by_label = np.argsort(-labels, kind="stable")
print("sort by label      ", by_label, f"{reward(by_label)[0]:.4f}")
print("best ranking       ", all_permutations(4)[np.argmax(table)], f"{table.max():.4f}")
print("policy modal       ", modal_ranking(policy.head, policy.scores(feats)))
print(f"policy expectation  {expected_reward(policy, reward, feats)[0]:.4f}")
