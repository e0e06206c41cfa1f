"""Label-based ranking metrics: NDCG@k, ERR and a synthetic list-level engagement score.

All functions take the label (and feature) arrays of one session plus a
permutation listing item ids from the top position down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidPermutation(ValueError):
    pass


def check_permutation(permutation, n: int) -> np.ndarray:
    perm = np.asarray(permutation)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise InvalidPermutation(f"expected {n} integer item ids, got {permutation!r}")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidPermutation(f"{list(perm)} is not a permutation of 0..{n - 1}")
    return perm


def dcg_gain(label) -> float:
    """Exponential gain ``2**label - 1``."""
    if np.any(np.asarray(label) < 0):
        raise ValueError("labels must be non-negative")
    return np.exp2(label) - 1.0


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def dcg(labels, permutation, k: int) -> float:
    labels = np.asarray(labels)
    perm = check_permutation(permutation, labels.size)
    top = perm[:min(k, labels.size)]
    return float(np.dot(dcg_gain(labels[top]), _discounts(top.size)))


def ndcg(labels, permutation, k: int) -> float:
    """NDCG@k. Sessions whose ideal DCG is 0 (no relevant items) score 1.0."""
    if k < 1:
        raise ValueError("cutoff k must be >= 1")
    labels = np.asarray(labels)
    ideal = dcg(labels, np.argsort(-labels, kind="stable"), k)
    actual = dcg(labels, permutation, k)
    if ideal == 0.0:
        return 1.0
    return actual / ideal


def err(labels, permutation, max_grade: int) -> float:
    """Expected reciprocal rank with stop probability ``(2**l - 1) / 2**max_grade``."""
    if max_grade < 1:
        raise ValueError("max_grade must be >= 1")
    labels = np.asarray(labels)
    perm = check_permutation(permutation, labels.size)
    stop = dcg_gain(labels[perm]) / 2.0 ** max_grade
    reach = np.concatenate([[1.0], np.cumprod(1.0 - stop)[:-1]])
    return float(np.sum(stop * reach / np.arange(1, labels.size + 1)))


@dataclass(frozen=True)
class EngagementParams:
    """Knobs of the synthetic engagement metric (version 1).

    ``cluster_threshold`` is the cosine similarity at or above which two
    items are linked when counting top-5 clusters.
    """

    gamma: float = 0.8
    redundancy: float = 0.0
    diversity: float = 0.0
    cluster_threshold: float = 0.9
    version: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.redundancy < 0 or self.diversity < 0:
            raise ValueError("redundancy and diversity weights must be >= 0")


def cosine_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm get similarity 0."""
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = features / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def count_clusters(sim: np.ndarray, threshold: float) -> int:
    """Connected components of the graph linking pairs with ``sim >= threshold``."""
    n = sim.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(n):
        for b in range(a + 1, n):
            if sim[a, b] >= threshold:
                parent[find(a)] = find(b)
    return len({find(a) for a in range(n)})


def engagement_score(labels, features, permutation, params: EngagementParams) -> float:
    """Discounted gain minus a redundancy penalty plus a top-5 diversity bonus.

    The redundancy term charges each position for its highest cosine
    similarity to anything ranked above it, which makes the value of
    swapping two items depend on their neighbours.
    """
    labels = np.asarray(labels)
    features = np.asarray(features, dtype=np.float64)
    perm = check_permutation(permutation, labels.size)
    disc = params.gamma ** np.arange(labels.size)
    score = float(np.dot(disc, dcg_gain(labels[perm])))
    if params.redundancy == 0.0 and params.diversity == 0.0:
        return score
    sim = cosine_matrix(features)[np.ix_(perm, perm)]
    if params.redundancy:
        max_sim = np.array([sim[r, :r].max() if r else 0.0 for r in range(labels.size)])
        score -= params.redundancy * float(np.dot(disc, max_sim))
    if params.diversity:
        top = min(5, labels.size)
        score += params.diversity * count_clusters(sim[:top, :top], params.cluster_threshold)
    return score
