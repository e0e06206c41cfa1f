"""Stochastic ranking policies: a scoring net plus a detachable ranking head.

The head turns item scores into a distribution over permutations by
sequential sampling without replacement: at position ``r`` item ``j`` is drawn
with probability ``(1 - eps) * softmax(s / tau_r)_j + eps / m`` over the ``m``
items still unplaced. With ``tau_r = 1`` and ``eps = 0`` this is
Plackett-Luce; ``tau_r = 0`` means a greedy argmax at that position.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .metrics import check_permutation
from .numeric import MlpParams, init_mlp, mlp_forward, mlp_gradient

MAX_EXACT_ITEMS = 7
MAX_EXPLORE = 0.95


class ExactModeTooLarge(ValueError):
    pass


@lru_cache(maxsize=None)
def all_permutations(n: int) -> np.ndarray:
    """All ``n!`` permutations in lexicographic order, shape ``(n!, n)``."""
    if n > MAX_EXACT_ITEMS:
        raise ExactModeTooLarge(f"refusing to enumerate {n}! permutations (limit n <= {MAX_EXACT_ITEMS})")
    out = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    out.setflags(write=False)
    return out


def plackett_luce_prob(scores, permutation) -> float:
    """Plackett-Luce probability, accumulated in log space."""
    scores = np.asarray(scores, dtype=np.float64)
    perm = check_permutation(permutation, scores.size)
    ordered = scores[perm]
    logp = 0.0
    for r in range(scores.size):
        tail = ordered[r:]
        top = tail.max()
        logp += ordered[r] - top - math.log(np.exp(tail - top).sum())
    return math.exp(logp)


@dataclass
class RankingHead:
    """Per-position temperatures plus a uniform-exploration weight ``explore``.

    Lists longer than ``temperatures`` reuse the last temperature.
    """

    temperatures: np.ndarray
    explore: float = 0.0

    def __post_init__(self):
        self.temperatures = np.asarray(self.temperatures, dtype=np.float64).ravel().copy()
        if self.temperatures.size == 0 or np.any(self.temperatures < 0):
            raise ValueError("temperatures must be a non-empty vector of values >= 0")
        if not 0.0 <= self.explore < 1.0:
            raise ValueError("explore weight must lie in [0, 1)")

    @classmethod
    def plackett_luce(cls, length: int) -> "RankingHead":
        return cls(np.ones(length))

    @classmethod
    def sorting(cls, length: int) -> "RankingHead":
        return cls(np.zeros(length))

    def taus(self, n: int) -> np.ndarray:
        idx = np.minimum(np.arange(n), self.temperatures.size - 1)
        return self.temperatures[idx]

    def copy(self) -> "RankingHead":
        return RankingHead(self.temperatures.copy(), self.explore)

    def to_dict(self) -> dict:
        return {"temperatures": self.temperatures.tolist(), "explore": self.explore}


def _greedy_pick(z: np.ndarray) -> np.ndarray:
    # z has -inf on placed items; argmax returns the lowest id among ties
    return np.argmax(z, axis=-1)


def head_log_prob(head: RankingHead, scores, perms, grad: bool = False):
    """Log-probabilities of permutations ``perms`` (shape ``(P, n)`` or ``(n,)``).

    ``scores`` is one score vector ``(n,)`` shared by all rows or a matrix
    ``(P, n)`` with one score vector per row. With ``grad=True`` also returns
    ``(d/dscores (P, n), d/dlog_tau (P, L), d/dexplore (P,))``. Temperature
    gradients are with respect to ``log tau`` and are zero at greedy
    (``tau = 0``) positions.
    """
    scores = np.asarray(scores, dtype=np.float64)
    perms = np.asarray(perms)
    single = perms.ndim == 1
    perms = np.atleast_2d(perms)
    n_perm, n = perms.shape
    if scores.shape[-1] != n:
        raise ValueError(f"permutations of length {n} for {scores.shape[-1]} scores")
    srows = np.broadcast_to(scores, (n_perm, n))
    taus = head.taus(n)
    eps = head.explore
    rows = np.arange(n_perm)
    remaining = np.ones((n_perm, n), dtype=bool)
    logp = np.zeros(n_perm)
    if grad:
        d_s = np.zeros((n_perm, n))
        d_lt = np.zeros((n_perm, head.temperatures.size))
        d_eps = np.zeros(n_perm)
    for r in range(n - 1):
        m = n - r
        chosen = perms[:, r]
        if not np.all(remaining[rows, chosen]):
            raise ValueError("rows of perms must be permutations")
        tau = taus[r]
        if tau == 0.0:
            z = np.where(remaining, srows, -np.inf)
            qc = (_greedy_pick(z) == chosen).astype(np.float64)
            p = (1.0 - eps) * qc + eps / m
            with np.errstate(divide="ignore"):
                logp += np.log(p)
            if grad:
                d_eps += np.where(p > 0, (1.0 / m - qc) / np.where(p > 0, p, 1.0), 0.0)
        else:
            z = np.where(remaining, srows / tau, -np.inf)
            shift = z.max(axis=1, keepdims=True)
            ez = np.exp(z - shift)
            q = ez / ez.sum(axis=1, keepdims=True)
            qc = q[rows, chosen]
            p = (1.0 - eps) * qc + eps / m
            logp += np.log(p)
            if grad:
                coef = (1.0 - eps) * qc / p
                onehot = np.zeros((n_perm, n))
                onehot[rows, chosen] = 1.0
                d_s += coef[:, None] * (onehot - q) / tau
                z_fin = np.where(remaining, z, 0.0)
                pos = min(r, head.temperatures.size - 1)
                d_lt[:, pos] += coef * (-z_fin[rows, chosen] + np.sum(q * z_fin, axis=1))
                d_eps += (1.0 / m - qc) / p
        remaining[rows, chosen] = False
    if not grad:
        return logp[0] if single else logp
    if single:
        return logp[0], d_s[0], d_lt[0], d_eps[0]
    return logp, d_s, d_lt, d_eps


def head_ranking_prob(head: RankingHead, scores, permutation) -> float:
    perm = check_permutation(permutation, np.asarray(scores).size)
    return float(np.exp(head_log_prob(head, scores, perm)))


def _sample_rows(head: RankingHead, srows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n_rows, n = srows.shape
    taus = head.taus(n)
    out = np.empty((n_rows, n), dtype=np.int64)
    remaining = np.ones((n_rows, n), dtype=bool)
    rows = np.arange(n_rows)
    for r in range(n):
        if taus[r] == 0.0 or r == n - 1:
            pick = _greedy_pick(np.where(remaining, srows, -np.inf))
        else:
            gumbel = rng.gumbel(size=(n_rows, n))
            pick = _greedy_pick(np.where(remaining, srows / taus[r] + gumbel, -np.inf))
        if head.explore > 0.0 and r < n - 1:
            uniform = _greedy_pick(np.where(remaining, rng.random((n_rows, n)), -np.inf))
            pick = np.where(rng.random(n_rows) < head.explore, uniform, pick)
        out[:, r] = pick
        remaining[rows, pick] = False
    return out


def sample_rankings(head: RankingHead, scores, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Draw ``n_samples`` permutations per score vector.

    ``scores`` of shape ``(n,)`` gives ``(n_samples, n)``; a batch ``(B, n)``
    gives ``(B, n_samples, n)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return _sample_rows(head, np.broadcast_to(scores, (n_samples, scores.size)), rng)
    rows = np.repeat(scores, n_samples, axis=0)
    return _sample_rows(head, rows, rng).reshape(scores.shape[0], n_samples, scores.shape[1])


def sample_ranking(head: RankingHead, scores, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(i) for i in sample_rankings(head, scores, rng, 1)[0])


def modal_ranking(head: RankingHead, scores) -> np.ndarray:
    """Most probable permutation under the head.

    With one temperature across the list the mode is the sort-by-score order
    (ties by item id). Position-varying temperatures can move the mode, so
    lists of up to ``MAX_EXACT_ITEMS`` are enumerated; longer ones fall back
    to the sort order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    by_score = np.argsort(-scores, kind="stable")
    taus = head.taus(scores.size)[:-1]
    if taus.size == 0 or np.all(taus == taus[0]) or scores.size > MAX_EXACT_ITEMS:
        return by_score
    perms = all_permutations(scores.size)
    logp = head_log_prob(head, scores, perms)
    best = np.flatnonzero(logp == logp.max())
    # prefer the sort order among exact ties, then the lexicographically first
    for b in best:
        if np.array_equal(perms[b], by_score):
            return by_score
    return perms[best[0]].copy()


# ---------------------------------------------------------------- policies

@dataclass
class RankingPolicy:
    """Scoring net ``f`` (item features -> score) and a ranking head."""

    scorer: MlpParams
    head: RankingHead

    @classmethod
    def create(cls, feature_dim: int, hidden: list[int], rng: np.random.Generator,
               max_len: int, dropout: float = 0.0, head: RankingHead | None = None) -> "RankingPolicy":
        scorer = init_mlp([feature_dim, *hidden, 1], rng, dropout=dropout)
        return cls(scorer, head if head is not None else RankingHead.plackett_luce(max_len))

    def scores(self, features, masks=None) -> np.ndarray:
        return mlp_forward(self.scorer, features, masks)[:, 0]

    def copy(self) -> "RankingPolicy":
        return RankingPolicy(self.scorer.copy(), self.head.copy())

    def to_dict(self) -> dict:
        return {"format": "marank.model", "version": 1, "kind": "ranking_policy",
                "encoder": {"type": "item_features"}, "mlp": self.scorer.to_dict(),
                "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RankingPolicy":
        if doc.get("format") != "marank.model" or doc.get("kind") != "ranking_policy":
            raise ValueError("not a serialized ranking policy")
        head = RankingHead(np.asarray(doc["head"]["temperatures"]), float(doc["head"]["explore"]))
        return cls(MlpParams.from_dict(doc["mlp"]), head)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")


def per_ranking(fn):
    """Lift a ``permutation -> reward`` function to a batched ``(P, n) -> (P,)`` one."""
    def batched(perms):
        return np.array([fn(p) for p in np.atleast_2d(perms)], dtype=np.float64)
    return batched


class CachedReward:
    """Batched reward whose values are memoised per permutation (rewards are policy independent)."""

    def __init__(self, fn):
        self.fn = fn
        self._cache: dict[bytes, np.ndarray] = {}

    def __call__(self, perms):
        perms = np.atleast_2d(perms)
        key = perms.tobytes() + bytes([perms.shape[1]])
        hit = self._cache.get(key)
        if hit is None:
            hit = np.asarray(self.fn(perms), dtype=np.float64)
            self._cache[key] = hit
        return hit


@dataclass
class PolicyGradient:
    scorer: MlpParams
    log_tau: np.ndarray
    explore: float
    value: float
    stderr: float = 0.0
    score_grad: np.ndarray = field(default=None, repr=False)


def _check_mode(mode: str) -> None:
    if mode not in ("exact", "sampled"):
        raise ValueError(f"mode must be 'exact' or 'sampled', got {mode!r}")


def _centre(rewards: np.ndarray) -> float:
    # midrange: exact for constant rewards, so their value and gradient come out exact
    return 0.5 * (float(rewards.min()) + float(rewards.max()))


def expected_reward(policy: RankingPolicy, reward_fn, features, mode: str = "exact",
                    n_samples: int = 1000, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Expected reward under the policy and its standard error (0 in exact mode).

    ``reward_fn`` maps an ``(P, n)`` array of permutations to ``P`` rewards.
    Exact mode enumerates all ``n!`` rankings and refuses ``n > 7``.
    """
    _check_mode(mode)
    scores = policy.scores(features)
    if mode == "exact":
        perms = all_permutations(scores.size)
        probs = np.exp(head_log_prob(policy.head, scores, perms))
        rewards = reward_fn(perms)
        base = _centre(rewards)
        return float(base + probs @ (rewards - base)), 0.0
    if rng is None:
        raise ValueError("sampled mode needs an rng")
    rewards = reward_fn(sample_rankings(policy.head, scores, rng, n_samples))
    return float(rewards.mean()), float(rewards.std(ddof=1) / math.sqrt(n_samples))


def expected_reward_gradient(policy: RankingPolicy, reward_fn, features, mode: str = "exact",
                             rng: np.random.Generator | None = None,
                             n_samples: int = 1000, masks=None) -> PolicyGradient:
    """Gradient of the expected reward w.r.t. scorer weights, ``log tau`` and ``explore``.

    Exact mode differentiates ``sum_pi r(pi) Pr(pi)`` through the analytic
    log-probability gradient. Sampled mode uses the score-function estimator
    with a leave-one-out mean baseline, which keeps it unbiased. ``masks``
    are optional scorer dropout masks held fixed for this gradient.
    """
    _check_mode(mode)
    features = np.asarray(features, dtype=np.float64)
    scores = policy.scores(features, masks)
    if mode == "exact":
        perms = all_permutations(scores.size)
        logp, d_s, d_lt, d_eps = head_log_prob(policy.head, scores, perms, grad=True)
        rewards = reward_fn(perms)
        base = _centre(rewards)
        # probabilities sum to one, so centring leaves the gradient unchanged
        weight = np.exp(logp) * (rewards - base)
        value, stderr = float(base + weight.sum()), 0.0
    else:
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        if n_samples < 2:
            raise ValueError("sampled mode needs n_samples >= 2")
        perms = sample_rankings(policy.head, scores, rng, n_samples)
        _, d_s, d_lt, d_eps = head_log_prob(policy.head, scores, perms, grad=True)
        rewards = reward_fn(perms)
        weight = (rewards - rewards.mean()) / (n_samples - 1)
        value = float(rewards.mean())
        stderr = float(rewards.std(ddof=1) / math.sqrt(n_samples))
    g_scores = weight @ d_s
    g_scorer, _ = mlp_gradient(policy.scorer, features, g_scores[:, None], masks)
    return PolicyGradient(g_scorer, weight @ d_lt, float(weight @ d_eps), value, stderr, g_scores)


def apply_head_gradient(head: RankingHead, grad: PolicyGradient, lr: float) -> RankingHead:
    """Ascent step on ``log tau`` (positive temperatures only) and on ``explore`` (clipped)."""
    temps = head.temperatures.copy()
    live = temps > 0
    temps[live] = np.exp(np.log(temps[live]) + lr * grad.log_tau[live])
    explore = float(np.clip(head.explore + lr * grad.explore, 0.0, MAX_EXPLORE))
    return RankingHead(temps, explore)


@dataclass
class AlternatingTrace:
    blocks: list[int] = field(default_factory=list)
    expected_reward: list[float] = field(default_factory=list)


def alternating_detached_train(policy: RankingPolicy, reward_fns, sessions_features, steps_per_block: int,
                               blocks: int, lr: float, rng: np.random.Generator, mode: str = "exact",
                               n_samples: int = 256, head_lr: float | None = None,
                               train_head: bool = True):
    """Block-coordinate ascent: ``steps_per_block`` scorer steps with the head
    frozen, then as many head steps with the scorer frozen.

    ``reward_fns[i]`` scores permutations of session ``i``. The trace records
    the mean expected reward over sessions after every block (exact when all
    sessions are enumerable, else sampled).
    """
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    policy = policy.copy()
    head_lr = lr if head_lr is None else head_lr
    trace = AlternatingTrace()
    n_sess = len(sessions_features)

    def mean_grad():
        grads = [expected_reward_gradient(policy, fn, x, mode, rng, n_samples)
                 for fn, x in zip(reward_fns, sessions_features)]
        flat = sum(g.scorer.flat() for g in grads) / n_sess
        lt = sum(g.log_tau for g in grads) / n_sess
        ep = sum(g.explore for g in grads) / n_sess
        return PolicyGradient(policy.scorer.with_flat(flat), lt, ep, 0.0)

    for b in range(blocks):
        for _ in range(steps_per_block):
            g = mean_grad()
            policy.scorer = policy.scorer.with_flat(policy.scorer.flat() + lr * g.scorer.flat())
        if train_head:
            for _ in range(steps_per_block):
                policy.head = apply_head_gradient(policy.head, mean_grad(), head_lr)
        exact = all(np.asarray(x).shape[0] <= MAX_EXACT_ITEMS for x in sessions_features)
        values = [expected_reward(policy, fn, x, "exact" if exact else "sampled", n_samples, rng)[0]
                  for fn, x in zip(reward_fns, sessions_features)]
        trace.blocks.append(b)
        trace.expected_reward.append(float(np.mean(values)))
    return policy, trace
