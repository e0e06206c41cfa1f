"""Efficient optimisation: simple/complex gradient mixing, reward uncertainty and
data collection policies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numeric import MlpParams, mc_dropout_stats, mlp_forward, mlp_gradient, sample_dropout_masks
from .ranking import RankingPolicy, all_permutations, head_log_prob, sample_rankings
from .surrogate import SurrogateModel, pooled_context

PRESENTATION_KINDS = ("top_k", "random", "uncertainty_aware")
MAX_EXACT_UNCERTAINTY = 6


@dataclass(frozen=True)
class MixSchedule:
    """Weight ``phi(t)`` of the complex objective; ``1 - phi`` goes to the simple one.

    ``exponential``: ``1 - exp(-t / time_constant)``; ``linear``:
    ``min(1, t / horizon)``; ``constant``: ``value``.
    """

    kind: str = "exponential"
    time_constant: float = 100.0
    horizon: float = 100.0
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("exponential", "linear", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "exponential" and self.time_constant <= 0:
            raise ValueError("time_constant must be positive")
        if self.kind == "linear" and self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.kind == "constant" and not 0.0 <= self.value <= 1.0:
            raise ValueError("constant weight must lie in [0, 1]")


def phi(t: float, schedule: MixSchedule) -> float:
    if t < 0:
        raise ValueError("step t must be >= 0")
    if schedule.kind == "exponential":
        out = -math.expm1(-t / schedule.time_constant)
    elif schedule.kind == "linear":
        out = t / schedule.horizon
    else:
        out = schedule.value
    return min(1.0, max(0.0, out))


def multitask_update(theta: np.ndarray, grad_complex: np.ndarray, grad_simple: np.ndarray, t: float,
                     schedule: MixSchedule, lr: float) -> np.ndarray:
    """``theta + lr * (phi * grad_complex + (1 - phi) * grad_simple)``; both grads are ascent directions."""
    theta = np.asarray(theta, dtype=np.float64)
    grad_complex = np.asarray(grad_complex, dtype=np.float64)
    grad_simple = np.asarray(grad_simple, dtype=np.float64)
    if grad_complex.shape != theta.shape or grad_simple.shape != theta.shape:
        raise ValueError(f"gradient shapes {grad_complex.shape}, {grad_simple.shape} != {theta.shape}")
    w = phi(t, schedule)
    return theta + lr * (w * grad_complex + (1.0 - w) * grad_simple)


def pairwise_label_loss(scorer: MlpParams, features, labels) -> tuple[float, MlpParams]:
    """Pairwise logistic loss ``-sum_{l_i > l_j} log sigmoid(s_i - s_j)`` on graded labels."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    s = mlp_forward(scorer, features)[:, 0]
    hi, lo = np.nonzero(labels[:, None] > labels[None, :])
    diff = s[hi] - s[lo]
    loss = float(np.sum(np.logaddexp(0.0, -diff)))
    d = -expit(-diff)
    up = np.zeros(s.size)
    np.add.at(up, hi, d)
    np.add.at(up, lo, -d)
    grads, _ = mlp_gradient(scorer, features, up[:, None])
    return loss, grads


# ---------------------------------------------------------------- uncertainty

def ranking_reward_variance(g_mean, delta, p_mean, epsilon):
    """Variance of ``g * p`` for independent ``g ~ N(g_mean, delta^2)``, ``p ~ N(p_mean, epsilon^2)``."""
    delta = np.asarray(delta, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if np.any(delta < 0) or np.any(epsilon < 0):
        raise ValueError("standard deviations must be >= 0")
    g_mean = np.asarray(g_mean, dtype=np.float64)
    p_mean = np.asarray(p_mean, dtype=np.float64)
    out = g_mean ** 2 * epsilon ** 2 + p_mean ** 2 * delta ** 2 + epsilon ** 2 * delta ** 2
    return float(out) if out.ndim == 0 else out


@dataclass
class UncertaintyEstimate:
    perms: np.ndarray
    g_mean: np.ndarray
    delta: np.ndarray
    p_mean: np.ndarray
    epsilon: np.ndarray

    @property
    def variances(self) -> np.ndarray:
        return ranking_reward_variance(self.g_mean, self.delta, self.p_mean, self.epsilon)

    @property
    def total(self) -> float:
        """Session-level uncertainty: square root of the summed per-ranking variances."""
        return float(math.sqrt(np.sum(self.variances)))


def _support(policy: RankingPolicy, features, mode: str, n_support: int, rng) -> np.ndarray:
    n = features.shape[0]
    if mode == "exact":
        if n > MAX_EXACT_UNCERTAINTY:
            raise ValueError(f"exact uncertainty limited to n <= {MAX_EXACT_UNCERTAINTY}")
        return all_permutations(n)
    if mode != "sampled":
        raise ValueError(f"mode must be 'exact' or 'sampled', got {mode!r}")
    draws = sample_rankings(policy.head, policy.scores(features), rng, n_support)
    _, first = np.unique(draws, axis=0, return_index=True)
    return draws[np.sort(first)]


def session_uncertainty(policy: RankingPolicy, surrogate: SurrogateModel, features, mode: str,
                        n_dropout: int, rng: np.random.Generator,
                        n_support: int = 64) -> UncertaintyEstimate:
    """MC-dropout uncertainty of the surrogate reward and of the ranking probability.

    ``delta`` is the dropout std of ``g``; ``epsilon`` the dropout std of the
    head probability when the scorer runs with dropout. The support is every
    ranking (exact, ``n <= 6``) or distinct rankings sampled from the policy.
    """
    if n_dropout < 2:
        raise ValueError("n_dropout must be >= 2")
    features = np.asarray(features, dtype=np.float64)
    perms = _support(policy, features, mode, n_support, rng)
    g_mean, g_var = mc_dropout_stats(surrogate.params, pooled_context(features, perms, surrogate.n_first),
                                     n_dropout, rng)
    if all(r == 0.0 for r in policy.scorer.dropout):
        p = np.exp(head_log_prob(policy.head, policy.scores(features), perms))
        p_mean, p_std = p, np.zeros_like(p)
    else:
        draws = np.stack([
            np.exp(head_log_prob(policy.head,
                                 policy.scores(features, sample_dropout_masks(policy.scorer, rng,
                                                                              (features.shape[0],))),
                                 perms))
            for _ in range(n_dropout)])
        p_mean, p_std = draws.mean(axis=0), draws.std(axis=0, ddof=1)
    return UncertaintyEstimate(perms, g_mean[:, 0], np.sqrt(g_var[:, 0]), p_mean, p_std)


def select_from_estimates(estimates: list[UncertaintyEstimate], budget_k: int) -> list[tuple[int, tuple[int, ...]]]:
    """Pick up to ``budget_k`` sessions by descending total uncertainty and, in each,
    the ranking with the largest reward variance.

    Ties go to the earlier session and the lexicographically smaller permutation.
    """
    if budget_k < 1:
        raise ValueError("budget_k must be >= 1")
    if not estimates:
        raise ValueError("no sessions to select from")
    totals = np.array([e.total for e in estimates])
    order = np.argsort(-totals, kind="stable")[:budget_k]
    picks = []
    for idx in order:
        est = estimates[idx]
        var = est.variances
        best = np.flatnonzero(var == var.max())
        perm = min(tuple(int(i) for i in est.perms[b]) for b in best)
        picks.append((int(idx), perm))
    return picks


def active_select(sessions_features, policy: RankingPolicy, surrogate: SurrogateModel, budget_k: int,
                  mode: str, rng: np.random.Generator, n_dropout: int = 16, n_support: int = 64):
    """Uncertainty-driven choice of ``(session index, ranking)`` pairs to query.

    Returns ``(picks, estimates)`` so callers can log the tables behind the choice.
    """
    if not sessions_features:
        raise ValueError("no sessions to select from")
    estimates = [session_uncertainty(policy, surrogate, x, mode, n_dropout, rng, n_support)
                 for x in sessions_features]
    return select_from_estimates(estimates, budget_k), estimates


def presentation_policy(kind: str, scores, score_stds=None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Ranking to show: by score, uniformly at random, or by score plus its std.

    Score ties resolve to the lower item id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if kind == "top_k":
        return np.argsort(-scores, kind="stable")
    if kind == "random":
        if rng is None:
            raise ValueError("random presentation needs an rng")
        return rng.permutation(scores.size)
    if kind == "uncertainty_aware":
        if score_stds is None:
            raise ValueError("uncertainty_aware presentation needs score_stds")
        return np.argsort(-(scores + np.asarray(score_stds, dtype=np.float64)), kind="stable")
    raise ValueError(f"unknown presentation kind {kind!r}; expected one of {PRESENTATION_KINDS}")
