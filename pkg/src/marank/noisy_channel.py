"""Ranking optimisation through a Gaussian noisy channel over observed item swaps.

For a current ranking ``pi`` and pivot position ``i``, each observed swapped
ranking ``pi_ij`` gets a channel weight ``Gamma_ij`` and the pivot's expected
score is the Gamma-weighted mean of the observed scores. Gamma depends on
item scores through a Gaussian CDF, which makes that mean differentiable in
the scoring net's weights.

Convention: in ``Gamma_ij`` the score at position ``i`` is that of the item
the swap moves *onto* position ``i``, so a swap lifting a higher-scored item
is the likelier one. ``Gamma_ii`` (keep ``pi`` itself, allowed when ``pi``
is observed) is the zero-mean value 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import MlpParams, gaussian_cdf, gaussian_pdf, mlp_forward, mlp_gradient


class NoObservedFlip(ValueError):
    """No swapped ranking around the pivot has been observed."""


def noisy_channel_prob(s_i: float, s_j: float, i: int, j: int, sigma: float = 1.0) -> float:
    """Mass below zero of ``N((s_i - s_j) * sign(i - j), sigma)``."""
    if i == j:
        raise ValueError("channel needs two distinct positions")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return gaussian_cdf(0.0, (s_i - s_j) * np.sign(i - j), sigma)


def swap(perm, i: int, j: int) -> tuple[int, ...]:
    out = list(perm)
    out[i], out[j] = out[j], out[i]
    return tuple(out)


@dataclass
class NoisyChannelModel:
    scorer: MlpParams
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def scores(self, features) -> np.ndarray:
        return mlp_forward(self.scorer, features)[:, 0]


def _terms(scores: np.ndarray, perm: tuple[int, ...], i: int, observed: dict, sigma: float):
    """(j, Gamma, d Gamma / d scores, observed score) for every usable swap at pivot ``i``."""
    n = len(perm)
    out = []
    if perm in observed:
        out.append((i, 0.5, np.zeros(n), observed[perm]))
    for j in range(n):
        if j == i:
            continue
        flipped = swap(perm, i, j)
        if flipped not in observed:
            continue
        up, down = perm[j], perm[i]  # items landing on i and on j
        gamma = noisy_channel_prob(scores[up], scores[down], i, j, sigma)
        # Gamma = Phi(-(s_up - s_down) * sign(i - j) / sigma)
        sgn = float(np.sign(i - j))
        dens = gaussian_pdf(-(scores[up] - scores[down]) * sgn / sigma) / sigma
        d = np.zeros(n)
        d[up] -= sgn * dens
        d[down] += sgn * dens
        out.append((j, gamma, d, observed[flipped]))
    if not any(j != i for j, *_ in out):
        raise NoObservedFlip(f"no observed swap of position {i} in {perm}")
    return out


def expected_flip_score(model: NoisyChannelModel, features, observed: dict, i: int, perm) -> float:
    """Gamma-weighted mean of the observed scores of rankings reachable by swapping position ``i``.

    ``observed`` maps permutation tuples to observed metric values.
    """
    scores = model.scores(features)
    terms = _terms(scores, tuple(int(p) for p in perm), i, observed, model.sigma)
    gammas = np.array([t[1] for t in terms])
    values = np.array([t[3] for t in terms])
    return float(gammas @ values / gammas.sum())


def current_ranking(model: NoisyChannelModel, features) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(-model.scores(features), kind="stable"))


def channel_objective(model: NoisyChannelModel, data) -> tuple[float, MlpParams]:
    """Sum over sessions and pivots of the expected flip score, with its weight gradient.

    ``data`` is a list of ``(features, observed)`` or ``(features, observed,
    pivots)`` tuples. The current ranking of each session is the model's
    sort-by-score order. Pivots default to every position; a pivot with no
    observed swap raises :class:`NoObservedFlip`.
    """
    total = 0.0
    grad = model.scorer.zeros_like().flat()
    for entry in data:
        features, observed = entry[0], entry[1]
        features = np.asarray(features, dtype=np.float64)
        scores = model.scores(features)
        perm = tuple(int(i) for i in np.argsort(-scores, kind="stable"))
        pivots = entry[2] if len(entry) > 2 else range(len(perm))
        d_scores = np.zeros(scores.size)
        for i in pivots:
            terms = _terms(scores, perm, i, observed, model.sigma)
            gammas = np.array([t[1] for t in terms])
            values = np.array([t[3] for t in terms])
            norm = gammas.sum()
            m = gammas @ values / norm
            total += m
            for (_, _, d_gamma, value) in terms:
                d_scores += (value - m) / norm * d_gamma
        g, _ = mlp_gradient(model.scorer, features, d_scores[:, None])
        grad += g.flat()
    return float(total), model.scorer.with_flat(grad)


def noisy_channel_step(model: NoisyChannelModel, data, lr: float) -> tuple[NoisyChannelModel, float]:
    """One gradient-ascent step on :func:`channel_objective`; returns the new model and
    the objective before the step."""
    value, grad = channel_objective(model, data)
    scorer = model.scorer.with_flat(model.scorer.flat() + lr * grad.flat())
    return NoisyChannelModel(scorer, model.sigma), value
