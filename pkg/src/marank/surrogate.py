"""Offline surrogate metric models learned from sparse, noisy list-level observations.

A surrogate ``g`` maps the local context of a ranking (its item features in
ranked order) to a predicted metric value. A noise-observation model ``o``
scores how likely an observed value is unreliable; the two are trained in
alternation, each weighting the other's pairwise loss.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import RankingSession
from .metrics import check_permutation
from .numeric import MlpParams, init_mlp, mlp_forward, mlp_gradient

FORMAT_VERSION = 1
N_FIRST = 5
N_NOISE_FEATURES = 3


class EmptyPairsError(ValueError):
    """The observations contain no strictly ordered ranking pair."""

    def __init__(self, message: str = "fewer than one valid pair"):
        super().__init__(message)


# ---------------------------------------------------------------- context

def context_matrix(features: np.ndarray, permutation) -> np.ndarray:
    """Item features in ranked order, each row extended with ``1 / rank``."""
    features = np.asarray(features, dtype=np.float64)
    perm = check_permutation(permutation, features.shape[0])
    inv_rank = 1.0 / np.arange(1, perm.size + 1)
    return np.column_stack([features[perm], inv_rank])


def context_width(feature_dim: int, n_first: int = N_FIRST) -> int:
    return (2 + n_first) * (feature_dim + 1)


def pooled_context(features: np.ndarray, perms: np.ndarray, n_first: int = N_FIRST) -> np.ndarray:
    """Fixed-width surrogate input for one or many rankings of a session.

    Concatenates a ``1/rank``-weighted mean of the context rows, their
    elementwise max, and the first ``n_first`` rows (zero padded). ``perms``
    may be a single permutation or an ``(P, n)`` array; the result has shape
    ``(P, (2 + n_first) * (d + 1))`` or the corresponding 1-D vector.
    """
    features = np.asarray(features, dtype=np.float64)
    perms = np.asarray(perms)
    single = perms.ndim == 1
    perms = np.atleast_2d(perms)
    n, d = features.shape
    if perms.shape[1] != n:
        raise ValueError(f"permutations of length {perms.shape[1]} for a session of {n} items")
    weights = 1.0 / np.arange(1, n + 1)
    rows = np.empty((perms.shape[0], n, d + 1))
    rows[:, :, :d] = features[perms]
    rows[:, :, d] = weights
    mean = np.einsum("r,prk->pk", weights / weights.sum(), rows)
    peak = rows.max(axis=1)
    head = np.zeros((perms.shape[0], n_first, d + 1))
    keep = min(n, n_first)
    head[:, :keep] = rows[:, :keep]
    out = np.concatenate([mean, peak, head.reshape(perms.shape[0], -1)], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------- models

@dataclass
class SurrogateModel:
    """``g``: pooled ranking context -> predicted metric value."""

    params: MlpParams
    n_first: int = N_FIRST

    @classmethod
    def create(cls, feature_dim: int, hidden: list[int], rng: np.random.Generator,
               dropout: float = 0.0, n_first: int = N_FIRST) -> "SurrogateModel":
        sizes = [context_width(feature_dim, n_first), *hidden, 1]
        return cls(init_mlp(sizes, rng, dropout=dropout), n_first)

    def predict(self, features: np.ndarray, perms: np.ndarray) -> np.ndarray:
        x = pooled_context(features, np.atleast_2d(perms), self.n_first)
        return mlp_forward(self.params, x)[:, 0]

    def to_dict(self) -> dict:
        return {"format": "marank.model", "version": FORMAT_VERSION, "kind": "surrogate",
                "encoder": {"type": "pooled_context", "n_first": self.n_first},
                "mlp": self.params.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SurrogateModel":
        _check_doc(doc, "surrogate")
        return cls(MlpParams.from_dict(doc["mlp"]), int(doc["encoder"]["n_first"]))


@dataclass
class NoiseObservationModel:
    """``o``: noise-factor features ``[score, n_items, score - session mean]`` -> logit."""

    params: MlpParams

    @classmethod
    def create(cls, hidden: list[int], rng: np.random.Generator) -> "NoiseObservationModel":
        return cls(init_mlp([N_NOISE_FEATURES, *hidden, 1], rng))

    def to_dict(self) -> dict:
        return {"format": "marank.model", "version": FORMAT_VERSION, "kind": "noise_observation",
                "encoder": {"type": "noise_factors", "features": ["score", "n_items", "deviation"]},
                "mlp": self.params.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseObservationModel":
        _check_doc(doc, "noise_observation")
        return cls(MlpParams.from_dict(doc["mlp"]))


def _check_doc(doc: dict, kind: str) -> None:
    if doc.get("format") != "marank.model" or doc.get("kind") != kind:
        raise ValueError(f"not a serialized {kind} model")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------- observations

@dataclass
class ObservationSet:
    """Observed ``(ranking, score)`` records grouped by session, in arrival order."""

    sessions: dict[str, RankingSession] = field(default_factory=dict)
    records: dict[str, list[tuple[tuple[int, ...], float]]] = field(default_factory=dict)

    def add(self, session: RankingSession, permutation, score: float) -> None:
        perm = tuple(int(p) for p in check_permutation(permutation, session.n_items))
        if session.query_id not in self.sessions:
            self.sessions[session.query_id] = session.without_labels()
            self.records[session.query_id] = []
        self.records[session.query_id].append((perm, float(score)))

    def __len__(self) -> int:
        return sum(len(r) for r in self.records.values())

    def n_pairs(self) -> int:
        return sum(_session_pairs(np.array([s for _, s in recs]))[0].size
                   for recs in self.records.values())


def pair_pref_prob(score_plus, score_minus):
    """``e^a / (e^a + e^b)`` computed as ``sigmoid(a - b)``."""
    out = expit(np.asarray(score_plus, dtype=np.float64) - np.asarray(score_minus, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def _session_pairs(scores: np.ndarray):
    plus, minus = np.nonzero(scores[:, None] > scores[None, :])
    return plus, minus


@dataclass
class _Block:
    """Pre-computed inputs of one session (or a concatenation of several)."""

    ctx: np.ndarray
    xo: np.ndarray
    plus: np.ndarray
    minus: np.ndarray


def _session_block(session: RankingSession, recs, n_first: int) -> _Block:
    perms = np.array([p for p, _ in recs])
    scores = np.array([s for _, s in recs])
    xo = np.column_stack([scores, np.full(scores.size, float(session.n_items)),
                          scores - scores.mean()])
    plus, minus = _session_pairs(scores)
    return _Block(pooled_context(session.features, perms, n_first), xo, plus, minus)


def _concat(blocks: list[_Block]) -> _Block:
    offsets = np.cumsum([0] + [b.ctx.shape[0] for b in blocks[:-1]])
    return _Block(np.concatenate([b.ctx for b in blocks]), np.concatenate([b.xo for b in blocks]),
                  np.concatenate([b.plus + o for b, o in zip(blocks, offsets)]),
                  np.concatenate([b.minus + o for b, o in zip(blocks, offsets)]))


def _blocks(obs: ObservationSet, n_first: int) -> list[_Block]:
    return [_session_block(obs.sessions[q], recs, n_first) for q, recs in obs.records.items()]


def _pair_loss(params: MlpParams, x: np.ndarray, plus, minus, weights):
    """``-sum w * log sigmoid(out[plus] - out[minus])`` and its parameter gradient."""
    out = mlp_forward(params, x)[:, 0]
    diff = out[plus] - out[minus]
    loss = float(np.sum(weights * np.logaddexp(0.0, -diff)))
    d_diff = -weights * expit(-diff)
    upstream = np.zeros(out.size)
    np.add.at(upstream, plus, d_diff)
    np.add.at(upstream, minus, -d_diff)
    grads, _ = mlp_gradient(params, x, upstream[:, None])
    return loss, grads


def _surrogate_weights(o: NoiseObservationModel | None, block: _Block) -> np.ndarray:
    if o is None:
        return np.full(block.plus.size, 0.5)
    logits = mlp_forward(o.params, block.xo)[:, 0]
    return 1.0 - expit(logits[block.plus] - logits[block.minus])


def _noise_weights(g: SurrogateModel, block: _Block) -> np.ndarray:
    preds = mlp_forward(g.params, block.ctx)[:, 0]
    return 1.0 - expit(preds[block.plus] - preds[block.minus])


def weighted_surrogate_loss(g: SurrogateModel, o: NoiseObservationModel | None, obs: ObservationSet):
    """Noise-weighted pairwise loss of ``g`` and its gradient.

    Each pair is weighted by ``1 - Pr(pair | o)``, held constant. Passing
    ``o=None`` uses the uniform weight 0.5 for every pair.
    """
    block = _concat(_blocks(obs, g.n_first)) if obs.records else None
    if block is None or block.plus.size == 0:
        raise EmptyPairsError()
    return _pair_loss(g.params, block.ctx, block.plus, block.minus, _surrogate_weights(o, block))


def noise_model_loss(o: NoiseObservationModel, g: SurrogateModel, obs: ObservationSet):
    """Pairwise loss of ``o`` weighted by ``1 - Pr(pair | g)`` (held constant)."""
    block = _concat(_blocks(obs, g.n_first)) if obs.records else None
    if block is None or block.plus.size == 0:
        raise EmptyPairsError()
    return _pair_loss(o.params, block.xo, block.plus, block.minus, _noise_weights(g, block))


def regression_loss(g: SurrogateModel, obs: ObservationSet):
    """Squared error ``sum (g(ctx) - m)^2 / 2`` over all observations, with gradient."""
    if not obs.records:
        raise ValueError("no observations")
    block = _concat(_blocks(obs, g.n_first))
    target = block.xo[:, 0]
    resid = mlp_forward(g.params, block.ctx)[:, 0] - target
    grads, _ = mlp_gradient(g.params, block.ctx, resid[:, None])
    return 0.5 * float(resid @ resid), grads


@dataclass
class JointTrace:
    epochs: list[int] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    loss_o: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss_g", "loss_o"])
            for row in zip(self.epochs, self.loss_g, self.loss_o):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def joint_train(g: SurrogateModel, o: NoiseObservationModel, obs: ObservationSet, epochs: int,
                lr: float, rng: np.random.Generator, batch_sessions: int = 8,
                uniform_weights: bool = False):
    """Alternate passes over the noise-weighted losses of ``g`` and ``o``.

    Each epoch makes one shuffled minibatch pass updating ``g`` with ``o``
    frozen, then one pass updating ``o`` with ``g`` frozen. Steps use the
    loss averaged over the pairs in the minibatch. With ``uniform_weights``
    every pair gets weight 0.5 and ``o`` is left untouched.

    Returns ``(g, o, trace)``; the trace holds the mean per-pair loss of each pass.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    blocks = [b for b in _blocks(obs, g.n_first) if b.plus.size]
    if not blocks:
        raise EmptyPairsError()
    gp, op = g.params.copy(), o.params.copy()
    trace = JointTrace()
    for epoch in range(epochs):
        losses = []
        for batch in _minibatches(blocks, batch_sessions, rng):
            w = (np.full(batch.plus.size, 0.5) if uniform_weights
                 else _surrogate_weights(NoiseObservationModel(op), batch))
            loss, grads = _pair_loss(gp, batch.ctx, batch.plus, batch.minus, w)
            gp = gp.with_flat(gp.flat() - lr * grads.flat() / batch.plus.size)
            losses.append((loss, batch.plus.size))
        loss_g = sum(l for l, _ in losses) / sum(c for _, c in losses)
        losses = []
        for batch in _minibatches(blocks, batch_sessions, rng):
            w = _noise_weights(SurrogateModel(gp, g.n_first), batch)
            loss, grads = _pair_loss(op, batch.xo, batch.plus, batch.minus, w)
            if not uniform_weights:
                op = op.with_flat(op.flat() - lr * grads.flat() / batch.plus.size)
            losses.append((loss, batch.plus.size))
        loss_o = sum(l for l, _ in losses) / sum(c for _, c in losses)
        trace.epochs.append(epoch)
        trace.loss_g.append(loss_g)
        trace.loss_o.append(loss_o)
    return SurrogateModel(gp, g.n_first), NoiseObservationModel(op), trace


def fit_regression(g: SurrogateModel, obs: ObservationSet, epochs: int, lr: float,
                   rng: np.random.Generator, batch_sessions: int = 8) -> SurrogateModel:
    """Minibatch SGD on the squared-error head."""
    blocks = _blocks(obs, g.n_first)
    if not blocks:
        raise ValueError("no observations")
    gp = g.params.copy()
    for _ in range(epochs):
        for batch in _minibatches(blocks, batch_sessions, rng):
            resid = mlp_forward(gp, batch.ctx)[:, 0] - batch.xo[:, 0]
            grads, _ = mlp_gradient(gp, batch.ctx, resid[:, None])
            gp = gp.with_flat(gp.flat() - lr * grads.flat() / resid.size)
    return SurrogateModel(gp, g.n_first)


def _minibatches(blocks: list[_Block], size: int, rng: np.random.Generator):
    order = rng.permutation(len(blocks))
    for start in range(0, len(order), size):
        yield _concat([blocks[i] for i in order[start:start + size]])


def pairwise_agreement(scores_a: np.ndarray, scores_b: np.ndarray) -> float:
    """Fraction of strictly ordered pairs under ``scores_b`` that ``scores_a`` orders the same way."""
    plus, minus = _session_pairs(np.asarray(scores_b))
    if plus.size == 0:
        return float("nan")
    return float(np.mean(np.asarray(scores_a)[plus] > np.asarray(scores_a)[minus]))
