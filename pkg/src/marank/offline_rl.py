"""Offline actor-critic over adjacent-flip transitions between rankings.

States are rankings of one session, an action ``a`` swaps positions ``a`` and
``a + 1``. The critic is a surrogate evaluated on the flipped ranking, the
actor a softmax over the ``n - 1`` possible flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .numeric import MlpParams, init_mlp, mlp_forward, mlp_gradient
from .surrogate import N_FIRST, ObservationSet, SurrogateModel, context_width, pooled_context


def flip(state, action: int) -> tuple[int, ...]:
    state = tuple(state)
    if not 0 <= action < len(state) - 1:
        raise ValueError(f"flip action {action} invalid for a ranking of {len(state)} items")
    out = list(state)
    out[action], out[action + 1] = out[action + 1], out[action]
    return tuple(out)


@dataclass(frozen=True)
class FlipTransition:
    session_id: str
    state: tuple[int, ...]
    action: int
    reward: float
    next_state: tuple[int, ...]

    def __post_init__(self):
        if flip(self.state, self.action) != tuple(self.next_state):
            raise ValueError("next_state must equal state with the action's positions swapped")


def flip_transitions(obs: ObservationSet) -> list[FlipTransition]:
    """Every ordered pair of observed rankings one adjacent flip apart.

    The reward of a transition is the observed score of the ranking it leads to.
    """
    out = []
    for qid, recs in obs.records.items():
        seen: dict[tuple[int, ...], float] = {}
        for perm, score in recs:
            seen.setdefault(perm, score)
        for state in seen:
            for a in range(len(state) - 1):
                nxt = flip(state, a)
                if nxt in seen:
                    out.append(FlipTransition(qid, state, a, seen[nxt], nxt))
    return out


def _ordered_pair_kendall(p: tuple[int, ...], q: tuple[int, ...]) -> tuple[int, int]:
    """(number of item pairs, number ordered differently by ``p`` and ``q``)."""
    pos = np.empty(len(q), dtype=np.int64)
    pos[list(q)] = np.arange(len(q))
    mapped = pos[list(p)]
    n = len(p)
    # pairs i < j in p's order whose positions in q are reversed
    discordant = int(np.sum(np.triu(mapped[:, None] > mapped[None, :], k=1)))
    return n * (n - 1) // 2, discordant


def ranking_jaccard_distance(p, q) -> float:
    """Jaccard distance between the sets of ordered item pairs of two rankings.

    Both sets have ``C = n(n-1)/2`` members, so with ``K`` discordant pairs
    the distance is ``2K / (C + K)``.
    """
    total, disc = _ordered_pair_kendall(tuple(p), tuple(q))
    if total == 0:
        return 0.0
    return 2.0 * disc / (total + disc)


def flip_jaccard_distance(state1, action1: int, state2, action2: int,
                          same_session: bool = True) -> float:
    """Distance of two state-action pairs: Jaccard distance of the flipped rankings.

    Pairs from different sessions are at the maximal distance 1.
    """
    if not same_session:
        return 1.0
    return ranking_jaccard_distance(flip(state1, action1), flip(state2, action2))


class TransitionIndex:
    """Lookup structure over logged transitions for nearest-neighbour queries."""

    def __init__(self, transitions: list[FlipTransition]):
        if not transitions:
            raise ValueError("need at least one observed transition")
        self.transitions = list(transitions)
        self._by_session: dict[str, list[FlipTransition]] = {}
        rewards: dict[tuple, list[float]] = {}
        for t in self.transitions:
            self._by_session.setdefault(t.session_id, []).append(t)
            rewards.setdefault((t.session_id, t.state, t.action), []).append(t.reward)
        self._mean_reward = {k: float(np.mean(v)) for k, v in rewards.items()}

    def nearest(self, session_id: str, state, action: int) -> tuple[FlipTransition | None, float]:
        """Closest logged transition and its distance (``(None, 1.0)`` for unseen sessions)."""
        best, best_d = None, 1.0
        target = flip(state, action)
        for t in self._by_session.get(session_id, []):
            d = ranking_jaccard_distance(target, t.next_state)
            if best is None or d < best_d:
                best, best_d = t, d
        return best, best_d

    def observed_reward(self, session_id: str, state, action: int) -> float | None:
        return self._mean_reward.get((session_id, tuple(state), action))


def pseudometric_F(session_id: str, state, action: int, index: TransitionIndex,
                   alpha_r: float) -> float:
    """Pseudometric between ``(state, action)`` and its nearest logged transition.

    Reward gap ``|r(s,a) - r(s*,a*)|`` (taken as 0 when ``(s, a)`` was never
    observed) plus ``alpha_r`` times the exact mean, over all adjacent flips
    ``a'``, of the distance between the two next states after ``a'``.
    """
    nearest, _ = index.nearest(session_id, state, action)
    if nearest is None:
        return 1.0 + alpha_r
    own = index.observed_reward(session_id, state, action)
    gap = abs(own - nearest.reward) if own is not None else 0.0
    s1 = flip(state, action)
    s2 = nearest.next_state
    n_actions = len(s1) - 1
    if n_actions < 1:
        raise ValueError("rankings of one item admit no flip")
    follow = np.mean([ranking_jaccard_distance(flip(s1, a), flip(s2, a)) for a in range(n_actions)])
    return gap + alpha_r * float(follow)


# ---------------------------------------------------------------- actor-critic

@dataclass
class FlipActor:
    """Softmax policy over adjacent flips; logits score each flipped ranking's context."""

    params: MlpParams
    n_first: int = N_FIRST

    @classmethod
    def create(cls, feature_dim: int, hidden: list[int], rng: np.random.Generator) -> "FlipActor":
        return cls(init_mlp([context_width(feature_dim, N_FIRST), *hidden, 1], rng))

    def _contexts(self, features, state):
        return pooled_context(features, np.array([flip(state, a) for a in range(len(state) - 1)]),
                              self.n_first)

    def probs(self, features, state) -> np.ndarray:
        return softmax(mlp_forward(self.params, self._contexts(features, state))[:, 0])


@dataclass(frozen=True)
class ACAlphas:
    reward: float = 0.5
    critic: float = 0.0
    actor: float = 0.0


def q_values(critic: SurrogateModel, features, state) -> np.ndarray:
    """``Q(s, a)`` for every adjacent flip ``a`` of ``state``."""
    return critic.predict(features, np.array([flip(state, a) for a in range(len(state) - 1)]))


def critic_target(critic: SurrogateModel, actor: FlipActor, features, t: FlipTransition,
                  index: TransitionIndex | None, alphas: ACAlphas) -> float:
    """Bootstrapped target ``r + a_r E[Q(s', .)] + a_c E[F(s', .)]`` under the actor."""
    nxt = t.next_state
    probs = actor.probs(features, nxt)
    target = t.reward + alphas.reward * float(probs @ q_values(critic, features, nxt))
    if alphas.critic:
        f = np.array([pseudometric_F(t.session_id, nxt, a, index, alphas.reward)
                      for a in range(len(nxt) - 1)])
        target += alphas.critic * float(probs @ f)
    return target


def critic_loss(critic: SurrogateModel, features, t: FlipTransition, target: float):
    """``(Q(s, a) - target)^2 / 2`` with ``target`` held constant; returns ``(loss, grads, td)``."""
    x = pooled_context(features, np.array(flip(t.state, t.action)), critic.n_first)
    td = float(mlp_forward(critic.params, x)[0]) - target
    grads, _ = mlp_gradient(critic.params, x, np.array([td]))
    return 0.5 * td * td, grads, td


def actor_objective(actor: FlipActor, critic: SurrogateModel, features, session_id: str, state,
                    index: TransitionIndex | None, alphas: ACAlphas):
    """``sum_a pi(a|s) [Q(s, a) + alpha_a F(s, a)]`` and its exact gradient in the actor weights."""
    ctx = actor._contexts(features, state)
    probs = softmax(mlp_forward(actor.params, ctx)[:, 0])
    value = q_values(critic, features, state)
    if alphas.actor:
        value = value + alphas.actor * np.array(
            [pseudometric_F(session_id, state, a, index, alphas.reward) for a in range(len(state) - 1)])
    d_logits = probs * (value - probs @ value)
    grads, _ = mlp_gradient(actor.params, ctx, d_logits[:, None])
    return float(probs @ value), grads


def offline_ac_step(critic: SurrogateModel, actor: FlipActor, features, t: FlipTransition,
                    index: TransitionIndex | None, alphas: ACAlphas, lr: float,
                    actor_lr: float | None = None):
    """One critic regression step followed by one exact policy-gradient actor step.

    The critic moves ``Q(s, a)`` towards the (constant) bootstrapped target.
    The actor ascends :func:`actor_objective` under the updated critic.
    Returns ``(critic, actor, td_error)``.
    """
    features = np.asarray(features, dtype=np.float64)
    target = critic_target(critic, actor, features, t, index, alphas)
    _, grads, td = critic_loss(critic, features, t, target)
    critic = SurrogateModel(critic.params.with_flat(critic.params.flat() - lr * grads.flat()),
                            critic.n_first)
    _, agrads = actor_objective(actor, critic, features, t.session_id, t.state, index, alphas)
    step = lr if actor_lr is None else actor_lr
    actor = FlipActor(actor.params.with_flat(actor.params.flat() + step * agrads.flat()), actor.n_first)
    return critic, actor, td


def train_offline_ac(critic: SurrogateModel, actor: FlipActor, obs: ObservationSet,
                     transitions: list[FlipTransition], alphas: ACAlphas, lr: float, epochs: int,
                     rng: np.random.Generator, actor_lr: float | None = None):
    """Sweep shuffled logged transitions ``epochs`` times; returns ``(critic, actor, mean |td| per epoch)``."""
    index = TransitionIndex(transitions)
    trace = []
    for _ in range(epochs):
        errs = []
        for i in rng.permutation(len(transitions)):
            t = transitions[i]
            critic, actor, td = offline_ac_step(critic, actor, obs.sessions[t.session_id].features,
                                                t, index, alphas, lr, actor_lr)
            errs.append(abs(td))
        trace.append(float(np.mean(errs)))
    return critic, actor, trace
