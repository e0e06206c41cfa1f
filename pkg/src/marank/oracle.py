"""Budgeted black-box metric oracle.

Learners get a :class:`MetricOracle` and can only ask "what does this ranking
score?". Labels, gains and per-position contributions never leave this module.
Evaluation code that legitimately holds labelled sessions uses
:func:`peek_true_metric` instead, which costs no budget.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RankingSession
from .metrics import EngagementParams, check_permutation, engagement_score, err, ndcg

METRIC_KINDS = ("ndcg", "err", "engagement")


class BudgetExhausted(RuntimeError):
    """No oracle queries left; online collection has to stop."""


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "ndcg"
    k: int = 10
    noise_sigma: float = 0.0
    max_grade: int = 4
    engagement: EngagementParams = field(default_factory=EngagementParams)

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.k < 1:
            raise ValueError("cutoff k must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "k": self.k, "noise_sigma": self.noise_sigma,
            "max_grade": self.max_grade,
            "engagement": {
                "gamma": self.engagement.gamma, "redundancy": self.engagement.redundancy,
                "diversity": self.engagement.diversity,
                "cluster_threshold": self.engagement.cluster_threshold,
                "version": self.engagement.version,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricSpec":
        doc = dict(doc)
        eng = EngagementParams(**doc.pop("engagement", {}))
        return cls(engagement=eng, **doc)


def _noiseless(spec: MetricSpec, session: RankingSession, permutation) -> float:
    if session.labels is None:
        raise ValueError(f"session {session.query_id!r} carries no labels")
    if spec.kind == "ndcg":
        return ndcg(session.labels, permutation, spec.k)
    if spec.kind == "err":
        return err(session.labels, permutation, spec.max_grade)
    return engagement_score(session.labels, session.features, permutation, spec.engagement)


def peek_true_metric(spec: MetricSpec, session: RankingSession, permutation) -> float:
    """Noiseless metric value for evaluation code that owns labelled sessions."""
    return _noiseless(spec, session, permutation)


class MetricOracle:
    """Scores rankings of its private sessions, adding noise and charging budget.

    Sessions are addressed by ``query_id``. Every successful query is logged.
    """

    def __init__(self, spec: MetricSpec, sessions, budget: int, rng: np.random.Generator):
        if budget < 0:
            raise ValueError("budget must be >= 0")
        self.spec = spec
        self._sessions = {s.query_id: s for s in sessions}
        self._initial = int(budget)
        self._budget = int(budget)
        self._rng = rng
        self._log: list[dict] = []
        self._lock = threading.Lock()

    @property
    def budget(self) -> int:
        return self._budget

    @property
    def initial_budget(self) -> int:
        return self._initial

    @property
    def used(self) -> int:
        return self._initial - self._budget

    @property
    def log(self) -> list[dict]:
        return [dict(entry, permutation=list(entry["permutation"])) for entry in self._log]

    def query(self, session_id: str, permutation) -> float:
        session = self._sessions.get(session_id)
        if session is None:
            raise KeyError(f"oracle knows no session {session_id!r}")
        perm = check_permutation(permutation, session.n_items)
        with self._lock:
            if self._budget <= 0:
                raise BudgetExhausted(f"oracle budget of {self._initial} queries is spent")
            score = _noiseless(self.spec, session, perm)
            if self.spec.noise_sigma > 0:
                score += float(self._rng.normal(0.0, self.spec.noise_sigma))
            self._budget -= 1
            self._log.append({"session_id": session_id, "permutation": [int(p) for p in perm],
                              "score": score, "budget_after": self._budget})
        return score

    def export_log(self, path) -> None:
        """Write the query log as JSON Lines."""
        with open(Path(path), "w", encoding="utf-8") as fh:
            for entry in self._log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
