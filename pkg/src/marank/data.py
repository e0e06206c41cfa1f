"""LETOR / SVMlight ranking files: parsing, serialization, splits and min-max scaling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class LetorParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Item:
    item_id: int
    features: np.ndarray
    relevance_label: int


@dataclass(frozen=True, eq=False)
class RankingSession:
    """One query and its candidate items.

    ``labels`` is ``None`` on learner-facing copies (see :meth:`without_labels`);
    only the metric oracle and evaluation code hold labelled sessions.
    """

    query_id: str
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"session {self.query_id!r}: need an (n_items, d) feature matrix")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],) or np.any(labels < 0):
                raise ValueError(f"session {self.query_id!r}: bad label vector")
            object.__setattr__(self, "labels", labels)

    @property
    def n_items(self) -> int:
        return self.features.shape[0]

    @property
    def items(self) -> list[Item]:
        labels = self.labels if self.labels is not None else np.full(self.n_items, -1)
        return [Item(i, self.features[i], int(labels[i])) for i in range(self.n_items)]

    def without_labels(self) -> "RankingSession":
        return RankingSession(self.query_id, self.features, None)

    def __eq__(self, other):
        if not isinstance(other, RankingSession):
            return NotImplemented
        if self.query_id != other.query_id or self.features.shape != other.features.shape:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        same_labels = self.labels is None or np.array_equal(self.labels, other.labels)
        return same_labels and np.array_equal(self.features, other.features)


@dataclass(frozen=True, eq=False)
class Dataset:
    sessions: list[RankingSession]
    feature_dim: int
    max_grade: int
    norm_min: np.ndarray | None = field(default=None)
    norm_max: np.ndarray | None = field(default=None)

    def __len__(self):
        return len(self.sessions)

    def without_labels(self) -> list[RankingSession]:
        return [s.without_labels() for s in self.sessions]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.feature_dim == other.feature_dim and self.max_grade == other.max_grade
                and len(self.sessions) == len(other.sessions)
                and all(a == b for a, b in zip(self.sessions, other.sessions)))


def parse_letor_line(line: str, lineno: int | None = None) -> tuple[int, str, dict[int, float]]:
    """Parse ``<label> qid:<qid> (<idx>:<val>)* [# comment]``.

    Feature indices are 1-based and returned as given.

    >>> parse_letor_line("2 qid:7 1:0.5 3:1.25 # docA")
    (2, '7', {1: 0.5, 3: 1.25})
    """
    body = line.split("#", 1)[0]
    tokens = body.split()
    if not tokens:
        raise LetorParseError("missing label", lineno)
    try:
        label = int(tokens[0])
    except ValueError:
        raise LetorParseError(f"bad label token {tokens[0]!r}", lineno) from None
    if label < 0:
        raise LetorParseError(f"negative label {label}", lineno)
    if len(tokens) < 2 or not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
        raise LetorParseError("missing qid token", lineno)
    qid = tokens[1][4:]
    features: dict[int, float] = {}
    for tok in tokens[2:]:
        idx_s, sep, val_s = tok.partition(":")
        try:
            if not sep:
                raise ValueError
            idx = int(idx_s)
            val = float(val_s)
        except ValueError:
            raise LetorParseError(f"bad feature token {tok!r}", lineno) from None
        if idx < 1:
            raise LetorParseError(f"feature index must be >= 1 in {tok!r}", lineno)
        if not np.isfinite(val):
            raise LetorParseError(f"non-finite value in {tok!r}", lineno)
        if idx in features:
            raise LetorParseError(f"duplicate feature index {idx} in {tok!r}", lineno)
        features[idx] = val
    return label, qid, features


def parse_letor(text: str, feature_dim: int | None = None, max_grade: int | None = None) -> Dataset:
    """Build a :class:`Dataset` from LETOR text; blank and ``#`` lines are skipped."""
    rows: dict[str, list[tuple[int, dict[int, float]]]] = {}
    max_idx = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        label, qid, feats = parse_letor_line(stripped, lineno)
        if feats:
            max_idx = max(max_idx, max(feats))
        if feature_dim is not None and feats and max(feats) > feature_dim:
            raise LetorParseError(
                f"feature index {max(feats)} exceeds declared feature_dim {feature_dim}", lineno)
        rows.setdefault(qid, []).append((label, feats))
    if not rows:
        raise LetorParseError("no data lines")
    dim = feature_dim if feature_dim is not None else max(max_idx, 1)
    sessions = []
    top = 0
    for qid, items in rows.items():
        dense = np.zeros((len(items), dim))
        labels = np.empty(len(items), dtype=np.int64)
        for r, (label, feats) in enumerate(items):
            labels[r] = label
            for idx, val in feats.items():
                dense[r, idx - 1] = val
        top = max(top, int(labels.max()))
        sessions.append(RankingSession(qid, dense, labels))
    if max_grade is None:
        max_grade = max(top, 1)
    elif top > max_grade:
        raise LetorParseError(f"label {top} exceeds declared max grade {max_grade}")
    return Dataset(sessions, dim, max_grade)


def load_dataset(path, feature_dim: int | None = None, max_grade: int | None = None) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    return parse_letor(text, feature_dim=feature_dim, max_grade=max_grade)


def dumps_letor(dataset: Dataset, header: str | None = None) -> str:
    """Serialize to LETOR text. Every feature is written so the width survives a reparse."""
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    for s in dataset.sessions:
        if s.labels is None:
            raise ValueError(f"session {s.query_id!r} has no labels to serialize")
        for label, row in zip(s.labels, s.features):
            feats = " ".join(f"{k + 1}:{float(v)!r}" for k, v in enumerate(row))
            lines.append(f"{int(label)} qid:{s.query_id} {feats}")
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, path, header: str | None = None) -> None:
    Path(path).write_text(dumps_letor(dataset, header), encoding="utf-8")


def split_dataset(dataset: Dataset, fractions, rng: np.random.Generator) -> list[Dataset]:
    """Shuffle sessions and cut them into consecutive parts by ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions.tolist()} must be >= 0 and sum to 1")
    order = rng.permutation(len(dataset.sessions))
    bounds = np.round(np.cumsum(fractions) * len(order)).astype(int)
    parts, start = [], 0
    for stop in bounds:
        chosen = [dataset.sessions[i] for i in order[start:stop]]
        parts.append(replace(dataset, sessions=chosen))
        start = stop
    return parts


def minmax_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([s.features for s in dataset.sessions], axis=0)
    return stacked.min(axis=0), stacked.max(axis=0)


def minmax_normalize(dataset: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Map each feature to ``(v - min) / (max - min)``.

    Constant features map to 0. Values outside the stats range are not
    clipped, so test items may fall outside [0, 1].
    """
    if stats is None:
        lo, hi = minmax_stats(dataset)
    else:
        lo, hi = (np.asarray(a, dtype=np.float64) for a in stats)
        if lo.shape != (dataset.feature_dim,) or hi.shape != (dataset.feature_dim,):
            raise ValueError(f"stats have {lo.shape} entries, dataset has {dataset.feature_dim} features")
    span = hi - lo
    constant = span == 0
    safe = np.where(constant, 1.0, span)
    sessions = []
    for s in dataset.sessions:
        scaled = np.where(constant, 0.0, (s.features - lo) / safe)
        sessions.append(RankingSession(s.query_id, scaled, s.labels))
    return Dataset(sessions, dataset.feature_dim, dataset.max_grade, lo.copy(), hi.copy())
