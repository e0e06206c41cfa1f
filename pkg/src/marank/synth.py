"""Seeded synthetic LETOR data with a planted linear relevance rule."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset, RankingSession, save_dataset
from .numeric import make_rng

DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5, 2.0)


def planted_direction(feature_dim: int, seed: int) -> np.ndarray:
    w = make_rng(seed, 0).normal(size=feature_dim)
    return w / np.linalg.norm(w)


def generate_synthetic(n_sessions: int, n_items: int, feature_dim: int, seed: int,
                       label_noise: float = 0.3, thresholds=DEFAULT_THRESHOLDS) -> tuple[Dataset, str]:
    """Sessions with ``N(0, I)`` features and graded labels from a noisy linear score.

    The latent relevance of an item is ``x . w + label_noise * e`` with a unit
    vector ``w`` and ``e ~ N(0, 1)``; its grade is the number of
    ``thresholds`` the latent value reaches. Features are rounded to 6 decimals.
    Returns the dataset and a header documenting the recipe.
    """
    if min(n_sessions, n_items, feature_dim) < 1:
        raise ValueError("n_sessions, n_items and feature_dim must be >= 1")
    w = planted_direction(feature_dim, seed)
    rng = make_rng(seed, 1)
    cuts = np.asarray(thresholds, dtype=np.float64)
    sessions = []
    for q in range(n_sessions):
        x = np.round(rng.normal(size=(n_items, feature_dim)), 6)
        latent = x @ w + label_noise * rng.normal(size=n_items)
        labels = np.sum(latent[:, None] >= cuts[None, :], axis=1)
        sessions.append(RankingSession(str(q + 1), x, labels))
    header = "\n".join([
        "marank synthetic LETOR data",
        f"seed={seed} n_sessions={n_sessions} n_items={n_items} feature_dim={feature_dim}",
        "features: x ~ N(0, I), rounded to 6 decimals",
        f"planted unit direction w = {np.round(w, 6).tolist()}",
        f"label = #thresholds <= x.w + {label_noise} * N(0, 1), thresholds = {cuts.tolist()}",
    ])
    return Dataset(sessions, feature_dim, len(cuts)), header


def gen_synthetic(n_sessions: int, n_items: int, feature_dim: int, seed: int, out_path,
                  label_noise: float = 0.3) -> Path:
    """Write :func:`generate_synthetic` output as a LETOR file and return its path."""
    dataset, header = generate_synthetic(n_sessions, n_items, feature_dim, seed, label_noise)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out_path, header)
    return out_path
