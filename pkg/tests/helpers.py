"""Small builders shared by the test modules."""

import numpy as np

from marank.data import RankingSession
from marank.numeric import make_rng
from marank.oracle import MetricSpec, peek_true_metric
from marank.surrogate import ObservationSet


def labelled_sessions(n_sessions, n_items, dim, seed, max_label=4, label_noise=0.3):
    rng = make_rng(seed)
    w = rng.normal(size=dim)
    out = []
    for q in range(n_sessions):
        x = rng.normal(size=(n_items, dim))
        latent = x @ w + label_noise * rng.normal(size=n_items)
        labels = np.clip(np.round(latent + 1.5), 0, max_label).astype(int)
        out.append(RankingSession(f"q{q}", x, labels))
    return out


def observe(sessions, spec, per_session, seed, noise=0.0, outlier_frac=0.0, outlier_scale=1.0):
    """Random distinct rankings per session scored by the true metric.

    ``noise`` adds Gaussian noise to every score; a fraction ``outlier_frac``
    of observations additionally gets a ``N(0, outlier_scale^2)`` corruption.
    """
    rng = make_rng(seed)
    obs = ObservationSet()
    for s in sessions:
        seen = set()
        while len(seen) < per_session:
            perm = tuple(int(i) for i in rng.permutation(s.n_items))
            if perm in seen:
                continue
            seen.add(perm)
            value = peek_true_metric(spec, s, perm) + noise * rng.normal()
            if outlier_frac and rng.random() < outlier_frac:
                value += outlier_scale * rng.normal()
            obs.add(s, perm, value)
    return obs


NDCG5 = MetricSpec("ndcg", k=5)


def rel_err(a, b, floor=1e-6):
    """Max componentwise relative error; ``floor`` keeps roundoff on zero entries from dominating."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))
