"""Synthetic corpora for tests and the desk-scale experiments.

Two generators live here:

* ``drift_sequences`` produces real-valued embedding sequences whose
  adjacent differences follow a small set of deterministic cyclic patterns,
  so the next-step drift is fully predictable from the sequence.
* ``session_interactions`` produces an interaction log with topical
  sessions and realistic time gaps, standing in for a rating log when the
  real corpora are not at hand.
"""
from __future__ import annotations

import numpy as np

from .data import Interaction
from .numerics.rng import stream


def drift_patterns(seed: int, n_patterns: int, d: int, period: int = 3, scale: float = 1.0) -> np.ndarray:
    """``(n_patterns, period, d)`` drift vectors, each row of unit norm times ``scale``."""
    rng = stream(seed, "drift-patterns")
    v = rng.standard_normal((n_patterns, period, d))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * scale


def drift_sequences(seed: int, count: int, n: int, d: int, n_patterns: int = 8,
                    period: int = 3, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Sequences ``X`` of shape ``(count, n + 1, d)`` and their pattern ids.

    Row ``j + 1`` is row ``j`` plus the pattern's drift at phase
    ``(offset + j) % period``.  Both the pattern and the phase offset can be
    read off the first ``n`` rows, so the drift into row ``n`` (the target)
    is deterministic given the conditioning sequence.
    """
    patterns = drift_patterns(seed, n_patterns, d, period, scale)
    rng = stream(seed, "drift-sequences")
    ids = rng.integers(0, n_patterns, size=count)
    offset = rng.integers(0, period, size=count)
    start = rng.standard_normal((count, 1, d)) * 0.5
    phase = (offset[:, None] + np.arange(n)[None, :]) % period
    steps = patterns[ids[:, None], phase]  # (count, n, d)
    X = np.concatenate([start, start + np.cumsum(steps, axis=1)], axis=1)
    return X, ids


def session_interactions(seed: int, users: int = 200, items: int = 120, topics: int = 6,
                         sessions: tuple[int, int] = (3, 6), session_len: tuple[int, int] = (3, 7),
                         taste: float = 0.8, noise: float = 0.1, start_ts: int = 1_600_000_000) -> list[Interaction]:
    """Interaction log with topical sessions.

    Items are split evenly into ``topics`` and ordered within each topic.
    Each user prefers one topic (chosen with probability ``taste`` per
    session, otherwise a random topic).  Within a session the user walks
    forward through the topic's item order by one or two steps, with a small
    chance (``noise``) of a random jump.  Gaps inside a session are seconds
    to minutes; gaps between sessions are hours to days.
    """
    rng = stream(seed, "session-interactions")
    per_topic = items // topics
    if per_topic < 2:
        raise ValueError("need at least two items per topic")
    out: list[Interaction] = []
    for u in range(1, users + 1):
        fav = int(rng.integers(topics))
        ts = start_ts + int(rng.integers(0, 86400))
        for _ in range(int(rng.integers(sessions[0], sessions[1] + 1))):
            topic = fav if rng.random() < taste else int(rng.integers(topics))
            pos = int(rng.integers(per_topic))
            for _ in range(int(rng.integers(session_len[0], session_len[1] + 1))):
                item = 1 + topic * per_topic + pos
                out.append(Interaction(u, item, ts))
                ts += int(rng.integers(20, 600))
                if rng.random() < noise:
                    pos = int(rng.integers(per_topic))
                else:
                    pos = (pos + int(rng.integers(1, 3))) % per_topic
            ts += int(rng.integers(4 * 3600, 3 * 86400))
    return out


__all__ = ["drift_patterns", "drift_sequences", "session_interactions"]
