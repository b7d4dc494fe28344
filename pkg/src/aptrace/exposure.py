"""Cumulative exposure scores.

A user's exposure at epoch t sums the contact-graph edge weights to every
positive user j whose positive time t_j satisfies t_j <= t <= t_j + tau_s;
each weight is read from the graph snapshot built at t_j.  Timelines are
piecewise constant, changing only when a positive's activity window opens or
closes, and are evaluated with the same summation as the pointwise score so
the two agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .graph import ContactGraph
from .truth import TruthSet

GraphAt = Callable[[int], ContactGraph]


@dataclass(frozen=True)
class ExposureParams:
    """Activity window (epochs) after a neighbor's positive, and the score threshold."""

    tau_s: int
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.tau_s <= 0:
            raise ValueError(f"tau_s must be positive, got {self.tau_s}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass(frozen=True)
class ExposureTimeline:
    """Piecewise-constant score samples (strictly increasing epochs)."""

    user_id: str
    epochs: np.ndarray  # int64
    scores: np.ndarray  # float64

    def value_at(self, t: int) -> float:
        """Score at epoch t; 0.0 before the first sample."""
        pos = int(np.searchsorted(self.epochs, t, side="right")) - 1
        if pos < 0:
            return 0.0
        return float(self.scores[pos])

    def samples(self) -> list[tuple[int, float]]:
        return [(int(e), float(s)) for e, s in zip(self.epochs, self.scores)]


def _canonical_positives(truth: TruthSet) -> list[tuple[int, str]]:
    """Positives ordered by (positive time, user id); fixes summation order."""
    return sorted((t, u) for u, t in truth.positives.items())


def _weight_vector(
    user: str, positives: Sequence[tuple[int, str]], graph_at: GraphAt
) -> np.ndarray:
    """w(user, j) at each positive j's own snapshot, in canonical order."""
    return np.array(
        [graph_at(t_j).weight(user, j) for t_j, j in positives], dtype=np.float64
    )


def _score(weights: np.ndarray, times: np.ndarray, tau_s: int, t: int) -> float:
    active = (times <= t) & (t <= times + tau_s)
    return float(weights[active].sum())


def exposure_score(
    user: str,
    t: int,
    truth: TruthSet,
    graph_at: GraphAt,
    params: ExposureParams,
) -> float:
    """Exposure score of ``user`` at epoch ``t``."""
    positives = _canonical_positives(truth)
    if not positives:
        return 0.0
    weights = _weight_vector(user, positives, graph_at)
    times = np.array([tj for tj, _ in positives], dtype=np.int64)
    return _score(weights, times, params.tau_s, t)


def _change_points(times: np.ndarray, tau_s: int, study_range: tuple[int, int]) -> np.ndarray:
    lo, hi = study_range
    points = np.concatenate([[lo, hi], times, times + tau_s + 1])
    points = np.unique(points)
    return points[(points >= lo) & (points <= hi)]


def exposure_timeline(
    user: str,
    truth: TruthSet,
    graph_at: GraphAt,
    params: ExposureParams,
    study_range: tuple[int, int],
) -> ExposureTimeline:
    """Score timeline over the study, sampled at every change point."""
    lo, hi = study_range
    if lo > hi:
        raise ValueError(f"empty study range {study_range}")
    positives = _canonical_positives(truth)
    times = np.array([tj for tj, _ in positives], dtype=np.int64)
    weights = (
        _weight_vector(user, positives, graph_at)
        if positives
        else np.empty(0, dtype=np.float64)
    )
    epochs = _change_points(times, params.tau_s, study_range)
    scores = np.array(
        [_score(weights, times, params.tau_s, int(t)) for t in epochs], dtype=np.float64
    )
    return ExposureTimeline(user_id=user, epochs=epochs, scores=scores)


def exposure_timelines(
    users: Iterable[str],
    truth: TruthSet,
    graph_at: GraphAt,
    params: ExposureParams,
    study_range: tuple[int, int],
) -> dict[str, ExposureTimeline]:
    """Timelines for many users, sharing one snapshot pass per positive.

    Produces exactly the same samples as per-user ``exposure_timeline``.
    """
    lo, hi = study_range
    if lo > hi:
        raise ValueError(f"empty study range {study_range}")
    users = list(users)
    positives = _canonical_positives(truth)
    times = np.array([tj for tj, _ in positives], dtype=np.int64)
    epochs = _change_points(times, params.tau_s, study_range)

    # One neighbor-map fetch per positive covers every queried user.
    weight_rows = np.zeros((len(users), len(positives)), dtype=np.float64)
    for col, (t_j, j) in enumerate(positives):
        nbrs = graph_at(t_j).neighbor_weights(j)
        for row, user in enumerate(users):
            w = nbrs.get(user)
            if w is not None and user != j:
                weight_rows[row, col] = w

    out: dict[str, ExposureTimeline] = {}
    for row, user in enumerate(users):
        scores = np.array(
            [_score(weight_rows[row], times, params.tau_s, int(t)) for t in epochs],
            dtype=np.float64,
        )
        out[user] = ExposureTimeline(user_id=user, epochs=epochs.copy(), scores=scores)
    return out


def first_crossing(timeline: ExposureTimeline, gamma: float) -> int | None:
    """Earliest epoch whose score is >= gamma (inclusive), if any.

    Scores change only at sample epochs, so the first qualifying sample is
    the first qualifying epoch.
    """
    hits = np.flatnonzero(timeline.scores >= gamma)
    if len(hits) == 0:
        return None
    return int(timeline.epochs[hits[0]])
