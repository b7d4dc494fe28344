"""Validation metrics for contact prediction.

Contact-level metrics treat each positive case i as a query at their positive
time t_i: graph neighbors with weight >= gamma are the predicted contacts, a
prediction is a true positive when the contact tests positive within tau_p
epochs, and PPV / scale aggregate these counts over all cases.  Exposure-level
metrics classify whole individuals from the first threshold crossing of their
exposure timeline.  A user is excluded from the candidate pool V(t) once
positive: V(t) contains labeled users with no positive at or before t.

Note the operating conventions used throughout: threshold comparisons are
inclusive (>= gamma), the "true positive rate" of the exposure classifier is
TP/(TP+FP) (the precision of flagged users) and the missed detection rate is
FN/(TP+FN).  Ratios with an empty denominator are reported as None rather
than silently coerced to zero.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, replace
from datetime import date, timedelta
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exposure import ExposureTimeline, first_crossing
from .graph import GraphParams, SnapshotProvider, subsample_users
from .ingest import EpochConfig, Records
from .truth import TruthSet


class MetricsError(ValueError):
    """Raised for unusable metric inputs (e.g. no positive cases)."""


@dataclass(frozen=True)
class EvalParams:
    """Evaluation thresholds and horizons, all durations in epochs."""

    gamma: float
    tau_p: int
    tau_g: int
    alpha: float = 1.0
    tau_s: int = 672

    def __post_init__(self) -> None:
        if self.tau_p <= 0:
            raise ValueError(f"tau_p must be positive, got {self.tau_p}")
        if self.tau_g <= 0:
            raise ValueError(f"tau_g must be positive, got {self.tau_g}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.tau_s <= 0:
            raise ValueError(f"tau_s must be positive, got {self.tau_s}")


@dataclass(frozen=True)
class CaseOutcome:
    """Prediction outcome for one positive case."""

    user_id: str
    t_positive: int
    predicted: tuple[str, ...]
    true_positives: tuple[str, ...]

    @property
    def r_hat(self) -> int:
        return len(self.true_positives)


@dataclass(frozen=True)
class ValidationReport:
    """Aggregated contact-prediction results at one operating point."""

    params: EvalParams
    population: int
    n_positives: int
    tp: int
    fp: int
    ppv: float | None
    ppv_rand: float
    scale: float
    wilson_95: tuple[float, float] | None
    per_case: tuple[CaseOutcome, ...]

    def as_dict(self) -> dict[str, object]:
        return {
            "params": {
                "gamma": self.params.gamma,
                "tau_p": self.params.tau_p,
                "tau_g": self.params.tau_g,
                "alpha": self.params.alpha,
                "tau_s": self.params.tau_s,
            },
            "population": self.population,
            "n_positives": self.n_positives,
            "tp": self.tp,
            "fp": self.fp,
            "ppv": self.ppv,
            "ppv_rand": self.ppv_rand,
            "scale": self.scale,
            "wilson_95": list(self.wilson_95) if self.wilson_95 else None,
            "per_case": [
                {
                    "user_id": c.user_id,
                    "t_positive": c.t_positive,
                    "predicted": list(c.predicted),
                    "r_hat": c.r_hat,
                }
                for c in self.per_case
            ],
        }


@dataclass(frozen=True)
class RocPoint:
    """Exposure-classifier counts at one threshold."""

    gamma: float
    tp: int
    fp: int
    tn: int
    fn: int
    excluded: int
    tpr: float | None
    mdr: float | None


@dataclass(frozen=True)
class RiskPoint:
    """Odds-ratio sample for one date."""

    epoch: int
    n_above: int
    n_below: int
    pos_above: int
    pos_below: int
    ratio: float | None


@dataclass(frozen=True)
class HighSpreadRow:
    """One (AP, local hour) cell in a high-spread ranking."""

    basis: str  # "percentage" or "count"
    ap_id: str
    day: date
    hour: int
    total_users: int
    positive_counts: dict[int, int]  # horizon days -> positives
    pct: float  # positive share at the ranking horizon


def wilson_interval(
    successes: int, trials: int, confidence: float = 0.95
) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise MetricsError(f"trials must be positive, got {trials}")
    if not 0 <= successes <= trials:
        raise MetricsError(f"successes {successes} outside [0, {trials}]")
    if not 0 < confidence < 1:
        raise MetricsError(f"confidence must be in (0, 1), got {confidence}")
    z = NormalDist().inv_cdf((1 + confidence) / 2)
    phat = successes / trials
    denom = 1 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _sorted_positives(truth: TruthSet) -> list[tuple[int, str]]:
    return sorted((t, u) for u, t in truth.positives.items())


def _candidate_pool_size(truth: TruthSet, t: int, times_sorted: Sequence[int]) -> int:
    """|V(t)|: labeled users with no positive at or before t."""
    return len(truth.population) - bisect_right(times_sorted, t)


def evaluate_cases(
    truth: TruthSet, graph_at, params: EvalParams
) -> tuple[CaseOutcome, ...]:
    """Predicted contacts and their outcomes for every positive case."""
    positives = _sorted_positives(truth)
    if not positives:
        raise MetricsError("truth set contains no positive cases")
    pop = truth.population
    pos_times = truth.positives
    cases: list[CaseOutcome] = []
    for t_i, i in positives:
        nbrs = graph_at(t_i).neighbor_weights(i)
        predicted = sorted(
            j
            for j, w in nbrs.items()
            if w >= params.gamma
            and j in pop
            and not (j in pos_times and pos_times[j] <= t_i)
        )
        tps = tuple(
            j
            for j in predicted
            if j in pos_times and t_i < pos_times[j] <= t_i + params.tau_p
        )
        cases.append(
            CaseOutcome(user_id=i, t_positive=t_i, predicted=tuple(predicted), true_positives=tps)
        )
    return tuple(cases)


def contact_ppv(truth: TruthSet, graph_at, params: EvalParams) -> ValidationReport:
    """Positive predictive value and scale of predicted contacts.

    PPV = TP / (TP + FP) over all cases; scale = (TP + FP) / |P|.  PPV is
    None when no contacts are returned at all.
    """
    cases = evaluate_cases(truth, graph_at, params)
    tp = sum(c.r_hat for c in cases)
    fp = sum(len(c.predicted) - c.r_hat for c in cases)
    returned = tp + fp
    ppv = tp / returned if returned else None
    wilson = wilson_interval(tp, returned) if returned else None
    return ValidationReport(
        params=params,
        population=len(truth.population),
        n_positives=len(cases),
        tp=tp,
        fp=fp,
        ppv=ppv,
        ppv_rand=ppv_rand(truth, params.tau_p),
        scale=returned / len(cases),
        wilson_95=wilson,
        per_case=cases,
    )


def contact_ppv_sweep(
    truth: TruthSet, graph_at, params: EvalParams, gammas: Iterable[float]
) -> list[ValidationReport]:
    """contact_ppv at each threshold; snapshots are shared across thresholds."""
    return [contact_ppv(truth, graph_at, replace(params, gamma=g)) for g in gammas]


def ppv_rand(truth: TruthSet, tau_p: int) -> float:
    """Expected precision of contacts drawn uniformly from the candidate pool."""
    positives = _sorted_positives(truth)
    if not positives:
        raise MetricsError("truth set contains no positive cases")
    times = [t for t, _ in positives]
    terms = []
    for t_i, _ in positives:
        pool = _candidate_pool_size(truth, t_i, times)
        later = bisect_right(times, t_i + tau_p) - bisect_right(times, t_i)
        terms.append(later / pool if pool else 0.0)
    return float(np.mean(terms))


def plausible_transmissions(
    truth: TruthSet, graph_at, params: EvalParams
) -> dict[int, int]:
    """Histogram of per-case plausible transmissions (above-threshold contacts
    that test positive within tau_p)."""
    cases = evaluate_cases(truth, graph_at, params)
    hist: dict[int, int] = {}
    for c in cases:
        hist[c.r_hat] = hist.get(c.r_hat, 0) + 1
    return dict(sorted(hist.items()))


def exposure_roc(
    truth: TruthSet,
    timelines: Mapping[str, ExposureTimeline],
    gammas: Iterable[float],
    tau_p: int,
) -> list[RocPoint]:
    """Classify every labeled user from their first timeline crossing.

    Per threshold: a crossing after the user's positive excludes them; a
    crossing at most tau_p epochs before the positive is a TP; any other
    crossing is an FP; no crossing is a TN for negatives and an FN for
    positives.
    """
    missing = truth.population - set(timelines)
    if missing:
        raise MetricsError(f"timelines missing for {len(missing)} labeled users")
    points: list[RocPoint] = []
    for gamma in gammas:
        tp = fp = tn = fn = excluded = 0
        for user in truth.population:
            crossing = first_crossing(timelines[user], gamma)
            t_pos = truth.positives.get(user)
            if crossing is None:
                if t_pos is None:
                    tn += 1
                else:
                    fn += 1
            elif t_pos is None:
                fp += 1
            elif crossing > t_pos:
                excluded += 1
            elif t_pos - crossing <= tau_p:
                tp += 1
            else:
                fp += 1
        points.append(
            RocPoint(
                gamma=gamma,
                tp=tp,
                fp=fp,
                tn=tn,
                fn=fn,
                excluded=excluded,
                tpr=tp / (tp + fp) if tp + fp else None,
                mdr=fn / (tp + fn) if tp + fn else None,
            )
        )
    return points


def risk_ratio_series(
    truth: TruthSet,
    timelines: Mapping[str, ExposureTimeline],
    gamma: float,
    tau_p: int,
    dates: Iterable[int],
) -> list[RiskPoint]:
    """Odds ratio of a near-term positive for users above vs below gamma.

    Users already positive by the date are not at risk and are left out.
    The ratio is None whenever either group is empty or its odds are
    degenerate (no positives below, or everyone positive above).
    """
    points: list[RiskPoint] = []
    for d in dates:
        d = int(d)
        above_n = below_n = above_pos = below_pos = 0
        for user in truth.population:
            t_pos = truth.positives.get(user)
            if t_pos is not None and t_pos <= d:
                continue
            hit = t_pos is not None and d < t_pos <= d + tau_p
            if timelines[user].value_at(d) >= gamma:
                above_n += 1
                above_pos += int(hit)
            else:
                below_n += 1
                below_pos += int(hit)
        ratio: float | None = None
        if above_n and below_n:
            p_a = above_pos / above_n
            p_b = below_pos / below_n
            denom = (1 - p_a) * p_b
            if denom > 0:
                ratio = (p_a * (1 - p_b)) / denom
        points.append(
            RiskPoint(
                epoch=d,
                n_above=above_n,
                n_below=below_n,
                pos_above=above_pos,
                pos_below=below_pos,
                ratio=ratio,
            )
        )
    return points


def new_case_series(
    truth: TruthSet, tau_p: int, dates: Iterable[int]
) -> list[tuple[int, int]]:
    """Count of new positives in (d, d + tau_p] for each date epoch d."""
    times = sorted(truth.positives.values())
    out = []
    for d in dates:
        d = int(d)
        out.append((d, bisect_right(times, d + tau_p) - bisect_right(times, d)))
    return out


def sensitivity(
    records: Records,
    truth: TruthSet,
    params: EvalParams,
    fractions: Iterable[float] = (1.0, 0.75, 0.5),
    seed: int = 0,
    threads: int = 1,
) -> dict[float, ValidationReport]:
    """Re-run contact_ppv at reduced participation.

    For each fraction, a random subset of users is retained, the truth set is
    restricted to them, and graphs are rebuilt from the retained records only.
    """
    reports: dict[float, ValidationReport] = {}
    for fraction in fractions:
        sub = subsample_users(records, fraction, seed=seed + round(fraction * 10_000))
        provider = SnapshotProvider(
            sub, GraphParams(tau_g=params.tau_g, alpha=params.alpha), threads=threads
        )
        reports[fraction] = contact_ppv(truth.restrict(set(sub.users)), provider, params)
    return reports


def high_spread_events(
    records: Records,
    truth: TruthSet,
    cfg: EpochConfig | None = None,
    utc_offset_minutes: int = 0,
    min_users: int = 10,
    tau_p_days: tuple[int, ...] = (7, 14),
    top_k: int = 10,
) -> list[HighSpreadRow]:
    """Rank (AP, local wall-clock hour) cells by subsequent positives.

    For every cell the distinct users present are counted, along with how
    many of them test positive within each horizon after the hour ends.  Two
    rankings are produced at the largest horizon: by positive percentage
    (restricted to cells with at least ``min_users``) and by absolute
    positive count; each AP appears at most once per ranking.
    """
    cfg = cfg or EpochConfig()
    if len(records) == 0:
        return []
    local = records.epoch * cfg.epoch_seconds + cfg.origin_unix + utc_offset_minutes * 60
    hour_key = local // 3600
    triples = np.stack(
        [records.ap_code.astype(np.int64), hour_key, records.user_code.astype(np.int64)],
        axis=1,
    )
    uniq = np.unique(triples, axis=0)

    pos_times = truth.positives
    horizon_epochs = {d: d * cfg.epochs_per_day for d in tau_p_days}
    rank_tau = max(tau_p_days)

    cells: list[tuple[str, int, int, dict[int, int]]] = []
    boundaries = np.ones(len(uniq), dtype=bool)
    boundaries[1:] = np.any(uniq[1:, :2] != uniq[:-1, :2], axis=1)
    starts = np.flatnonzero(boundaries)
    ends = np.append(starts[1:], len(uniq))
    for s, e in zip(starts, ends):
        ap_code = int(uniq[s, 0])
        hkey = int(uniq[s, 1])
        members = [records.users[int(u)] for u in uniq[s:e, 2]]
        # Last epoch that falls inside this hour, in epoch units.
        hour_last = ((hkey + 1) * 3600 - cfg.origin_unix - utc_offset_minutes * 60 - 1) // cfg.epoch_seconds
        counts: dict[int, int] = {}
        for days, h_epochs in horizon_epochs.items():
            counts[days] = sum(
                1
                for u in members
                if u in pos_times and hour_last < pos_times[u] <= hour_last + h_epochs
            )
        cells.append((records.aps[ap_code], hkey, len(members), counts))

    def row(basis: str, cell: tuple[str, int, int, dict[int, int]]) -> HighSpreadRow:
        ap, hkey, total, counts = cell
        day = date(1970, 1, 1) + timedelta(days=int(hkey // 24))
        return HighSpreadRow(
            basis=basis,
            ap_id=ap,
            day=day,
            hour=int(hkey % 24),
            total_users=total,
            positive_counts=counts,
            pct=counts[rank_tau] / total,
        )

    def top(basis: str, pool: list, key) -> list[HighSpreadRow]:
        seen: set[str] = set()
        out: list[HighSpreadRow] = []
        for cell in sorted(pool, key=key):
            if cell[0] in seen:
                continue
            seen.add(cell[0])
            out.append(row(basis, cell))
            if len(out) >= top_k:
                break
        return out

    pct_pool = [c for c in cells if c[2] >= min_users]
    pct_rows = top(
        "percentage",
        pct_pool,
        key=lambda c: (-(c[3][rank_tau] / c[2]), -c[3][rank_tau], c[0], c[1]),
    )
    count_rows = top(
        "count",
        cells,
        key=lambda c: (-c[3][rank_tau], -(c[3][rank_tau] / c[2]) if c[2] else 0.0, c[0], c[1]),
    )
    return pct_rows + count_rows
