"""Ground-truth label inference from building occupancy patterns.

Residents of a building are users repeatedly detected on its APs during a
quiet early-morning hour; positives are dorm residents who later show the
same sustained pattern in an isolation dorm.  The window hour and the
detection-count threshold tau_r are both calibrated against known occupancy
or capacity numbers by minimizing mean squared error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Mapping, TextIO

import numpy as np

from .ingest import EpochConfig, Records

ROLES = ("regular_dorm", "isolation_dorm", "other")

_EPOCH_DATE = date(1970, 1, 1)


class TruthError(ValueError):
    """Raised for unusable truth-inference inputs."""


@dataclass(frozen=True)
class BuildingInfo:
    """A building, its role on campus, and the APs installed in it."""

    building_id: str
    role: str
    ap_ids: frozenset[str]
    capacity: int | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown building role {self.role!r}; expected one of {ROLES}")


@dataclass(frozen=True)
class ResidencyParams:
    """Morning-window residency inference parameters."""

    window_hour: int = 4
    tau_r: int = 3
    utc_offset_minutes: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.window_hour < 24:
            raise ValueError(f"window_hour must be in [0, 24), got {self.window_hour}")
        if self.tau_r < 0:
            raise ValueError(f"tau_r must be non-negative, got {self.tau_r}")


@dataclass(frozen=True)
class TruthSet:
    """Per-user labels: positive (with first-detection epoch) or assumed negative."""

    positives: dict[str, int]
    negatives: frozenset[str]
    provenance: str = "inferred"

    def __post_init__(self) -> None:
        overlap = set(self.positives) & self.negatives
        if overlap:
            raise ValueError(f"users labeled both positive and negative: {sorted(overlap)[:5]}")

    @property
    def population(self) -> frozenset[str]:
        return frozenset(self.positives) | self.negatives

    def label(self, user: str) -> str | None:
        if user in self.positives:
            return "positive"
        if user in self.negatives:
            return "assumed_negative"
        return None

    def positive_time(self, user: str) -> int | None:
        return self.positives.get(user)

    def restrict(self, users: Iterable[str]) -> "TruthSet":
        keep = set(users)
        return TruthSet(
            positives={u: t for u, t in self.positives.items() if u in keep},
            negatives=frozenset(u for u in self.negatives if u in keep),
            provenance=self.provenance,
        )

    def write_csv(self, stream: TextIO) -> None:
        stream.write("user_id,label,positive_epoch\n")
        for user in sorted(self.population):
            t = self.positives.get(user)
            if t is None:
                stream.write(f"{user},assumed_negative,\n")
            else:
                stream.write(f"{user},positive,{t}\n")

    @classmethod
    def read_csv(cls, source: TextIO, provenance: str = "injected") -> "TruthSet":
        reader = csv.reader(source)
        header = next(reader, None)
        expected = ["user_id", "label", "positive_epoch"]
        if header is None or [h.strip() for h in header[:3]] != expected:
            raise TruthError(f"truth CSV must have header {','.join(expected)}")
        positives: dict[str, int] = {}
        negatives: set[str] = set()
        for row in reader:
            if not row:
                continue
            user, label = row[0], row[1]
            if label == "positive":
                positives[user] = int(row[2])
            elif label == "assumed_negative":
                negatives.add(user)
            else:
                raise TruthError(f"unknown label {label!r} for user {user}")
        return cls(positives=positives, negatives=frozenset(negatives), provenance=provenance)


def load_buildings_csv(source: TextIO) -> list[BuildingInfo]:
    """Load buildings from rows of ``ap_id,building_id,role,capacity``."""
    reader = csv.reader(source)
    header = next(reader, None)
    expected = ["ap_id", "building_id", "role", "capacity"]
    if header is None or [h.strip() for h in header[:4]] != expected:
        raise TruthError(f"buildings CSV must have header {','.join(expected)}")
    aps: dict[str, set[str]] = {}
    roles: dict[str, str] = {}
    capacities: dict[str, int | None] = {}
    ap_owner: dict[str, str] = {}
    for row in reader:
        if not row:
            continue
        ap_id, building_id, role = row[0], row[1], row[2]
        capacity = int(row[3]) if len(row) > 3 and row[3].strip() else None
        if ap_id in ap_owner and ap_owner[ap_id] != building_id:
            raise TruthError(f"AP {ap_id} assigned to multiple buildings")
        ap_owner[ap_id] = building_id
        aps.setdefault(building_id, set()).add(ap_id)
        if building_id in roles and roles[building_id] != role:
            raise TruthError(f"building {building_id} has conflicting roles")
        roles[building_id] = role
        if capacity is not None:
            capacities[building_id] = capacity
        capacities.setdefault(building_id, None)
    return [
        BuildingInfo(
            building_id=b,
            role=roles[b],
            ap_ids=frozenset(aps[b]),
            capacity=capacities[b],
        )
        for b in sorted(aps)
    ]


def write_buildings_csv(buildings: Iterable[BuildingInfo], stream: TextIO) -> None:
    stream.write("ap_id,building_id,role,capacity\n")
    for b in sorted(buildings, key=lambda x: x.building_id):
        cap = "" if b.capacity is None else str(b.capacity)
        for ap in sorted(b.ap_ids):
            stream.write(f"{ap},{b.building_id},{b.role},{cap}\n")


@dataclass(frozen=True)
class _Located:
    """Records joined to buildings with local-time day/hour columns."""

    buildings: tuple[BuildingInfo, ...]
    user_code: np.ndarray
    building_idx: np.ndarray
    epoch: np.ndarray
    day: np.ndarray  # local days since 1970-01-01
    hour: np.ndarray  # local hour of day
    users: tuple[str, ...]


def _locate(
    records: Records,
    buildings: Iterable[BuildingInfo],
    cfg: EpochConfig,
    utc_offset_minutes: int,
) -> _Located:
    blds = tuple(sorted(buildings, key=lambda b: b.building_id))
    ap_to_b = np.full(max(len(records.aps), 1), -1, dtype=np.int64)
    seen: dict[str, int] = {}
    for idx, b in enumerate(blds):
        for ap in b.ap_ids:
            if ap in seen:
                raise TruthError(f"AP {ap} assigned to multiple buildings")
            seen[ap] = idx
    for code, ap in enumerate(records.aps):
        if ap in seen:
            ap_to_b[code] = seen[ap]
    b_idx = ap_to_b[records.ap_code]
    mask = b_idx >= 0
    epoch = records.epoch[mask]
    local = epoch * cfg.epoch_seconds + cfg.origin_unix + utc_offset_minutes * 60
    return _Located(
        buildings=blds,
        user_code=records.user_code[mask].astype(np.int64),
        building_idx=b_idx[mask],
        epoch=epoch,
        day=local // 86400,
        hour=(local % 86400) // 3600,
        users=records.users,
    )


def _day_to_date(day: int) -> date:
    return _EPOCH_DATE + timedelta(days=int(day))


def _date_to_day(d: date) -> int:
    return (d - _EPOCH_DATE).days


def hourly_device_counts(
    records: Records,
    buildings: Iterable[BuildingInfo],
    hour: int,
    cfg: EpochConfig | None = None,
    utc_offset_minutes: int = 0,
) -> dict[tuple[str, date], int]:
    """Distinct users per (building, local date) seen within [hour, hour+1).

    Buildings/dates with no detections are simply absent (count 0).
    """
    if not 0 <= hour < 24:
        raise ValueError(f"hour must be in [0, 24), got {hour}")
    cfg = cfg or EpochConfig()
    loc = _locate(records, buildings, cfg, utc_offset_minutes)
    sel = loc.hour == hour
    if not sel.any():
        return {}
    triple = np.stack(
        [loc.building_idx[sel], loc.day[sel], loc.user_code[sel]], axis=1
    )
    uniq = np.unique(triple, axis=0)
    counts: dict[tuple[str, date], int] = {}
    pairs, pair_counts = np.unique(uniq[:, :2], axis=0, return_counts=True)
    for (b, d), c in zip(pairs, pair_counts):
        counts[(loc.buildings[int(b)].building_id, _day_to_date(int(d)))] = int(c)
    return counts


def choose_occupancy_hour(
    records: Records,
    buildings: Iterable[BuildingInfo],
    true_counts: Mapping[tuple[str, date], int],
    cfg: EpochConfig | None = None,
    utc_offset_minutes: int = 0,
) -> tuple[int, list[float]]:
    """Pick the hour of day whose device counts best predict true occupancy.

    Evaluates all 24 one-hour windows against ``true_counts`` over every
    (building, date) pair whose date falls inside the records' span; returns
    the MSE-minimizing hour (ties to the smaller hour) and the per-hour MSEs.
    """
    cfg = cfg or EpochConfig()
    if not true_counts:
        raise TruthError("true_counts is empty")
    blds = list(buildings)
    known = {b.building_id for b in blds}
    loc = _locate(records, blds, cfg, utc_offset_minutes)
    if len(loc.day) == 0:
        raise TruthError("no records fall on the given buildings' APs")
    day_lo, day_hi = int(loc.day.min()), int(loc.day.max())
    targets = [
        (b, d, c)
        for (b, d), c in sorted(true_counts.items())
        if b in known and day_lo <= _date_to_day(d) <= day_hi
    ]
    if not targets:
        raise TruthError("true occupancy dates do not overlap the record range")
    mses: list[float] = []
    for hour in range(24):
        counts = hourly_device_counts(records, blds, hour, cfg, utc_offset_minutes)
        err = [(counts.get((b, d), 0) - c) ** 2 for b, d, c in targets]
        mses.append(float(np.mean(err)))
    best = int(np.argmin(mses))
    return best, mses


def _morning_day_counts(loc: _Located, window_hour: int) -> dict[tuple[int, int], int]:
    """Distinct in-window detection days per (user_code, building_idx)."""
    sel = loc.hour == window_hour
    if not sel.any():
        return {}
    triple = np.stack([loc.user_code[sel], loc.building_idx[sel], loc.day[sel]], axis=1)
    uniq = np.unique(triple, axis=0)
    pairs, counts = np.unique(uniq[:, :2], axis=0, return_counts=True)
    return {(int(u), int(b)): int(c) for (u, b), c in zip(pairs, counts)}


def infer_residents(
    records: Records,
    buildings: Iterable[BuildingInfo],
    params: ResidencyParams,
    cfg: EpochConfig | None = None,
) -> dict[str, set[str]]:
    """Users mapped to buildings where they are probable residents.

    A user is a probable resident of a building when they are detected on its
    APs during the window hour on at least tau_r distinct local dates (one
    detection per user/building/date).  Multi-residency is permitted.
    """
    cfg = cfg or EpochConfig()
    blds = tuple(sorted(buildings, key=lambda b: b.building_id))
    loc = _locate(records, blds, cfg, params.utc_offset_minutes)
    residents: dict[str, set[str]] = {}
    if params.tau_r == 0:
        # Zero mornings suffice, so every observed user qualifies everywhere.
        for u in records.users:
            residents[u] = {b.building_id for b in blds}
        return residents
    day_counts = _morning_day_counts(loc, params.window_hour)
    for (u, b), c in day_counts.items():
        if c >= params.tau_r:
            residents.setdefault(loc.users[u], set()).add(blds[b].building_id)
    return residents


def calibrate_tau_r(
    records: Records,
    buildings: Iterable[BuildingInfo],
    params: ResidencyParams,
    cfg: EpochConfig | None = None,
    thresholds: Iterable[int] = range(0, 31),
) -> tuple[int, list[float]]:
    """Choose tau_r by minimizing inferred-resident-count MSE against capacity.

    Only buildings with a known capacity participate.  Returns the argmin
    threshold (ties to the smaller value) and the MSE per candidate.
    """
    cfg = cfg or EpochConfig()
    blds = tuple(sorted(buildings, key=lambda b: b.building_id))
    candidates = [(i, b) for i, b in enumerate(blds) if b.capacity is not None]
    if not candidates:
        raise TruthError("no buildings with known capacity for tau_r calibration")
    loc = _locate(records, blds, cfg, params.utc_offset_minutes)
    day_counts = _morning_day_counts(loc, params.window_hour)
    per_building: dict[int, np.ndarray] = {
        i: np.array([c for (u, b), c in day_counts.items() if b == i], dtype=np.int64)
        for i, _ in candidates
    }
    n_users = len(records.users)
    thresholds = list(thresholds)
    mses: list[float] = []
    for tau in thresholds:
        errs = []
        for i, b in candidates:
            if tau == 0:
                inferred = n_users
            else:
                inferred = int((per_building[i] >= tau).sum())
            errs.append((inferred - b.capacity) ** 2)
        mses.append(float(np.mean(errs)))
    best = thresholds[int(np.argmin(mses))]
    return best, mses


def infer_positives(
    records: Records,
    buildings: Iterable[BuildingInfo],
    params: ResidencyParams,
    study_range: tuple[int, int],
    cfg: EpochConfig | None = None,
    residents: dict[str, set[str]] | None = None,
) -> TruthSet:
    """Label dorm residents from isolation-dorm presence.

    The labeled population is the set of probable residents of regular dorms
    within ``study_range``.  A resident is positive when their window-hour
    detections across isolation dorms span at least tau_r distinct mornings;
    their positive time is the epoch of their first association to any
    isolation-dorm AP.  Everyone else in the population is assumed negative.
    """
    cfg = cfg or EpochConfig()
    lo, hi = study_range
    in_range = (records.epoch >= lo) & (records.epoch <= hi)
    windowed = Records(
        users=records.users,
        aps=records.aps,
        user_code=records.user_code[in_range],
        ap_code=records.ap_code[in_range],
        epoch=records.epoch[in_range],
    )
    blds = tuple(sorted(buildings, key=lambda b: b.building_id))
    if residents is None:
        residents = infer_residents(windowed, blds, params, cfg)
    regular = {b.building_id for b in blds if b.role == "regular_dorm"}
    iso_idx = {i for i, b in enumerate(blds) if b.role == "isolation_dorm"}
    population = {u for u, bs in residents.items() if bs & regular}

    loc = _locate(windowed, blds, cfg, params.utc_offset_minutes)
    if iso_idx:
        iso_mask = np.isin(loc.building_idx, list(iso_idx))
    else:
        iso_mask = np.zeros(len(loc.building_idx), dtype=bool)

    # Distinct window-hour mornings in any isolation dorm, per user.
    sel = iso_mask & (loc.hour == params.window_hour)
    mornings: dict[int, int] = {}
    if sel.any():
        pairs = np.unique(np.stack([loc.user_code[sel], loc.day[sel]], axis=1), axis=0)
        codes, counts = np.unique(pairs[:, 0], return_counts=True)
        mornings = {int(u): int(c) for u, c in zip(codes, counts)}

    # First association to any isolation-dorm AP, per user.
    first_iso: dict[int, int] = {}
    if iso_mask.any():
        iso_users = loc.user_code[iso_mask]
        iso_epochs = loc.epoch[iso_mask]
        order = np.lexsort((iso_epochs, iso_users))
        iso_users, iso_epochs = iso_users[order], iso_epochs[order]
        firsts = np.ones(len(iso_users), dtype=bool)
        firsts[1:] = iso_users[1:] != iso_users[:-1]
        first_iso = {
            int(u): int(e) for u, e in zip(iso_users[firsts], iso_epochs[firsts])
        }

    positives: dict[str, int] = {}
    for code, n_mornings in mornings.items():
        user = loc.users[code]
        if user in population and n_mornings >= params.tau_r:
            positives[user] = first_iso[code]
    negatives = frozenset(population - set(positives))
    return TruthSet(positives=positives, negatives=negatives, provenance="inferred")


def isolation_stay(
    records: Records,
    user: str,
    buildings: Iterable[BuildingInfo],
    cfg: EpochConfig | None = None,
) -> tuple[int, int]:
    """The user's stay [start, end) in isolation housing.

    Starts at the first isolation-dorm detection and ends at the earliest
    later detection in any non-isolation building, or one past the user's
    last record when no such detection exists.  Records on APs outside the
    known buildings neither start nor interrupt a stay.
    """
    cfg = cfg or EpochConfig()
    try:
        code = records.users.index(user)
    except ValueError:
        raise TruthError(f"user {user!r} has no records") from None
    mask = records.user_code == code
    loc = _locate(
        Records(
            users=records.users,
            aps=records.aps,
            user_code=records.user_code[mask],
            ap_code=records.ap_code[mask],
            epoch=records.epoch[mask],
        ),
        buildings,
        cfg,
        0,
    )
    iso_idx = {i for i, b in enumerate(loc.buildings) if b.role == "isolation_dorm"}
    if iso_idx:
        is_iso = np.isin(loc.building_idx, list(iso_idx))
    else:
        is_iso = np.zeros(len(loc.building_idx), dtype=bool)
    if not is_iso.any():
        raise TruthError(f"user {user!r} has no isolation-dorm records")
    start = int(loc.epoch[is_iso].min())
    later_other = loc.epoch[(~is_iso) & (loc.epoch > start)]
    if len(later_other):
        return start, int(later_other.min())
    return start, int(records.epoch[mask].max()) + 1
