"""Seeded synthetic campus and outbreak generator.

Produces an association log plus complete ground truth (home dorms, true
occupancy, infection and detection times) so the whole inference pipeline can
be validated against known answers.  Users sleep in a home dorm where their
phone stays associated overnight, visit shared buildings by day, and
occasionally spend evenings (sometimes very late) in other dorms.  Disease
spreads stochastically between users whose phones are recorded on the same
AP during the same epoch, so by construction every transmission channel is
visible to the colocation graph; an optional off-network infection rate
breaks that guarantee for stress testing.  Detected users move into an
isolation dorm after a lag and keep generating associations there.

Everything is driven by one seeded generator: a fixed seed yields
byte-identical exports.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np

from .ingest import EpochConfig
from .truth import BuildingInfo, write_buildings_csv

NO_EPOCH = -1


class SimError(ValueError):
    """Raised for infeasible simulation configurations."""


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    n_users: int = 500
    n_buildings: int = 20
    n_aps_per_building: int = 3
    n_isolation_dorms: int = 5
    n_shared_buildings: int = 4
    study_days: int = 90
    epoch_minutes: int = 15
    start: date = date(2021, 2, 1)

    # Mobility profile (hours are local; the sim runs in UTC).
    night_hours: tuple[int, int] = (0, 6)
    night_activity_prob: float = 0.8
    day_hours: tuple[int, int] = (9, 17)
    visits_per_day: float = 2.0
    visit_max_epochs: int = 8
    home_day_prob: float = 0.1
    evening_hours: tuple[int, int] = (18, 24)
    evening_activity_prob: float = 0.35
    dorm_visit_prob: float = 0.12
    dorm_visit_late_prob: float = 0.3
    laptops_max: int = 2
    laptop_day_prob: float = 0.25
    duplicate_event_prob: float = 0.1

    # Outbreak parameters.
    initial_infected: int = 5
    transmission_prob: float = 0.0016
    offnet_transmission_prob: float = 0.0
    incubation_days: float = 2.0
    test_cadence_days: float = 3.5
    isolation_lag_days: float = 1.0
    isolation_stay_days: float = 10.0

    def __post_init__(self) -> None:
        if min(
            self.n_users,
            self.n_buildings,
            self.n_aps_per_building,
            self.n_isolation_dorms,
            self.study_days,
        ) <= 0:
            raise SimError("all counts must be positive")
        if self.n_isolation_dorms + self.n_shared_buildings >= self.n_buildings:
            raise SimError("need at least one regular dorm")
        if self.initial_infected > self.n_users:
            raise SimError("more initial infected than users")
        for name in (
            "night_activity_prob",
            "home_day_prob",
            "evening_activity_prob",
            "dorm_visit_prob",
            "dorm_visit_late_prob",
            "laptop_day_prob",
            "duplicate_event_prob",
            "transmission_prob",
            "offnet_transmission_prob",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise SimError(f"{name} must be in [0, 1], got {p}")

    @property
    def epoch_config(self) -> EpochConfig:
        return EpochConfig(epoch_minutes=self.epoch_minutes)

    @property
    def n_regular_dorms(self) -> int:
        return self.n_buildings - self.n_isolation_dorms - self.n_shared_buildings

    @property
    def start_epoch(self) -> int:
        start_dt = datetime(self.start.year, self.start.month, self.start.day, tzinfo=timezone.utc)
        return int(start_dt.timestamp()) // self.epoch_config.epoch_seconds

    @property
    def end_epoch(self) -> int:
        return self.start_epoch + self.study_days * self.epoch_config.epochs_per_day - 1

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        raw = dict(raw)
        if "start" in raw and isinstance(raw["start"], str):
            raw["start"] = date.fromisoformat(raw["start"])
        for key in ("night_hours", "day_hours", "evening_hours"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass(frozen=True)
class InfectionRecord:
    infected_epoch: int
    infectious_epoch: int
    detected_epoch: int | None
    move_in_epoch: int | None
    isolation_dorm: str | None
    isolation_until: int | None
    source: str | None  # infecting user, "seed", or "offnet"


@dataclass(frozen=True)
class SimTruth:
    residents: dict[str, str]
    infections: dict[str, InfectionRecord]
    occupancy: dict[tuple[str, date], int]
    start_epoch: int
    end_epoch: int

    @property
    def detected_users(self) -> set[str]:
        return {u for u, r in self.infections.items() if r.detected_epoch is not None}

    @property
    def attack_rate(self) -> float:
        return len(self.infections) / max(len(self.residents), 1)


@dataclass(frozen=True)
class EventLog:
    """Columnar association events: device/AP vocabularies plus coded rows."""

    devices: tuple[str, ...]
    aps: tuple[str, ...]
    device_idx: np.ndarray  # int32
    ap_idx: np.ndarray  # int32
    timestamp: np.ndarray  # int64 Unix seconds

    def __len__(self) -> int:
        return len(self.timestamp)

    def iter_tuples(self) -> Iterator[tuple[str, str, int]]:
        for d, a, t in zip(self.device_idx, self.ap_idx, self.timestamp):
            yield self.devices[d], self.aps[a], int(t)

    def write_csv(self, stream) -> None:
        stream.write("device_id,ap_id,timestamp\n")
        devices, aps = self.devices, self.aps
        for d, a, t in zip(self.device_idx, self.ap_idx, self.timestamp):
            stream.write(f"{devices[d]},{aps[a]},{t}\n")


@dataclass(frozen=True)
class SimOutput:
    config: SimConfig
    log: EventLog
    device_map: dict[str, str]
    buildings: tuple[BuildingInfo, ...]
    truth: SimTruth


def _campus(cfg: SimConfig) -> tuple[list[str], list[str], list[list[int]], dict[str, str]]:
    """Building ids, AP ids, per-building AP index lists, and roles."""
    building_ids: list[str] = []
    roles: dict[str, str] = {}
    for i in range(cfg.n_isolation_dorms):
        bid = f"iso{i:02d}"
        building_ids.append(bid)
        roles[bid] = "isolation_dorm"
    for i in range(cfg.n_shared_buildings):
        bid = f"hall{i:02d}"
        building_ids.append(bid)
        roles[bid] = "other"
    for i in range(cfg.n_regular_dorms):
        bid = f"dorm{i:02d}"
        building_ids.append(bid)
        roles[bid] = "regular_dorm"
    ap_ids: list[str] = []
    building_aps: list[list[int]] = []
    for bid in building_ids:
        aps = []
        for k in range(cfg.n_aps_per_building):
            aps.append(len(ap_ids))
            ap_ids.append(f"{bid}-ap{k}")
        building_aps.append(aps)
    return building_ids, ap_ids, building_aps, roles


def generate(cfg: SimConfig) -> SimOutput:
    """Run the mobility and outbreak simulation; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    ecfg = cfg.epoch_config
    epd = ecfg.epochs_per_day
    eph = ecfg.epochs_per_hour
    esec = ecfg.epoch_seconds
    start_epoch = cfg.start_epoch

    building_ids, ap_ids, building_aps, roles = _campus(cfg)
    iso_buildings = [i for i, b in enumerate(building_ids) if roles[b] == "isolation_dorm"]
    shared_buildings = [i for i, b in enumerate(building_ids) if roles[b] == "other"]
    dorm_buildings = [i for i, b in enumerate(building_ids) if roles[b] == "regular_dorm"]

    n = cfg.n_users
    users = [f"u{i:04d}" for i in range(n)]

    # Balanced dorm assignment, then shuffled so dorm ids carry no order info.
    home_building = np.array(
        [dorm_buildings[i % len(dorm_buildings)] for i in range(n)], dtype=np.int64
    )
    rng.shuffle(home_building)
    home_ap = np.array(
        [building_aps[b][rng.integers(len(building_aps[b]))] for b in home_building],
        dtype=np.int64,
    )

    device_map: dict[str, str] = {}
    phone: list[str] = []
    laptops: list[list[str]] = []
    for i, u in enumerate(users):
        ph = f"{u}-ph"
        phone.append(ph)
        device_map[ph] = u
        lap = []
        for k in range(int(rng.integers(0, cfg.laptops_max + 1))):
            lp = f"{u}-lp{k}"
            lap.append(lp)
            device_map[lp] = u
        laptops.append(lap)
    device_index = {d: i for i, d in enumerate(sorted(device_map))}
    devices = tuple(sorted(device_map))
    phone_dev = np.array([device_index[p] for p in phone], dtype=np.int32)

    # Outbreak state, all epochs absolute; NO_EPOCH means "not yet".
    infected_at = np.full(n, NO_EPOCH, dtype=np.int64)
    infectious_at = np.full(n, NO_EPOCH, dtype=np.int64)
    detected_at = np.full(n, NO_EPOCH, dtype=np.int64)
    move_in = np.full(n, NO_EPOCH, dtype=np.int64)
    iso_until = np.full(n, NO_EPOCH, dtype=np.int64)
    iso_building = np.full(n, -1, dtype=np.int64)
    iso_ap = np.full(n, -1, dtype=np.int64)
    source: dict[int, str] = {}

    incubation = ecfg.days_to_epochs(cfg.incubation_days)
    cadence = max(1, ecfg.days_to_epochs(cfg.test_cadence_days))
    lag = ecfg.days_to_epochs(cfg.isolation_lag_days)
    stay = ecfg.days_to_epochs(cfg.isolation_stay_days)
    test_phase = rng.integers(0, cadence, size=n)

    seeds = rng.choice(n, size=cfg.initial_infected, replace=False)
    for s in seeds:
        infected_at[s] = start_epoch
        infectious_at[s] = start_epoch
        source[int(s)] = "seed"

    night_lo, night_hi = (h * eph for h in cfg.night_hours)
    day_lo, day_hi = (h * eph for h in cfg.day_hours)
    eve_lo, eve_hi = (h * eph for h in cfg.evening_hours)
    visit_start_min = 20 * eph  # evening dorm visits begin at 20:00

    dev_rows: list[np.ndarray] = []
    ap_rows: list[np.ndarray] = []
    ts_rows: list[np.ndarray] = []
    away_until = np.zeros(n, dtype=np.int64)  # next-day epoch-of-day bound
    away_ap = np.full(n, -1, dtype=np.int64)

    def is_isolated(u: int, t: int) -> bool:
        return move_in[u] != NO_EPOCH and move_in[u] <= t < iso_until[u]

    for day in range(cfg.study_days):
        day_start = start_epoch + day * epd
        # Phone location per (user, epoch-of-day); -1 when silent.
        loc = np.full((n, epd), -1, dtype=np.int64)
        next_away_until = np.zeros(n, dtype=np.int64)
        next_away_ap = np.full(n, -1, dtype=np.int64)

        for u in range(n):
            if move_in[u] != NO_EPOCH and day_start + epd > move_in[u] and day_start < iso_until[u]:
                # Isolation physics: stay on the assigned isolation AP.
                for e in range(epd):
                    t = day_start + e
                    if not is_isolated(u, t):
                        # Normal life before move-in / after release, same day.
                        continue
                    in_night = night_lo <= e < night_hi
                    p = cfg.night_activity_prob if in_night else 0.25
                    if rng.random() < p:
                        loc[u, e] = iso_ap[u]
                if is_isolated(u, day_start) and is_isolated(u, day_start + epd - 1):
                    continue  # fully isolated day: nothing else to schedule

            # Overnight at home (or finishing last evening's dorm visit).
            for e in range(night_lo, night_hi):
                if is_isolated(u, day_start + e):
                    continue
                ap = away_ap[u] if e < away_until[u] else home_ap[u]
                if rng.random() < cfg.night_activity_prob:
                    loc[u, e] = ap

            # Daytime: shared-building visits plus sporadic home presence.
            n_visits = rng.poisson(cfg.visits_per_day)
            for _ in range(n_visits):
                b = shared_buildings[rng.integers(len(shared_buildings))]
                ap = building_aps[b][rng.integers(len(building_aps[b]))]
                e0 = int(rng.integers(day_lo, day_hi))
                dur = int(rng.integers(1, cfg.visit_max_epochs + 1))
                for e in range(e0, min(e0 + dur, day_hi)):
                    if not is_isolated(u, day_start + e):
                        loc[u, e] = ap
            for e in range(day_lo, day_hi):
                if loc[u, e] == -1 and not is_isolated(u, day_start + e):
                    if rng.random() < cfg.home_day_prob:
                        loc[u, e] = home_ap[u]

            # Evening: at home, or visiting another dorm (possibly very late).
            visit_end = -1
            visit_ap = -1
            if rng.random() < cfg.dorm_visit_prob and len(dorm_buildings) > 1:
                others = [b for b in dorm_buildings if b != home_building[u]]
                b = others[rng.integers(len(others))]
                visit_ap = building_aps[b][rng.integers(len(building_aps[b]))]
                if rng.random() < cfg.dorm_visit_late_prob:
                    visit_end = eve_hi  # runs past midnight
                    late_hi = max(eph + 1, night_hi - eph)
                    next_away_until[u] = int(rng.integers(eph // 2, late_hi))
                    next_away_ap[u] = visit_ap
                else:
                    visit_end = int(rng.integers(visit_start_min + 4, eve_hi))
            for e in range(eve_lo, eve_hi):
                if is_isolated(u, day_start + e):
                    continue
                if visit_ap >= 0 and visit_start_min <= e < visit_end:
                    if rng.random() < cfg.night_activity_prob:
                        loc[u, e] = visit_ap
                elif rng.random() < cfg.evening_activity_prob:
                    loc[u, e] = home_ap[u]

        away_until = next_away_until
        away_ap = next_away_ap

        # Transmission and testing, epoch by epoch in order.
        for e in range(epd):
            t = day_start + e
            col = loc[:, e]
            present = np.flatnonzero(col >= 0)
            if len(present) > 1:
                by_ap: dict[int, list[int]] = {}
                for u in present:
                    by_ap.setdefault(int(col[u]), []).append(int(u))
                for ap in sorted(by_ap):
                    group = by_ap[ap]
                    if len(group) < 2:
                        continue
                    infectious = [
                        v
                        for v in group
                        if infectious_at[v] != NO_EPOCH
                        and infectious_at[v] <= t
                        and (move_in[v] == NO_EPOCH or t < move_in[v])
                    ]
                    if not infectious:
                        continue
                    p_hit = 1.0 - (1.0 - cfg.transmission_prob) ** len(infectious)
                    for v in group:
                        if infected_at[v] == NO_EPOCH and rng.random() < p_hit:
                            infected_at[v] = t
                            infectious_at[v] = t + incubation
                            source[v] = users[infectious[0]]
            # Scheduled tests catch infectious users.
            testers = np.flatnonzero((t - test_phase) % cadence == 0)
            for u in testers:
                if (
                    detected_at[u] == NO_EPOCH
                    and infectious_at[u] != NO_EPOCH
                    and infectious_at[u] <= t
                ):
                    detected_at[u] = t
                    move_in[u] = t + lag
                    iso_until[u] = move_in[u] + stay
                    b = iso_buildings[rng.integers(len(iso_buildings))]
                    iso_building[u] = b
                    iso_ap[u] = building_aps[b][rng.integers(len(building_aps[b]))]

        # Off-network infections (confounded mode): invisible to the log.
        if cfg.offnet_transmission_prob > 0:
            for u in range(n):
                if infected_at[u] == NO_EPOCH and rng.random() < cfg.offnet_transmission_prob:
                    t = day_start + int(rng.integers(0, epd))
                    infected_at[u] = t
                    infectious_at[u] = t + incubation
                    source[u] = "offnet"

        # Emit the day's phone events (with second jitter and a few repeats).
        urows, erows = np.nonzero(loc >= 0)
        if len(urows):
            aps_hit = loc[urows, erows]
            ts = (day_start + erows) * esec + rng.integers(0, esec, size=len(urows))
            dev = phone_dev[urows]
            dev_rows.append(dev)
            ap_rows.append(aps_hit.astype(np.int32))
            ts_rows.append(ts)
            dup = np.flatnonzero(rng.random(len(urows)) < cfg.duplicate_event_prob)
            if len(dup):
                dev_rows.append(dev[dup])
                ap_rows.append(aps_hit[dup].astype(np.int32))
                ts_rows.append(
                    (day_start + erows[dup]) * esec + rng.integers(0, esec, size=len(dup))
                )

        # Laptops chatter on the home AP during the day while their owner is
        # not isolated, wherever the owner actually is.
        lap_dev: list[int] = []
        lap_ap: list[int] = []
        lap_e: list[int] = []
        for u in range(n):
            if not laptops[u] or is_isolated(u, day_start + day_lo):
                continue
            for lp in laptops[u]:
                hits = np.flatnonzero(rng.random(day_hi - day_lo) < cfg.laptop_day_prob)
                for h in hits:
                    lap_dev.append(device_index[lp])
                    lap_ap.append(int(home_ap[u]))
                    lap_e.append(day_lo + int(h))
        if lap_dev:
            lap_e_arr = np.array(lap_e, dtype=np.int64)
            dev_rows.append(np.array(lap_dev, dtype=np.int32))
            ap_rows.append(np.array(lap_ap, dtype=np.int32))
            ts_rows.append(
                (day_start + lap_e_arr) * esec + rng.integers(0, esec, size=len(lap_e_arr))
            )

    log = EventLog(
        devices=devices,
        aps=tuple(ap_ids),
        device_idx=np.concatenate(dev_rows) if dev_rows else np.empty(0, dtype=np.int32),
        ap_idx=np.concatenate(ap_rows) if ap_rows else np.empty(0, dtype=np.int32),
        timestamp=np.concatenate(ts_rows) if ts_rows else np.empty(0, dtype=np.int64),
    )

    # Buildings with capacity = true assigned residents (regular dorms only).
    dorm_population = {b: int((home_building == b).sum()) for b in dorm_buildings}
    buildings = tuple(
        BuildingInfo(
            building_id=building_ids[b],
            role=roles[building_ids[b]],
            ap_ids=frozenset(ap_ids[a] for a in building_aps[b]),
            capacity=dorm_population.get(b),
        )
        for b in range(len(building_ids))
    )

    # True isolation occupancy per (dorm, date): the user's isolation interval
    # overlaps that date's night window.
    occupancy: dict[tuple[str, date], int] = {}
    for day in range(cfg.study_days):
        day_start = start_epoch + day * epd
        d = _epoch_date(day_start, esec)
        for b in iso_buildings:
            occupancy[(building_ids[b], d)] = 0
    for u in range(n):
        if move_in[u] == NO_EPOCH:
            continue
        bid = building_ids[int(iso_building[u])]
        for day in range(cfg.study_days):
            day_start = start_epoch + day * epd
            if move_in[u] < day_start + night_hi and iso_until[u] > day_start + night_lo:
                occupancy[(bid, _epoch_date(day_start, esec))] += 1

    infections = {
        users[u]: InfectionRecord(
            infected_epoch=int(infected_at[u]),
            infectious_epoch=int(infectious_at[u]),
            detected_epoch=int(detected_at[u]) if detected_at[u] != NO_EPOCH else None,
            move_in_epoch=int(move_in[u]) if move_in[u] != NO_EPOCH else None,
            isolation_dorm=building_ids[int(iso_building[u])] if iso_building[u] >= 0 else None,
            isolation_until=int(iso_until[u]) if iso_until[u] != NO_EPOCH else None,
            source=source.get(u),
        )
        for u in range(n)
        if infected_at[u] != NO_EPOCH
    }
    truth = SimTruth(
        residents={users[i]: building_ids[int(home_building[i])] for i in range(n)},
        infections=infections,
        occupancy=occupancy,
        start_epoch=start_epoch,
        end_epoch=cfg.end_epoch,
    )
    return SimOutput(
        config=cfg,
        log=log,
        device_map=device_map,
        buildings=buildings,
        truth=truth,
    )


def _epoch_date(epoch: int, epoch_seconds: int) -> date:
    return datetime.fromtimestamp(epoch * epoch_seconds, tz=timezone.utc).date()


def export(out: SimOutput, directory: str | Path) -> dict[str, Path]:
    """Write the simulation artifacts in the pipeline's file formats."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "associations": directory / "associations.csv",
        "device_map": directory / "device_map.csv",
        "buildings": directory / "buildings.csv",
        "occupancy": directory / "occupancy.csv",
        "sim_truth": directory / "sim_truth.json",
    }
    with paths["associations"].open("w", encoding="utf-8") as f:
        out.log.write_csv(f)
    with paths["device_map"].open("w", encoding="utf-8") as f:
        f.write("device_id,user_id\n")
        for device in sorted(out.device_map):
            f.write(f"{device},{out.device_map[device]}\n")
    with paths["buildings"].open("w", encoding="utf-8") as f:
        write_buildings_csv(out.buildings, f)
    with paths["occupancy"].open("w", encoding="utf-8") as f:
        f.write("building_id,date,count\n")
        for (bid, d), c in sorted(out.truth.occupancy.items()):
            f.write(f"{bid},{d.isoformat()},{c}\n")
    with paths["sim_truth"].open("w", encoding="utf-8") as f:
        cfg_dict = asdict(out.config)
        cfg_dict["start"] = out.config.start.isoformat()
        json.dump(
            {
                "config": cfg_dict,
                "start_epoch": out.truth.start_epoch,
                "end_epoch": out.truth.end_epoch,
                "attack_rate": out.truth.attack_rate,
                "residents": out.truth.residents,
                "infections": {
                    u: {
                        "infected_epoch": r.infected_epoch,
                        "infectious_epoch": r.infectious_epoch,
                        "detected_epoch": r.detected_epoch,
                        "move_in_epoch": r.move_in_epoch,
                        "isolation_dorm": r.isolation_dorm,
                        "isolation_until": r.isolation_until,
                        "source": r.source,
                    }
                    for u, r in sorted(out.truth.infections.items())
                },
            },
            f,
            indent=1,
            sort_keys=True,
        )
        f.write("\n")
    return paths


def load_sim_truth(path: str | Path) -> SimTruth:
    """Reload the exported ground truth (occupancy omitted from JSON round-trip)."""
    raw = json.loads(Path(path).read_text())
    infections = {
        u: InfectionRecord(
            infected_epoch=r["infected_epoch"],
            infectious_epoch=r["infectious_epoch"],
            detected_epoch=r["detected_epoch"],
            move_in_epoch=r["move_in_epoch"],
            isolation_dorm=r["isolation_dorm"],
            isolation_until=r["isolation_until"],
            source=r.get("source"),
        )
        for u, r in raw["infections"].items()
    }
    return SimTruth(
        residents=dict(raw["residents"]),
        infections=infections,
        occupancy={},
        start_epoch=raw["start_epoch"],
        end_epoch=raw["end_epoch"],
    )
