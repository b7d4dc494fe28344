"""Association-log ingestion: parsing, epoch discretization, and user-level dedup.

Raw logs are streams of (device_id, ap_id, timestamp) association events in CSV
or JSONL form.  This module turns them into a deduplicated columnar set of
(user_id, ap_id, epoch) colocation records: timestamps are floored into
fixed-width epochs, devices are resolved to their owning users, and repeated
associations within an epoch collapse to a single record.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, TextIO

import numpy as np

UNIX_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

REQUIRED_FIELDS = ("device_id", "ap_id", "timestamp")

# Parse work is batched to keep per-row Python overhead and peak memory bounded.
_CHUNK_ROWS = 1_000_000


class IngestError(ValueError):
    """Fatal ingestion problem: unreadable source, bad header, reject overflow."""


@dataclass(frozen=True)
class EpochConfig:
    """Epoch discretization: width in minutes and the instant defining epoch 0.

    Epochs are aligned to a fixed UTC origin (the Unix epoch by default) so
    that epoch indices are reproducible across machines; local-time analyses
    apply an explicit UTC offset downstream instead of shifting the grid.
    """

    epoch_minutes: int = 15
    origin: datetime = UNIX_EPOCH

    def __post_init__(self) -> None:
        if self.epoch_minutes <= 0 or 60 % self.epoch_minutes != 0:
            raise ValueError(
                f"epoch_minutes must be a positive divisor of 60, got {self.epoch_minutes}"
            )
        if self.origin.tzinfo is None:
            object.__setattr__(self, "origin", self.origin.replace(tzinfo=timezone.utc))

    @property
    def epoch_seconds(self) -> int:
        return self.epoch_minutes * 60

    @property
    def epochs_per_hour(self) -> int:
        return 60 // self.epoch_minutes

    @property
    def epochs_per_day(self) -> int:
        return 24 * self.epochs_per_hour

    @property
    def origin_unix(self) -> int:
        return int(self.origin.timestamp())

    def days_to_epochs(self, days: float) -> int:
        """Convert a duration in days to a whole number of epochs."""
        return round(days * self.epochs_per_day)

    def epoch_start_unix(self, epoch: int) -> int:
        return self.origin_unix + int(epoch) * self.epoch_seconds

    def epoch_start(self, epoch: int) -> datetime:
        return datetime.fromtimestamp(self.epoch_start_unix(epoch), tz=timezone.utc)


def to_epoch(timestamp: datetime | int, cfg: EpochConfig) -> int:
    """Floor an instant into its epoch index: floor((t - origin) / width)."""
    unix = int(timestamp.timestamp()) if isinstance(timestamp, datetime) else int(timestamp)
    delta = unix - cfg.origin_unix
    if delta < 0:
        raise ValueError(f"timestamp {timestamp} precedes epoch origin {cfg.origin}")
    return delta // cfg.epoch_seconds


def parse_timestamp(raw: str) -> int:
    """Parse an integer-Unix-seconds or RFC3339 timestamp to Unix seconds.

    Naive RFC3339 timestamps are interpreted as UTC.
    """
    try:
        return int(raw)
    except ValueError:
        pass
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(f"unparseable timestamp: {raw!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass(frozen=True, slots=True)
class AssociationEvent:
    """One association log line: a device seen on an AP at an instant."""

    device_id: str
    ap_id: str
    timestamp: int  # Unix seconds, UTC

    @property
    def instant(self) -> datetime:
        return datetime.fromtimestamp(self.timestamp, tz=timezone.utc)


@dataclass
class RejectsReport:
    """Bookkeeping for malformed lines; fatal only past ``max_reject_ratio``."""

    max_reject_ratio: float = 0.01
    rejects: list[tuple[int, str]] = field(default_factory=list)
    lines_seen: int = 0
    disassociations: int = 0

    def add(self, line: int, reason: str) -> None:
        self.rejects.append((line, reason))

    @property
    def reject_count(self) -> int:
        return len(self.rejects)

    def check(self) -> None:
        if self.lines_seen == 0:
            return
        ratio = self.reject_count / self.lines_seen
        if ratio > self.max_reject_ratio:
            raise IngestError(
                f"{self.reject_count} of {self.lines_seen} lines rejected "
                f"({ratio:.2%} > limit {self.max_reject_ratio:.2%})"
            )

    def write_jsonl(self, stream: TextIO) -> None:
        for line, reason in self.rejects:
            stream.write(json.dumps({"line": line, "reason": reason}) + "\n")


_DISASSOC_KEYS = ("event", "event_type", "type")


def _is_disassociation(value: str) -> bool:
    return value.strip().lower().startswith("disassoc")


def _iter_csv(source: TextIO, report: RejectsReport) -> Iterator[tuple[int, str, str, str]]:
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        return
    header = [h.strip() for h in header]
    try:
        cols = [header.index(name) for name in REQUIRED_FIELDS]
    except ValueError:
        raise IngestError(f"CSV header must contain {REQUIRED_FIELDS}, got {header}") from None
    event_col = next((header.index(k) for k in _DISASSOC_KEYS if k in header), None)
    ncols = len(header)
    d_col, a_col, t_col = cols
    for row in reader:
        report.lines_seen += 1
        if len(row) != ncols:
            report.add(reader.line_num, f"expected {ncols} fields, got {len(row)}")
            continue
        if event_col is not None and _is_disassociation(row[event_col]):
            report.disassociations += 1
            continue
        yield reader.line_num, row[d_col], row[a_col], row[t_col]


def _iter_jsonl(source: TextIO, report: RejectsReport) -> Iterator[tuple[int, str, str, str]]:
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        report.lines_seen += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            report.add(lineno, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            report.add(lineno, "expected a JSON object")
            continue
        if any(k in obj and _is_disassociation(str(obj[k])) for k in _DISASSOC_KEYS):
            report.disassociations += 1
            continue
        try:
            yield lineno, str(obj["device_id"]), str(obj["ap_id"]), str(obj["timestamp"])
        except KeyError as exc:
            report.add(lineno, f"missing key {exc.args[0]}")


def iter_events(
    source: TextIO | io.RawIOBase,
    format: str = "csv",
    report: RejectsReport | None = None,
) -> Iterator[AssociationEvent]:
    """Stream association events from a CSV or JSONL source.

    Malformed lines are recorded on ``report`` and skipped; disassociation
    rows (an ``event``-like column saying so) are counted and ignored.  Call
    ``report.check()`` after exhaustion to enforce the reject-ratio limit.
    """
    if report is None:
        report = RejectsReport()
    if isinstance(source, (io.RawIOBase, io.BufferedIOBase)):
        source = io.TextIOWrapper(source, encoding="utf-8")
    if format == "csv":
        raw = _iter_csv(source, report)
    elif format == "jsonl":
        raw = _iter_jsonl(source, report)
    else:
        raise IngestError(f"unknown format {format!r} (expected 'csv' or 'jsonl')")
    for lineno, device, ap, ts in raw:
        if not device or not ap:
            report.add(lineno, "empty device_id or ap_id")
            continue
        try:
            unix = parse_timestamp(ts)
        except ValueError as exc:
            report.add(lineno, str(exc))
            continue
        yield AssociationEvent(device, ap, unix)


def parse_events(
    source: TextIO | io.RawIOBase,
    format: str = "csv",
    max_reject_ratio: float = 0.01,
) -> tuple[list[AssociationEvent], RejectsReport]:
    """Materialize all events from a source, enforcing the reject-ratio limit."""
    report = RejectsReport(max_reject_ratio=max_reject_ratio)
    events = list(iter_events(source, format, report))
    report.check()
    return events, report


class DeviceUserMap:
    """Many-to-one device -> user mapping sourced from authentication data."""

    def __init__(self, entries: dict[str, str] | None = None) -> None:
        self.entries: dict[str, str] = dict(entries or {})

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, device_id: str) -> str | None:
        return self.entries.get(device_id)

    @classmethod
    def from_csv(cls, source: TextIO) -> "DeviceUserMap":
        reader = csv.reader(source)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["device_id", "user_id"]:
            raise IngestError("device map CSV must have header device_id,user_id")
        entries: dict[str, str] = {}
        for row in reader:
            if len(row) < 2:
                continue
            entries[row[0]] = row[1]
        return cls(entries)

    def write_csv(self, stream: TextIO) -> None:
        stream.write("device_id,user_id\n")
        for device, user in sorted(self.entries.items()):
            stream.write(f"{device},{user}\n")


def anonymize(value: str, salt: str) -> str:
    """Deterministic one-way digest of an identifier under a secret salt."""
    if not salt:
        raise ValueError("anonymization salt must be non-empty")
    return hmac.new(salt.encode("utf-8"), value.encode("utf-8"), hashlib.sha256).hexdigest()


@dataclass(frozen=True)
class Records:
    """Deduplicated (user, ap, epoch) colocation records in columnar form.

    Rows are sorted by (ap_code, epoch, user_code) and unique; vocabularies
    are lexicographically sorted so that integer code order equals id order.
    """

    users: tuple[str, ...]
    aps: tuple[str, ...]
    user_code: np.ndarray  # int32
    ap_code: np.ndarray  # int32
    epoch: np.ndarray  # int64

    def __len__(self) -> int:
        return len(self.epoch)

    @classmethod
    def from_codes(
        cls,
        users: Iterable[str],
        aps: Iterable[str],
        user_code: np.ndarray,
        ap_code: np.ndarray,
        epoch: np.ndarray,
    ) -> "Records":
        """Build from raw (possibly unsorted, duplicated) coded columns."""
        users = list(users)
        aps = list(aps)
        u_order = np.argsort(np.array(users, dtype=object), kind="stable")
        a_order = np.argsort(np.array(aps, dtype=object), kind="stable")
        u_rank = np.empty(max(len(users), 1), dtype=np.int64)
        u_rank[u_order] = np.arange(len(users))
        a_rank = np.empty(max(len(aps), 1), dtype=np.int64)
        a_rank[a_order] = np.arange(len(aps))
        if len(epoch):
            user_code = u_rank[np.asarray(user_code, dtype=np.int64)]
            ap_code = a_rank[np.asarray(ap_code, dtype=np.int64)]
            epoch = np.asarray(epoch, dtype=np.int64)
            ap_code, epoch, user_code = _dedup_sorted(ap_code, epoch, user_code, len(users))
        else:
            user_code = np.empty(0, dtype=np.int64)
            ap_code = np.empty(0, dtype=np.int64)
            epoch = np.empty(0, dtype=np.int64)
        return cls(
            users=tuple(users[i] for i in u_order),
            aps=tuple(aps[i] for i in a_order),
            user_code=user_code.astype(np.int32),
            ap_code=ap_code.astype(np.int32),
            epoch=epoch,
        )

    @classmethod
    def from_tuples(cls, rows: Iterable[tuple[str, str, int]]) -> "Records":
        rows = list(rows)
        users = sorted({r[0] for r in rows})
        aps = sorted({r[1] for r in rows})
        u_idx = {u: i for i, u in enumerate(users)}
        a_idx = {a: i for i, a in enumerate(aps)}
        return cls.from_codes(
            users,
            aps,
            np.array([u_idx[r[0]] for r in rows], dtype=np.int64),
            np.array([a_idx[r[1]] for r in rows], dtype=np.int64),
            np.array([r[2] for r in rows], dtype=np.int64),
        )

    @classmethod
    def empty(cls) -> "Records":
        return cls(
            users=(),
            aps=(),
            user_code=np.empty(0, dtype=np.int32),
            ap_code=np.empty(0, dtype=np.int32),
            epoch=np.empty(0, dtype=np.int64),
        )

    def to_tuples(self) -> set[tuple[str, str, int]]:
        return {
            (self.users[u], self.aps[a], int(e))
            for u, a, e in zip(self.user_code, self.ap_code, self.epoch)
        }

    def subset_users(self, keep: set[str]) -> "Records":
        """Keep only records of the given users, recompacting vocabularies."""
        keep_mask = np.array([u in keep for u in self.users], dtype=bool)
        row_mask = keep_mask[self.user_code]
        kept_users = [u for u, k in zip(self.users, keep_mask) if k]
        remap = np.cumsum(keep_mask) - 1
        new_user = remap[self.user_code[row_mask]]
        kept_aps_mask = np.zeros(len(self.aps), dtype=bool)
        kept_aps_mask[self.ap_code[row_mask]] = True
        kept_aps = [a for a, k in zip(self.aps, kept_aps_mask) if k]
        ap_remap = np.cumsum(kept_aps_mask) - 1
        new_ap = ap_remap[self.ap_code[row_mask]]
        return Records(
            users=tuple(kept_users),
            aps=tuple(kept_aps),
            user_code=new_user.astype(np.int32),
            ap_code=new_ap.astype(np.int32),
            epoch=self.epoch[row_mask],
        )

    def epoch_range(self) -> tuple[int, int]:
        if len(self) == 0:
            raise ValueError("no records")
        return int(self.epoch.min()), int(self.epoch.max())

    def rename(self, user_names: Iterable[str], ap_names: Iterable[str]) -> "Records":
        """Relabel vocabularies (e.g. anonymization) keeping row structure."""
        return Records.from_codes(
            list(user_names), list(ap_names), self.user_code, self.ap_code, self.epoch
        )

    def write_csv(self, stream: TextIO) -> None:
        stream.write("user_id,ap_id,epoch\n")
        for u, a, e in zip(self.user_code, self.ap_code, self.epoch):
            stream.write(f"{self.users[u]},{self.aps[a]},{e}\n")

    @classmethod
    def read_csv(cls, source: TextIO) -> "Records":
        reader = csv.reader(source)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["user_id", "ap_id", "epoch"]:
            raise IngestError("records CSV must have header user_id,ap_id,epoch")
        return cls.from_tuples((row[0], row[1], int(row[2])) for row in reader)


def _dedup_sorted(
    ap_code: np.ndarray, epoch: np.ndarray, user_code: np.ndarray, n_users: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort rows by (ap, epoch, user) and drop duplicates.

    Uses a packed int64 key when the value ranges fit; otherwise falls back
    to a lexicographic sort.
    """
    e_span = int(epoch.max()) + 1
    n_aps = int(ap_code.max()) + 1
    if n_users > 0 and n_aps * e_span * n_users < 2**62:
        key = np.unique((ap_code * e_span + epoch) * n_users + user_code)
        user_code = key % n_users
        rest = key // n_users
        return rest // e_span, rest % e_span, user_code
    order = np.lexsort((user_code, epoch, ap_code))
    a, e, u = ap_code[order], epoch[order], user_code[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = (a[1:] != a[:-1]) | (e[1:] != e[:-1]) | (u[1:] != u[:-1])
    return a[keep], e[keep], u[keep]


@dataclass
class IngestSummary:
    """Counters surfaced by discretization."""

    events: int = 0
    records: int = 0
    unmapped_devices: int = 0
    dropped_events: int = 0
    rejects: int = 0
    disassociations: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def discretize(
    events: Iterable[AssociationEvent],
    device_map: DeviceUserMap | None = None,
    cfg: EpochConfig | None = None,
    unmapped: str = "promote",
) -> tuple[Records, IngestSummary]:
    """Map events to (user, ap, epoch) records, merging repeats within an epoch.

    Devices missing from ``device_map`` are either promoted to singleton users
    (``unmapped="promote"``, the default) or dropped and counted
    (``unmapped="drop"``).
    """
    if cfg is None:
        cfg = EpochConfig()
    if unmapped not in ("promote", "drop"):
        raise ValueError(f"unmapped must be 'promote' or 'drop', got {unmapped!r}")
    mapping = device_map.entries if device_map is not None else {}
    summary = IngestSummary()

    user_code: dict[str, int] = {}
    ap_code: dict[str, int] = {}
    u_col: list[int] = []
    a_col: list[int] = []
    t_col: list[int] = []
    origin = cfg.origin_unix
    width = cfg.epoch_seconds

    for ev in events:
        summary.events += 1
        user = mapping.get(ev.device_id)
        if user is None:
            summary.unmapped_devices += 1
            if unmapped == "drop":
                summary.dropped_events += 1
                continue
            user = ev.device_id
        delta = ev.timestamp - origin
        if delta < 0:
            raise IngestError(
                f"timestamp {ev.timestamp} precedes epoch origin; adjust EpochConfig.origin"
            )
        u_col.append(user_code.setdefault(user, len(user_code)))
        a_col.append(ap_code.setdefault(ev.ap_id, len(ap_code)))
        t_col.append(delta // width)

    records = Records.from_codes(
        list(user_code),
        list(ap_code),
        np.array(u_col, dtype=np.int64),
        np.array(a_col, dtype=np.int64),
        np.array(t_col, dtype=np.int64),
    )
    summary.records = len(records)
    return records, summary


def discretize_stream(
    source: TextIO | io.RawIOBase,
    format: str = "csv",
    device_map: DeviceUserMap | None = None,
    cfg: EpochConfig | None = None,
    unmapped: str = "promote",
    max_reject_ratio: float = 0.01,
) -> tuple[Records, IngestSummary, RejectsReport]:
    """Parse + discretize in one chunked pass, sized for multi-million-row logs.

    Semantically identical to ``discretize(iter_events(...))`` but avoids
    materializing per-event objects.
    """
    if cfg is None:
        cfg = EpochConfig()
    if unmapped not in ("promote", "drop"):
        raise ValueError(f"unmapped must be 'promote' or 'drop', got {unmapped!r}")
    report = RejectsReport(max_reject_ratio=max_reject_ratio)
    if isinstance(source, (io.RawIOBase, io.BufferedIOBase)):
        source = io.TextIOWrapper(source, encoding="utf-8")
    if format == "csv":
        raw = _iter_csv(source, report)
    elif format == "jsonl":
        raw = _iter_jsonl(source, report)
    else:
        raise IngestError(f"unknown format {format!r} (expected 'csv' or 'jsonl')")

    mapping = device_map.entries if device_map is not None else {}
    summary = IngestSummary()
    user_code: dict[str, int] = {}
    ap_code: dict[str, int] = {}
    u_chunks: list[np.ndarray] = []
    a_chunks: list[np.ndarray] = []
    e_chunks: list[np.ndarray] = []
    origin = cfg.origin_unix
    width = cfg.epoch_seconds
    u_set = user_code.setdefault
    a_set = ap_code.setdefault

    done = False
    while not done:
        rows: list[tuple[int, str, str, str]] = []
        append = rows.append
        for quad in raw:
            append(quad)
            if len(rows) >= _CHUNK_ROWS:
                break
        else:
            done = True
        if not rows:
            break
        summary.events += len(rows)
        u_col: list[int] = []
        a_col: list[int] = []
        t_col: list[int] = []
        drop = unmapped == "drop"
        for lineno, device, ap, ts in rows:
            if not device or not ap:
                report.add(lineno, "empty device_id or ap_id")
                summary.events -= 1
                continue
            user = mapping.get(device)
            if user is None:
                summary.unmapped_devices += 1
                if drop:
                    summary.dropped_events += 1
                    continue
                user = device
            try:
                unix = int(ts)
            except ValueError:
                try:
                    unix = parse_timestamp(ts)
                except ValueError as exc:
                    report.add(lineno, str(exc))
                    summary.events -= 1
                    continue
            u_col.append(u_set(user, len(user_code)))
            a_col.append(a_set(ap, len(ap_code)))
            t_col.append(unix)
        if t_col:
            ts_arr = np.array(t_col, dtype=np.int64) - origin
            if ts_arr.min() < 0:
                raise IngestError("timestamp precedes epoch origin; adjust EpochConfig.origin")
            u_chunks.append(np.array(u_col, dtype=np.int64))
            a_chunks.append(np.array(a_col, dtype=np.int64))
            e_chunks.append(ts_arr // width)

    report.check()
    summary.rejects = report.reject_count
    summary.disassociations = report.disassociations
    if not u_chunks:
        return Records.empty(), summary, report
    records = Records.from_codes(
        list(user_code),
        list(ap_code),
        np.concatenate(u_chunks),
        np.concatenate(a_chunks),
        np.concatenate(e_chunks),
    )
    summary.records = len(records)
    return records, summary, report
