"""Road network graph, trajectories and time-of-week arithmetic.

Speeds are stored in m/s everywhere. Times are continuous seconds into the
week, Monday 00:00 being zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WEEK_SECONDS = 604800.0
DAY_SECONDS = 86400.0
N_FEATURES = 16
KMH_TO_MPS = 1.0 / 3.6

NETWORK_HEADER = (
    ["segment_id", "source", "target", "length_m", "category", "speed_limit_kmh"]
    + [f"f{i}" for i in range(1, N_FEATURES + 1)]
)
OPTIONAL_NETWORK_COLUMNS = ("in_city_source", "in_city_target")
TRAJECTORY_HEADER = ["trip_id", "seq", "segment_id", "arrival_tow_s", "speed_mps"]


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonpositiveLength(DataError):
    pass


class UnknownCategory(DataError):
    pass


class DuplicateSegment(DataError):
    pass


class UnknownSegment(DataError):
    pass


class MissingArrival(DataError):
    pass


class Category(str, Enum):
    MOTORWAY = "motorway"
    TRUNK = "trunk"
    URBAN = "urban"
    RURAL = "rural"
    OTHER = "other"


def tow(seconds: float) -> float:
    """Wrap an arbitrary number of seconds onto the week."""
    s = math.fmod(seconds, WEEK_SECONDS)
    if s < 0:
        s += WEEK_SECONDS
    # fmod of a tiny negative value can round up to exactly one week
    return 0.0 if s >= WEEK_SECONDS else s


def tow_distance(a: float, b: float) -> float:
    """Circular distance between two times of week, in seconds."""
    d = abs(a - b)
    return min(d, WEEK_SECONDS - d)


def check_tow(seconds: float) -> float:
    if not (0.0 <= seconds < WEEK_SECONDS):
        raise DataError(f"time of week {seconds!r} outside [0, {WEEK_SECONDS:.0f})")
    return float(seconds)


@dataclass(frozen=True)
class Segment:
    id: str
    source: str
    target: str
    length: float
    category: Category
    features: tuple[float, ...]
    speed_limit: float | None = None
    in_city_source: bool = False
    in_city_target: bool = False

    def __post_init__(self):
        if not self.length > 0:
            raise NonpositiveLength(f"segment {self.id!r} has nonpositive length {self.length}")
        if len(self.features) != N_FEATURES:
            raise DataError(f"segment {self.id!r} has {len(self.features)} features, expected {N_FEATURES}")
        if self.speed_limit is not None and not self.speed_limit > 0:
            raise DataError(f"segment {self.id!r} has nonpositive speed limit")


class RoadNetwork:
    """Directed graph of road segments keyed by segment id."""

    def __init__(self, segments: Iterable[Segment]):
        self._segments: dict[str, Segment] = {}
        self._out: dict[str, list[str]] = {}
        for seg in segments:
            if seg.id in self._segments:
                raise DuplicateSegment(f"duplicate segment id {seg.id!r}")
            self._segments[seg.id] = seg
            self._out.setdefault(seg.source, []).append(seg.id)

    def __getitem__(self, seg_id: str) -> Segment:
        return self._segments[seg_id]

    def __contains__(self, seg_id: object) -> bool:
        return seg_id in self._segments

    def __len__(self) -> int:
        return len(self._segments)

    def __iter__(self):
        return iter(self._segments.values())

    @property
    def ids(self) -> list[str]:
        return list(self._segments)

    def successors(self, seg_id: str) -> list[str]:
        """Segments that can be entered directly after ``seg_id``."""
        return list(self._out.get(self._segments[seg_id].target, ()))

    def connected(self, a: str, b: str) -> bool:
        return self._segments[a].target == self._segments[b].source

    def validate_route(self, route: Sequence[str]) -> None:
        if not route:
            raise DataError("empty route")
        for sid in route:
            if sid not in self._segments:
                raise UnknownSegment(f"segment {sid!r} not in network")
        for a, b in zip(route, route[1:]):
            if not self.connected(a, b):
                raise DataError(f"segments {a!r} -> {b!r} are not connected")


@dataclass(frozen=True)
class Traversal:
    segment: str
    arrival: float | None = None
    speed: float | None = None

    def __post_init__(self):
        if self.speed is not None and not self.speed > 0:
            raise DataError(f"nonpositive speed {self.speed} on {self.segment!r}")
        if self.arrival is not None:
            check_tow(self.arrival)


@dataclass(frozen=True)
class Trajectory:
    id: str
    traversals: tuple[Traversal, ...]

    def __post_init__(self):
        if not self.traversals:
            raise DataError(f"trajectory {self.id!r} is empty")
        if self.traversals[0].arrival is None:
            raise MissingArrival(f"trajectory {self.id!r}: first traversal has no arrival time")

    @property
    def route(self) -> tuple[str, ...]:
        return tuple(t.segment for t in self.traversals)

    @property
    def arrivals(self) -> list[float | None]:
        return [t.arrival for t in self.traversals]

    @property
    def speeds(self) -> list[float | None]:
        return [t.speed for t in self.traversals]

    def __len__(self) -> int:
        return len(self.traversals)


BOUNDARY = None  # context sentinel for positions outside the route


def route_context(route: Sequence[str], i: int, c: int) -> tuple[str | None, ...]:
    """The 2c+1 segment ids centred on position ``i``, padded with BOUNDARY."""
    n = len(route)
    return tuple(route[j] if 0 <= j < n else BOUNDARY for j in range(i - c, i + c + 1))


def _parse_bool(token: str, line: int) -> bool:
    token = token.strip().lower()
    if token in ("1", "true", "yes"):
        return True
    if token in ("0", "false", "no", ""):
        return False
    raise DataError(f"bad boolean {token!r}", line)


def _parse_float(token: str, name: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"bad number {token!r} in column {name}", line) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value in column {name}", line)
    return value


def parse_network(path: str | Path) -> RoadNetwork:
    """Read a network CSV (see README for the column layout)."""
    segments = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty network file", 1) from None
        missing = [h for h in NETWORK_HEADER if h not in header]
        if missing:
            raise DataError(f"network header lacks columns {missing}", 1)
        col = {h: header.index(h) for h in header}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line)
            sid = row[col["segment_id"]].strip()
            if sid in seen:
                raise DuplicateSegment(f"duplicate segment id {sid!r}", line)
            seen.add(sid)
            length = _parse_float(row[col["length_m"]], "length_m", line)
            if length <= 0:
                raise NonpositiveLength(f"nonpositive length {length}", line)
            try:
                category = Category(row[col["category"]].strip())
            except ValueError:
                raise UnknownCategory(f"unknown category {row[col['category']]!r}", line) from None
            sl_token = row[col["speed_limit_kmh"]].strip()
            speed_limit = None
            if sl_token:
                speed_limit = _parse_float(sl_token, "speed_limit_kmh", line) * KMH_TO_MPS
                if speed_limit <= 0:
                    raise DataError("nonpositive speed limit", line)
            features = tuple(
                _parse_float(row[col[f"f{k}"]], f"f{k}", line) for k in range(1, N_FEATURES + 1)
            )
            flags = {
                name: _parse_bool(row[col[name]], line) if name in col else None
                for name in OPTIONAL_NETWORK_COLUMNS
            }
            # without explicit flags, urban segments count as in-city
            default_city = category is Category.URBAN
            segments.append(
                Segment(
                    id=sid,
                    source=row[col["source"]].strip(),
                    target=row[col["target"]].strip(),
                    length=length,
                    category=category,
                    features=features,
                    speed_limit=speed_limit,
                    in_city_source=default_city if flags["in_city_source"] is None else flags["in_city_source"],
                    in_city_target=default_city if flags["in_city_target"] is None else flags["in_city_target"],
                )
            )
    return RoadNetwork(segments)


def write_network(network: RoadNetwork, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NETWORK_HEADER + list(OPTIONAL_NETWORK_COLUMNS))
        for s in network:
            sl = "" if s.speed_limit is None else repr(s.speed_limit / KMH_TO_MPS)
            w.writerow(
                [s.id, s.source, s.target, repr(s.length), s.category.value, sl]
                + [repr(float(f)) for f in s.features]
                + [int(s.in_city_source), int(s.in_city_target)]
            )


def parse_trajectories(path: str | Path, network: RoadNetwork) -> list[Trajectory]:
    """Read a trajectory CSV, grouping rows by trip id in order of first appearance.

    A ``speed_kmh`` column is accepted in place of ``speed_mps`` and converted.
    """
    rows: dict[str, list[tuple[int, int, Traversal]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty trajectory file", 1) from None
        speed_col, factor = "speed_mps", 1.0
        if "speed_mps" not in header and "speed_kmh" in header:
            speed_col, factor = "speed_kmh", KMH_TO_MPS
        required = TRAJECTORY_HEADER[:4] + [speed_col]
        missing = [h for h in required if h not in header]
        if missing:
            raise DataError(f"trajectory header lacks columns {missing}", 1)
        col = {h: header.index(h) for h in header}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line)
            trip = row[col["trip_id"]].strip()
            try:
                seq = int(row[col["seq"]])
            except ValueError:
                raise DataError(f"bad sequence index {row[col['seq']]!r}", line) from None
            sid = row[col["segment_id"]].strip()
            if sid not in network:
                raise UnknownSegment(f"segment {sid!r} not in network", line)
            a_tok = row[col["arrival_tow_s"]].strip()
            s_tok = row[col[speed_col]].strip()
            arrival = _parse_float(a_tok, "arrival_tow_s", line) if a_tok else None
            speed = _parse_float(s_tok, speed_col, line) * factor if s_tok else None
            try:
                trav = Traversal(sid, arrival, speed)
            except DataError as exc:
                raise DataError(str(exc), line) from None
            rows.setdefault(trip, []).append((seq, line, trav))

    out = []
    for trip, items in rows.items():
        items.sort(key=lambda r: r[0])
        seqs = [r[0] for r in items]
        if seqs != list(range(seqs[0], seqs[0] + len(seqs))):
            raise DataError(f"trip {trip!r} has non-contiguous sequence indices", items[0][1])
        trajectory = Trajectory(trip, tuple(r[2] for r in items))
        try:
            network.validate_route(trajectory.route)
        except DataError as exc:
            raise DataError(f"trip {trip!r}: {exc}", items[0][1]) from None
        out.append(trajectory)
    return out


def write_trajectories(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for tr in trajectories:
            for seq, t in enumerate(tr.traversals):
                w.writerow(
                    [
                        tr.id,
                        seq,
                        t.segment,
                        "" if t.arrival is None else repr(t.arrival),
                        "" if t.speed is None else repr(t.speed),
                    ]
                )


@dataclass
class FeatureScaler:
    """Per-feature affine standardization fitted on training segments."""

    mean: list[float] = field(default_factory=lambda: [0.0] * N_FEATURES)
    scale: list[float] = field(default_factory=lambda: [1.0] * N_FEATURES)

    @classmethod
    def fit(cls, network: RoadNetwork, trajectories: Iterable[Trajectory]) -> FeatureScaler:
        rows = [network[t.segment].features for tr in trajectories for t in tr.traversals]
        if not rows:
            return cls()
        x = np.asarray(rows, dtype=float)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return cls(mean=x.mean(axis=0).tolist(), scale=std.tolist())

    def transform(self, features):
        return (np.asarray(features, dtype=float) - np.asarray(self.mean)) / np.asarray(self.scale)
