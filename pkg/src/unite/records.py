"""Indexed historical speed records and context/time-window record selection.

Records are bucketed by (context width, context tuple) and each bucket is
sorted by arrival time, so a query is one dict lookup plus a binary search
and a scan over the matching window.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .conjugate import SampleStats
from .network import WEEK_SECONDS, MissingArrival, Trajectory, route_context

SNAPSHOT_MAGIC = b"UNITERS1"
# ties at the window edge are resolved by the exact predicate, so the binary
# search only has to return a superset
_EDGE_SLACK = 1e-6


@dataclass(frozen=True)
class SelectionParams:
    c: int = 0
    delta: float = 7200.0  # seconds
    leave_out_trip: str | None = None

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("context width c must be nonnegative")
        if not (0 < self.delta <= WEEK_SECONDS):
            raise ValueError(f"delta must lie in (0, {WEEK_SECONDS:.0f}] seconds")

    def leaving_out(self, trip: str | None) -> SelectionParams:
        return SelectionParams(self.c, self.delta, trip)


class QueryProbe:
    """Instrumentation: counts binary-search comparisons and inspected candidates."""

    def __init__(self):
        self.queries = 0
        self.comparisons = 0  # upper bound on binary-search steps
        self.inspected = 0
        self.bucket_sizes = 0

    @property
    def work(self) -> int:
        return self.comparisons + self.inspected

    def __repr__(self):
        return f"QueryProbe(queries={self.queries}, comparisons={self.comparisons}, inspected={self.inspected})"


@dataclass
class _Bucket:
    times: np.ndarray
    speeds: np.ndarray
    trips: np.ndarray  # int codes into RecordStore.trip_ids


def _circular_distance(times: np.ndarray, tau: float) -> np.ndarray:
    d = np.abs(times - tau)
    return np.minimum(d, WEEK_SECONDS - d)


class RecordStore:
    """Read-only index of observed speeds; build with :meth:`build`."""

    def __init__(self, c_max: int, buckets: dict, trip_ids: list[str]):
        self.c_max = c_max
        self._buckets: dict[tuple, _Bucket] = buckets
        self.trip_ids = trip_ids
        self._trip_code = {t: k for k, t in enumerate(trip_ids)}

    @classmethod
    def build(cls, trajectories: Iterable[Trajectory], c_max: int = 4) -> RecordStore:
        if c_max < 0:
            raise ValueError("c_max must be nonnegative")
        raw: dict[tuple, list[tuple[float, float, int]]] = {}
        trip_ids: list[str] = []
        for tr in trajectories:
            code = len(trip_ids)
            trip_ids.append(tr.id)
            route = tr.route
            for j, trav in enumerate(tr.traversals):
                if trav.speed is None or trav.arrival is None:
                    continue
                for c in range(c_max + 1):
                    raw.setdefault((c, route_context(route, j, c)), []).append((trav.arrival, trav.speed, code))
        buckets = {}
        for key, rows in raw.items():
            rows.sort(key=lambda r: (r[0], r[2]))
            arr = np.asarray(rows, dtype=float)
            buckets[key] = _Bucket(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].astype(np.int64))
        return cls(c_max, buckets, trip_ids)

    @property
    def n_records(self) -> int:
        """Number of stored observations (each counted once, at c = 0)."""
        return sum(len(b.times) for (c, _), b in self._buckets.items() if c == 0)

    def bucket_size(self, context: tuple, c: int) -> int:
        b = self._buckets.get((c, tuple(context)))
        return 0 if b is None else len(b.times)

    def _select(self, route: Sequence[str], i: int, tau: float, params: SelectionParams, probe=None):
        if params.c > self.c_max:
            raise ValueError(f"c={params.c} exceeds the store's c_max={self.c_max}")
        bucket = self._buckets.get((params.c, route_context(route, i, params.c)))
        if probe is not None:
            probe.queries += 1
        if bucket is None:
            return np.empty(0)
        half = 0.5 * params.delta
        times = bucket.times
        if half >= 0.5 * WEEK_SECONDS:
            ranges = [(0, len(times))]
        else:
            lo, hi = tau - half - _EDGE_SLACK, tau + half + _EDGE_SLACK
            spans = []
            if lo < 0:
                spans += [(0.0, hi), (lo + WEEK_SECONDS, WEEK_SECONDS)]
            elif hi >= WEEK_SECONDS:
                spans += [(lo, WEEK_SECONDS), (0.0, hi - WEEK_SECONDS)]
            else:
                spans.append((lo, hi))
            ranges = [
                (int(np.searchsorted(times, a, "left")), int(np.searchsorted(times, b, "right")))
                for a, b in spans
            ]
            if probe is not None:
                probe.comparisons += 2 * len(spans) * max(1, len(times)).bit_length()
        parts = []
        for a, b in ranges:
            if b <= a:
                continue
            idx = slice(a, b)
            keep = _circular_distance(times[idx], tau) <= half
            if params.leave_out_trip is not None:
                code = self._trip_code.get(params.leave_out_trip)
                if code is not None:
                    keep &= bucket.trips[idx] != code
            parts.append(bucket.speeds[idx][keep])
            if probe is not None:
                probe.inspected += b - a
        if probe is not None:
            probe.bucket_sizes += len(times)
        if not parts:
            return np.empty(0)
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def select_records(
        self, route: Sequence[str], i: int, tau: float, params: SelectionParams, probe: QueryProbe | None = None
    ) -> list[float]:
        """Speeds of records matching the context of ``route[i]`` within delta/2 of ``tau``."""
        return self._select(route, i, tau, params, probe).tolist()

    def select_stats(self, route: Sequence[str], i: int, tau: float, params: SelectionParams) -> SampleStats:
        x = self._select(route, i, tau, params)
        if len(x) == 0:
            return SampleStats(0)
        mean = float(x.mean())
        return SampleStats(len(x), mean, float(np.mean((x - mean) ** 2)))

    # --- snapshot ------------------------------------------------------------
    #
    # layout (little endian):
    #   magic "UNITERS1" | u64 record count | u32 c_max | u32 n_trips | u32 n_buckets
    #   n_trips x (u32 len, utf-8 trip id)
    #   n_buckets x (u32 len, utf-8 JSON [c, context]) | u32 n | n f64 times | n f64 speeds | n u32 trip codes

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<QIII", self.n_records, self.c_max, len(self.trip_ids), len(self._buckets)))
            for t in self.trip_ids:
                b = t.encode("utf-8")
                fh.write(struct.pack("<I", len(b)) + b)
            for (c, ctx), bucket in sorted(self._buckets.items(), key=lambda kv: json.dumps([kv[0][0], kv[0][1]])):
                key = json.dumps([c, list(ctx)]).encode("utf-8")
                fh.write(struct.pack("<I", len(key)) + key)
                fh.write(struct.pack("<I", len(bucket.times)))
                fh.write(bucket.times.astype("<f8").tobytes())
                fh.write(bucket.speeds.astype("<f8").tobytes())
                fh.write(bucket.trips.astype("<u4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> RecordStore:
        data = Path(path).read_bytes()
        if data[:8] != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a record store snapshot")
        pos = 8
        n_records, c_max, n_trips, n_buckets = struct.unpack_from("<QIII", data, pos)
        pos += struct.calcsize("<QIII")

        def take_str():
            nonlocal pos
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            s = data[pos : pos + n].decode("utf-8")
            pos += n
            return s

        trip_ids = [take_str() for _ in range(n_trips)]
        buckets = {}
        for _ in range(n_buckets):
            c, ctx = json.loads(take_str())
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            times = np.frombuffer(data, "<f8", n, pos).astype(float)
            pos += 8 * n
            speeds = np.frombuffer(data, "<f8", n, pos).astype(float)
            pos += 8 * n
            trips = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
            pos += 4 * n
            buckets[(c, tuple(ctx))] = _Bucket(times, speeds, trips)
        store = cls(c_max, buckets, trip_ids)
        if store.n_records != n_records:
            raise ValueError(f"{path}: record count mismatch")
        return store


EMPTY_STORE = RecordStore(4, {}, [])


def record_count_at_truth(store: RecordStore, trajectory: Trajectory, i: int, delta: float) -> int:
    """Records available at the true arrival time under the loosest selection (c = 0)."""
    tau = trajectory.traversals[i].arrival
    if tau is None:
        raise MissingArrival(f"trajectory {trajectory.id!r} traversal {i} has no arrival time")
    params = SelectionParams(0, delta, trajectory.id)
    return len(store._select(trajectory.route, i, tau, params))
