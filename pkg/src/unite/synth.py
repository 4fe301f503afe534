"""Synthetic road networks and trajectories with known speed distributions.

Segment speeds are Gaussian with a segment-specific mean and coefficient of
variation, slowed down around weekday rush hours. Part of each segment's
mean is explained by its features (category, zone), part is idiosyncratic
and part depends on how popular the segment is, which the features do not
reveal. Routes are random walks with skewed start and turn probabilities,
so segment frequencies are heavy tailed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conjugate import gaussian_logpdf
from .network import (
    DAY_SECONDS,
    KMH_TO_MPS,
    WEEK_SECONDS,
    Category,
    DataError,
    RoadNetwork,
    Segment,
    Trajectory,
    Traversal,
    UnknownSegment,
    tow,
    write_network,
    write_trajectories,
)

MIN_SPEED = 0.5
# standard normal upper quantile at 1e-6: bounds the truncation probability
_Z_1E6 = 4.753424308817087

_ZONES = ("city", "rural", "cottage")
_BASE_SPEED = {  # m/s, (in city, outside)
    Category.MOTORWAY: (27.0, 31.0),
    Category.TRUNK: (16.0, 20.0),
    Category.URBAN: (8.5, 10.5),
    Category.RURAL: (13.0, 18.0),
    Category.OTHER: (7.0, 9.0),
}
_MEAN_LENGTH = {
    Category.MOTORWAY: 1400.0,
    Category.TRUNK: 800.0,
    Category.URBAN: 220.0,
    Category.RURAL: 600.0,
    Category.OTHER: 300.0,
}
_PEAK_DEPTH = {
    Category.MOTORWAY: 0.15,
    Category.TRUNK: 0.2,
    Category.URBAN: 0.25,
    Category.RURAL: 0.1,
    Category.OTHER: 0.15,
}
_POSTED_KMH = {
    Category.MOTORWAY: (110.0, 130.0),
    Category.TRUNK: (70.0, 80.0),
    Category.URBAN: (40.0, 50.0),
    Category.RURAL: (60.0, 80.0),
    Category.OTHER: (30.0, 50.0),
}


class InfeasibleSpec(ValueError):
    pass


@dataclass
class SynthSpec:
    n_segments: int = 200
    n_trajectories: int = 2000
    category_mix: dict = field(
        default_factory=lambda: {"motorway": 0.1, "trunk": 0.15, "urban": 0.45, "rural": 0.25, "other": 0.05}
    )
    route_length: tuple[int, int] = (10, 40)
    missingness: float = 0.0
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    cv_range: tuple[float, float] = (0.08, 0.16)
    segment_noise: float = 0.15  # lognormal sd of the idiosyncratic mean factor
    popularity_gain: float = 0.3
    start_skew: float = 1.5  # Zipf exponent of the start-node distribution
    turn_concentration: float = 0.3  # Dirichlet concentration of turn choices
    peak_hours: tuple[float, ...] = (8.0, 17.0)
    peak_width_h: float = 1.5
    peak_trip_fraction: float = 0.85
    start_sd_minutes: float = 15.0
    speed_limit_fraction: float = 0.5

    def validate(self):
        if self.n_segments < 3:
            raise InfeasibleSpec("need at least 3 segments")
        if self.n_trajectories < 1:
            raise InfeasibleSpec("need at least one trajectory")
        total = sum(self.category_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise InfeasibleSpec(f"category proportions sum to {total}, not 1")
        unknown = set(self.category_mix) - {c.value for c in Category}
        if unknown:
            raise InfeasibleSpec(f"unknown categories {sorted(unknown)}")
        if not 0.0 <= self.missingness < 1.0:
            raise InfeasibleSpec("missingness must lie in [0, 1)")
        lo, hi = self.route_length
        if not 1 <= lo <= hi:
            raise InfeasibleSpec("bad route length range")
        if not (0 < self.cv_range[0] <= self.cv_range[1]):
            raise InfeasibleSpec("coefficients of variation must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InfeasibleSpec("split fractions must be nonnegative and sum to 1")


@dataclass
class SegmentTruth:
    mu: float  # off-peak mean speed, m/s
    cv: float  # sigma / mu, constant over the week
    peak_depth: float

    @property
    def sigma(self) -> float:
        return self.cv * self.mu


@dataclass
class Oracle:
    """Ground-truth speed distributions of a generated data set."""

    truth: dict[str, SegmentTruth]
    peak_hours: tuple[float, ...]
    peak_width_h: float

    def slowdown(self, tau: float) -> float:
        """Rush-hour bump in [0, ~1]; zero at weekends."""
        day = int(tau // DAY_SECONDS)
        if day >= 5:
            return 0.0
        hour = (tau % DAY_SECONDS) / 3600.0
        return sum(math.exp(-0.5 * ((hour - p) / self.peak_width_h) ** 2) for p in self.peak_hours)

    def dist(self, segment: str, tau: float) -> tuple[float, float]:
        try:
            t = self.truth[segment]
        except KeyError:
            raise UnknownSegment(f"segment {segment!r} has no ground truth") from None
        mu = t.mu * (1.0 - t.peak_depth * self.slowdown(tau))
        return mu, t.cv * mu

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment_id", "mu_mps", "sigma_mps", "cv", "peak_depth", "peak_hours", "peak_width_h"])
            hours = ";".join(repr(h) for h in self.peak_hours)
            for sid, t in self.truth.items():
                w.writerow([sid, repr(t.mu), repr(t.sigma), repr(t.cv), repr(t.peak_depth), hours, repr(self.peak_width_h)])

    @classmethod
    def read(cls, path: str | Path) -> Oracle:
        truth = {}
        hours, width = (), 1.0
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                truth[row["segment_id"]] = SegmentTruth(float(row["mu_mps"]), float(row["cv"]), float(row["peak_depth"]))
                hours = tuple(float(h) for h in row["peak_hours"].split(";") if h)
                width = float(row["peak_width_h"])
        return cls(truth, hours, width)


@dataclass
class SynthData:
    network: RoadNetwork
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]
    oracle: Oracle

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_network(self.network, out / "network.csv")
        write_trajectories(self.train, out / "train.csv")
        write_trajectories(self.val, out / "val.csv")
        write_trajectories(self.test, out / "test.csv")
        self.oracle.write(out / "ground_truth.csv")


def _features(cat: Category, length: float, zsrc: str, ztgt: str, limit_kmh: float | None) -> tuple:
    onehot = [1.0 if cat is c else 0.0 for c in Category]
    return tuple(
        onehot
        + [
            math.log(length),
            length / 1000.0,
            float(zsrc == "city"),
            float(ztgt == "city"),
            float(limit_kmh is not None),
            0.0 if limit_kmh is None else limit_kmh / 100.0,
            float(zsrc == "city" and ztgt == "city"),
            float(ztgt == "rural"),
            float(ztgt == "cottage"),
            float(zsrc == "cottage"),
            float(length > 500.0),
        ]
    )


def _build_graph(spec: SynthSpec, rng: np.random.Generator):
    n_nodes = max(2, spec.n_segments // 3)
    perm = rng.permutation(n_nodes)
    edges = [(int(perm[k]), int(perm[(k + 1) % n_nodes])) for k in range(n_nodes)]  # strongly connected
    present = set(edges)
    while len(edges) < spec.n_segments:
        u, v = (int(x) for x in rng.integers(0, n_nodes, 2))
        if u == v or (u, v) in present:
            if len(present) >= n_nodes * (n_nodes - 1):
                raise InfeasibleSpec("too many segments for a simple digraph")
            continue
        present.add((u, v))
        edges.append((u, v))
    zones = [_ZONES[int(k)] for k in rng.choice(3, size=n_nodes, p=[0.5, 0.4, 0.1])]
    return n_nodes, edges, zones


def generate(spec: SynthSpec) -> SynthData:
    """Deterministic in ``spec`` (including the seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_nodes, edges, zones = _build_graph(spec, rng)

    cats = list(spec.category_mix)
    probs = np.array([spec.category_mix[c] for c in cats])
    seg_cat = [Category(cats[k]) for k in rng.choice(len(cats), size=len(edges), p=probs)]
    seg_ids = [f"s{k:04d}" for k in range(len(edges))]

    # random-walk routes
    out_edges: dict[int, list[int]] = {}
    for k, (u, _) in enumerate(edges):
        out_edges.setdefault(u, []).append(k)
    turn_p = {u: rng.dirichlet(np.full(len(ks), spec.turn_concentration)) for u, ks in out_edges.items()}
    start_w = 1.0 / np.arange(1, n_nodes + 1) ** spec.start_skew
    start_nodes = rng.permutation(n_nodes)
    start_w = start_w / start_w.sum()
    lo, hi = spec.route_length
    routes = []
    for _ in range(spec.n_trajectories):
        node = int(start_nodes[rng.choice(n_nodes, p=start_w)])
        n = int(rng.integers(lo, hi + 1))
        route = []
        for _ in range(n):
            ks = out_edges[node]
            k = ks[int(rng.choice(len(ks), p=turn_p[node]))]
            route.append(k)
            node = edges[k][1]
        routes.append(route)

    counts = np.bincount([k for r in routes for k in r], minlength=len(edges)).astype(float)
    logc = np.log1p(counts)
    pop = (logc - logc.mean()) / (logc.std() or 1.0)

    segments, truth = [], {}
    for k, ((u, v), cat) in enumerate(zip(edges, seg_cat)):
        zs, zt = zones[u], zones[v]
        length = float(_MEAN_LENGTH[cat] * rng.lognormal(0.0, 0.4))
        limit = None
        if rng.random() < spec.speed_limit_fraction:
            limit = float(rng.choice(_POSTED_KMH[cat]))
        in_city = zs == "city" or zt == "city"
        base = _BASE_SPEED[cat][0 if in_city else 1]
        mu = base * rng.lognormal(0.0, spec.segment_noise) * (1.0 + spec.popularity_gain * np.clip(pop[k], -2, 2) / 2)
        cv = float(rng.uniform(*spec.cv_range))
        depth = _PEAK_DEPTH[cat]
        segments.append(
            Segment(
                id=seg_ids[k],
                source=f"n{u:03d}",
                target=f"n{v:03d}",
                length=length,
                category=cat,
                features=_features(cat, length, zs, zt, limit),
                speed_limit=None if limit is None else limit * KMH_TO_MPS,
                in_city_source=zs == "city",
                in_city_target=zt == "city",
            )
        )
        truth[seg_ids[k]] = SegmentTruth(float(mu), cv, depth)
    oracle = Oracle(truth, tuple(spec.peak_hours), spec.peak_width_h)
    _check_truncation(oracle)

    trajectories = []
    for idx, route in enumerate(routes):
        if rng.random() < spec.peak_trip_fraction:
            day = int(rng.integers(0, 5))
            hour = float(rng.choice(spec.peak_hours)) + rng.normal(0.0, spec.start_sd_minutes / 60.0)
            start = tow(day * DAY_SECONDS + hour * 3600.0)
        else:
            start = float(rng.uniform(0.0, WEEK_SECONDS))
        tau = start
        travs = []
        for j, k in enumerate(route):
            sid = seg_ids[k]
            mu, sigma = oracle.dist(sid, tau)
            speed = float(rng.normal(mu, sigma))
            while speed < MIN_SPEED:
                speed = float(rng.normal(mu, sigma))
            hidden = j > 0 and rng.random() < spec.missingness
            travs.append(Traversal(sid, None if hidden else tau, None if hidden else speed))
            tau = tow(tau + segments[k].length / speed)
        trajectories.append(Trajectory(f"t{idx:06d}", tuple(travs)))

    n_train = int(round(spec.split[0] * len(trajectories)))
    n_val = int(round(spec.split[1] * len(trajectories)))
    return SynthData(
        RoadNetwork(segments),
        trajectories[:n_train],
        trajectories[n_train : n_train + n_val],
        trajectories[n_train + n_val :],
        oracle,
    )


def _check_truncation(oracle: Oracle) -> None:
    worst = max(oracle.slowdown(60.0 * k) for k in range(24 * 60))
    for sid, t in oracle.truth.items():
        mu = t.mu * (1.0 - t.peak_depth * worst)
        if mu <= 0 or (mu - MIN_SPEED) / (t.cv * mu) < _Z_1E6:
            raise InfeasibleSpec(f"segment {sid}: truncation at {MIN_SPEED} m/s would exceed 1e-6 probability")


def oracle_nll(oracle: Oracle, trajectories: list[Trajectory]) -> float:
    """Mean per-trajectory NLL under the generating densities."""
    if not trajectories:
        raise DataError("no trajectories")
    total = 0.0
    for tr in trajectories:
        for t in tr.traversals:
            if t.speed is None:
                continue
            if t.arrival is None:
                raise DataError(f"trajectory {tr.id!r}: observed speed without arrival time")
            mu, sigma = oracle.dist(t.segment, t.arrival)
            total -= float(gaussian_logpdf(mu, sigma, t.speed))
    return total / len(trajectories)
