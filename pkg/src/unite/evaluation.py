"""Metrics (NLL, MAE, MAPE), point travel times and the analyses built on them:
robustness by record availability, the prior regularization comparison and
the data-efficiency / record-selection sweeps.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .conjugate import snll_and_grad
from .estimators import RouteEstimate
from .network import DataError, RoadNetwork, Trajectory
from .neural import MIN_PROPAGATION_SPEED, ModelParams, RouteBatch, forward
from .records import RecordStore, record_count_at_truth
from .training import TrainConfig, mean_nll, train

# record-count bucket edges (1-2-5 series); bucket k holds counts in [edge_k, edge_k+1)
DEFAULT_BUCKET_EDGES = (0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000)
DATA_FRACTIONS = (0.1, 0.2, 0.4, 0.8, 1.0)
CONTEXT_GRID = (0, 1, 2, 4)
DELTA_GRID_MINUTES = (15, 30, 60, 120)


class NonpositiveSpeed(ArithmeticError):
    pass


def traversal_snll(estimate: RouteEstimate, trajectory: Trajectory) -> np.ndarray:
    """sNLL per traversal, NaN where the speed is not observed."""
    speeds = np.array([np.nan if s is None else s for s in trajectory.speeds])
    observed = ~np.isnan(speeds)
    out = np.full(len(speeds), np.nan)
    out[observed] = -estimate.logpdf(speeds)[observed]
    return out


def trajectory_nll(estimate: RouteEstimate, trajectory: Trajectory) -> float:
    if len(estimate) != len(trajectory):
        raise ValueError("estimate and trajectory lengths differ")
    return float(np.nansum(traversal_snll(estimate, trajectory)))


def dataset_nll(estimates: Sequence[RouteEstimate], trajectories: Sequence[Trajectory]) -> float:
    if not trajectories:
        raise DataError("no trajectories")
    return math.fsum(trajectory_nll(e, t) for e, t in zip(estimates, trajectories)) / len(trajectories)


def point_travel_time(lengths: Sequence[float], expected_speeds: Sequence[float]) -> float:
    """Sum of length / expected speed, in seconds."""
    v = np.asarray(expected_speeds, dtype=float)
    if np.any(~(v > 0)):
        raise NonpositiveSpeed("expected speeds must be positive")
    return float(np.sum(np.asarray(lengths, dtype=float) / v))


def true_travel_time(trajectory: Trajectory, network: RoadNetwork) -> float | None:
    """Observed travel time, or None unless every speed is recorded."""
    if any(s is None for s in trajectory.speeds):
        return None
    return point_travel_time([network[s].length for s in trajectory.route], trajectory.speeds)


def mae_mape(estimates: Sequence[float], truths: Sequence[float]) -> tuple[float, float]:
    if len(estimates) != len(truths):
        raise ValueError("estimates and truths differ in length")
    if not len(truths):
        return math.nan, math.nan
    y_hat = np.asarray(estimates, dtype=float)
    y = np.asarray(truths, dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("ground-truth travel times must be positive")
    err = np.abs(y_hat - y)
    return float(err.mean()), float(100.0 * np.mean(err / y))


@dataclass
class MetricsReport:
    algorithm: str
    nll: float
    mae: float  # seconds
    mape: float  # percent
    n_trajectories: int
    n_timed: int  # fully observed trajectories used for MAE/MAPE
    tables: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary(self) -> str:
        return (
            f"{self.algorithm}: NLL {self.nll:.4f}  MAE {self.mae:.2f} s  MAPE {self.mape:.2f} %"
            f"  ({self.n_trajectories} trajectories, {self.n_timed} timed)"
        )


def evaluate(
    estimator, network: RoadNetwork, trajectories: Sequence[Trajectory], recorded_arrivals: bool = False
) -> MetricsReport:
    """Test protocol: only the first arrival is given unless ``recorded_arrivals``."""
    estimates = estimator.estimate(trajectories, recorded_arrivals=recorded_arrivals)
    nll = dataset_nll(estimates, trajectories)
    y_hat, y = [], []
    for est, tr in zip(estimates, trajectories):
        truth = true_travel_time(tr, network)
        if truth is None:
            continue
        y.append(truth)
        # same floor as arrival propagation, so a vague prior with a negative mean stays usable
        speeds = np.maximum(est.expected, MIN_PROPAGATION_SPEED)
        y_hat.append(point_travel_time([network[s].length for s in tr.route], speeds))
    mae, mape = mae_mape(y_hat, y)
    return MetricsReport(getattr(estimator, "name", "?"), nll, mae, mape, len(trajectories), len(y))


# --- robustness by record availability ---------------------------------------


@dataclass
class Bucket:
    lower: int  # inclusive record count
    upper: int | None  # exclusive, None for the open last bucket
    n: int
    mean_snll: float

    @property
    def label(self) -> str:
        if self.upper == self.lower + 1:
            return str(self.lower)
        return f"{self.lower}+" if self.upper is None else f"{self.lower}-{self.upper - 1}"


def traversal_table(
    estimator,
    network: RoadNetwork,
    trajectories: Sequence[Trajectory],
    store: RecordStore,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """(record count at the true arrival, sNLL) for every observed traversal."""
    estimates = estimator.estimate(trajectories)
    counts, losses = [], []
    for est, tr in zip(estimates, trajectories):
        snll = traversal_snll(est, tr)
        for i, trav in enumerate(tr.traversals):
            if trav.speed is None:
                continue
            counts.append(record_count_at_truth(store, tr, i, delta))
            losses.append(snll[i])
    return np.asarray(counts, dtype=np.int64), np.asarray(losses, dtype=float)


def bucketize(counts: np.ndarray, losses: np.ndarray, edges: Sequence[int] | None = DEFAULT_BUCKET_EDGES) -> list[Bucket]:
    """Mean sNLL per record-count bucket; empty buckets are left out.

    ``edges=None`` gives one bucket per distinct count.
    """
    groups: dict[tuple, list[float]] = {}
    for cnt, loss in zip(counts.tolist(), losses.tolist()):
        if edges is None:
            key = (cnt, cnt + 1)
        else:
            k = bisect.bisect_right(edges, cnt) - 1
            key = (edges[k], edges[k + 1] if k + 1 < len(edges) else None)
        groups.setdefault(key, []).append(loss)
    return [
        Bucket(lo, hi, len(v), math.fsum(v) / len(v))
        for (lo, hi), v in sorted(groups.items(), key=lambda kv: kv[0][0])
    ]


def robustness_curve(
    estimator,
    network: RoadNetwork,
    trajectories: Sequence[Trajectory],
    store: RecordStore,
    delta: float = 7200.0,
    edges: Sequence[int] | None = DEFAULT_BUCKET_EDGES,
) -> list[Bucket]:
    counts, losses = traversal_table(estimator, network, trajectories, store, delta)
    return bucketize(counts, losses, edges)


def write_curve_csv(buckets: Iterable[Bucket], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "lower", "upper", "n", "mean_snll"])
        for b in buckets:
            w.writerow([b.label, b.lower, "" if b.upper is None else b.upper, b.n, repr(b.mean_snll)])


# --- prior regularization ----------------------------------------------------


def prior_snll_by_segment(
    params: ModelParams, network: RoadNetwork, trajectories: Sequence[Trajectory], batch_size: int = 256
) -> dict[str, tuple[int, float]]:
    """Per segment: (traversal count, mean sNLL of the prior predictive) at recorded arrivals."""
    sums: dict[str, list[float]] = {}
    for lo in range(0, len(trajectories), batch_size):
        chunk = trajectories[lo : lo + batch_size]
        batch = RouteBatch.build(network, params.scaler, [t.route for t in chunk], [t.arrivals for t in chunk])
        fwd = forward(params, batch)
        speeds = np.zeros(batch.mask.shape)
        for b, tr in enumerate(chunk):
            speeds[: len(tr), b] = [0.0 if s is None else s for s in tr.speeds]
        loss, _ = snll_and_grad(*fwd.prior, *fwd.stats, speeds)
        for b, tr in enumerate(chunk):
            for i, trav in enumerate(tr.traversals):
                if trav.speed is not None:
                    sums.setdefault(trav.segment, []).append(float(loss[i, b]))
    return {sid: (len(v), math.fsum(v) / len(v)) for sid, v in sums.items()}


def frequency_quartiles(per_segment: dict[str, tuple[int, float]]) -> tuple[list[str], list[str]]:
    """Segments at or below the 25th and at or above the 75th frequency percentile."""
    freq = np.array([n for n, _ in per_segment.values()], dtype=float)
    p25, p75 = np.percentile(freq, [25, 75])
    ids = list(per_segment)
    low = [s for s in ids if per_segment[s][0] <= p25]
    high = [s for s in ids if per_segment[s][0] >= p75]
    return low, high


@dataclass
class RegularizationReport:
    low_quartile_diff: float  # mean prior sNLL of reference minus candidate, rare segments
    high_quartile_diff: float  # same, frequent segments
    n_low: int
    n_high: int


def regularization_analysis(
    reference: ModelParams, candidate: ModelParams, network: RoadNetwork, trajectories: Sequence[Trajectory]
) -> RegularizationReport:
    """Compare two priors' per-segment sNLL across segment-frequency quartiles.

    Frequencies and quartiles are taken from ``trajectories`` (the training set).
    """
    ref = prior_snll_by_segment(reference, network, trajectories)
    cand = prior_snll_by_segment(candidate, network, trajectories)
    low, high = frequency_quartiles(ref)

    def diff(ids):
        return float(np.mean([ref[s][1] - cand[s][1] for s in ids]))

    return RegularizationReport(diff(low), diff(high), len(low), len(high))


# --- sweeps ------------------------------------------------------------------


@dataclass
class SweepCell:
    key: tuple
    value: float


def sweep(grid: Iterable, runner: Callable[..., float]) -> list[SweepCell]:
    """Evaluate ``runner`` on every grid point (tuples are unpacked)."""
    cells = []
    for point in grid:
        key = point if isinstance(point, tuple) else (point,)
        cells.append(SweepCell(key, float(runner(*key))))
    if not cells:
        raise ValueError("empty grid")
    return cells


def record_selection_grid(contexts=CONTEXT_GRID, deltas_minutes=DELTA_GRID_MINUTES) -> list[tuple[int, float]]:
    return [(c, d) for c in contexts for d in deltas_minutes]


def data_efficiency_sweep(
    network: RoadNetwork,
    train_set: Sequence[Trajectory],
    val_set: Sequence[Trajectory],
    test_set: Sequence[Trajectory],
    cfg: TrainConfig,
    fractions: Sequence[float] = DATA_FRACTIONS,
) -> list[SweepCell]:
    """Test NLL after training on the first fraction of the (chronological) training set.

    The number of optimizer steps is held at that of a full-data run.
    """
    total_steps = cfg.epochs * math.ceil(len(train_set) / cfg.batch_size)

    def run(frac: float) -> float:
        if not 0 < frac <= 1:
            raise ValueError("fractions must lie in (0, 1]")
        subset = list(train_set[: max(1, int(round(frac * len(train_set))))])
        per_epoch = math.ceil(len(subset) / cfg.batch_size)
        sub_cfg = TrainConfig(**{**asdict(cfg), "selection": cfg.selection})
        sub_cfg.epochs = math.ceil(total_steps / per_epoch)
        sub_cfg.max_steps = total_steps
        store = RecordStore.build(subset, c_max=cfg.selection.c) if cfg.objective == "unite-dis" else None
        result = train(network, subset, sub_cfg, val_set, store)
        return mean_nll(result.params, network, test_set, store, cfg.selection if store else None)

    return sweep(list(fractions), run)


def write_sweep_csv(cells: Iterable[SweepCell], names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + ["nll"])
        for cell in cells:
            w.writerow(list(cell.key) + [repr(cell.value)])
