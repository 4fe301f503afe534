"""Per-segment travel speed estimators: AGG, GRU, UniTE-DIS and UniTE-GEN.

Every estimator maps a route and its known arrival times to a
:class:`RouteEstimate`. Arrival times that are not given are propagated by
the estimator's own expected speeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conjugate import SampleStats, StudentT, gaussian_logpdf, sample_stats
from .network import KMH_TO_MPS, WEEK_SECONDS, Category, RoadNetwork, Segment, Trajectory
from .neural import MIN_PROPAGATION_SPEED, ModelParams, RouteBatch, forward
from .records import EMPTY_STORE, RecordStore, SelectionParams
from .special import lgamma

# keeps the AGG likelihood finite when all selected records coincide
AGG_SIGMA_FLOOR = 1e-3


def speed_limit_heuristic(segment: Segment) -> float:
    """Posted limit if known, else the Danish OSM default for the segment, in m/s."""
    if segment.speed_limit is not None:
        return segment.speed_limit
    if segment.category is Category.MOTORWAY:
        kmh = 130.0
    elif segment.category is Category.TRUNK:
        kmh = 80.0
    elif segment.in_city_source or segment.in_city_target:
        kmh = 50.0
    else:
        kmh = 80.0
    return kmh * KMH_TO_MPS


@dataclass(frozen=True)
class Gaussian:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Gaussian sigma must be positive")

    def logpdf(self, t: float) -> float:
        return float(gaussian_logpdf(self.mu, self.sigma, t))


@dataclass
class RouteEstimate:
    """Predictive distributions along one route.

    ``kind`` is "studentt" (params nu, loc, scale) or "gaussian" (mu, sigma).
    """

    kind: str
    params: np.ndarray  # (n, 3) or (n, 2)
    expected: np.ndarray  # (n,) expected speed, m/s
    arrivals: np.ndarray  # (n,) arrival times used
    n_records: np.ndarray  # (n,) records used as evidence
    prior: np.ndarray | None = None  # (n, 4) prior hyperparameters, neural models only

    def __len__(self) -> int:
        return len(self.expected)

    def dist(self, i: int):
        if self.kind == "studentt":
            return StudentT(*map(float, self.params[i]))
        return Gaussian(*map(float, self.params[i]))

    def logpdf(self, speeds) -> np.ndarray:
        """Log density of each segment's predictive at the given speeds."""
        t = np.asarray(speeds, dtype=float)
        if self.kind == "gaussian":
            return gaussian_logpdf(self.params[:, 0], self.params[:, 1], t)
        nu, loc, scale = self.params.T
        z = (t - loc) / scale
        return (
            lgamma(0.5 * (nu + 1.0))
            - lgamma(0.5 * nu)
            - 0.5 * np.log(nu * math.pi)
            - np.log(scale)
            - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
        )


def _arrival_inputs(trajectory: Trajectory, recorded: bool) -> list[float | None]:
    if recorded:
        return trajectory.arrivals
    return [trajectory.traversals[0].arrival] + [None] * (len(trajectory) - 1)


# --- AGG ---------------------------------------------------------------------


@dataclass(frozen=True)
class AggConfig:
    k: int = 1
    selection: SelectionParams = SelectionParams(0, 7200.0)
    mean_factor: float = 0.79
    std_factor: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not (self.mean_factor > 0 and self.std_factor > 0):
            raise ValueError("AGG factors must be positive")


def agg_gaussian(records: Sequence[float], segment: Segment, cfg: AggConfig) -> Gaussian:
    st = sample_stats(records)
    return _agg_from_stats(st, segment, cfg)


def _agg_from_stats(st: SampleStats, segment: Segment, cfg: AggConfig) -> Gaussian:
    if st.m >= cfg.k:
        mu = st.mean
        sigma = math.sqrt(st.var_biased) if st.m > 1 else cfg.std_factor * mu
        return Gaussian(mu, max(sigma, AGG_SIGMA_FLOOR))
    mu = cfg.mean_factor * speed_limit_heuristic(segment)
    return Gaussian(mu, cfg.std_factor * mu)


def agg_estimate(
    store: RecordStore, network: RoadNetwork, route: Sequence[str], i: int, tau: float, cfg: AggConfig
) -> Gaussian:
    st = store.select_stats(route, i, tau, cfg.selection)
    return _agg_from_stats(st, network[route[i]], cfg)


class AggEstimator:
    name = "agg"

    def __init__(self, network: RoadNetwork, store: RecordStore, cfg: AggConfig = AggConfig()):
        self.network, self.store, self.cfg = network, store, cfg

    def estimate_route(
        self, route: Sequence[str], arrivals: Sequence[float | None], leave_out: str | None = None
    ) -> RouteEstimate:
        sel = self.cfg.selection.leaving_out(leave_out)
        n = len(route)
        params = np.zeros((n, 2))
        taus = np.zeros(n)
        counts = np.zeros(n, dtype=np.int64)
        tau = arrivals[0]
        for i in range(n):
            if arrivals[i] is not None:
                tau = arrivals[i]
            st = self.store.select_stats(route, i, tau, sel)
            g = _agg_from_stats(st, self.network[route[i]], self.cfg)
            params[i] = g.mu, g.sigma
            taus[i], counts[i] = tau, st.m
            tau = math.fmod(tau + self.network[route[i]].length / max(g.mu, MIN_PROPAGATION_SPEED), WEEK_SECONDS)
        return RouteEstimate("gaussian", params, params[:, 0].copy(), taus, counts)

    def estimate(self, trajectories: Sequence[Trajectory], recorded_arrivals: bool = False, leave_out: bool = False):
        return [
            self.estimate_route(tr.route, _arrival_inputs(tr, recorded_arrivals), tr.id if leave_out else None)
            for tr in trajectories
        ]


# --- neural estimators -------------------------------------------------------


def _store_evidence(store: RecordStore, routes, selection: SelectionParams, leave_out: Sequence[str | None]):
    sels = [selection.leaving_out(t) for t in leave_out]

    def evidence(row: int, step: int, tau: float) -> SampleStats:
        return store.select_stats(routes[row], step, tau, sels[row])

    return evidence


def neural_estimates(
    params: ModelParams,
    network: RoadNetwork,
    routes: Sequence[Sequence[str]],
    arrivals: Sequence[Sequence[float | None]],
    store: RecordStore | None = None,
    selection: SelectionParams | None = None,
    leave_out: Sequence[str | None] | None = None,
    batch_size: int = 256,
) -> list[RouteEstimate]:
    """Posterior predictives of the recurrent prior updated with store evidence.

    With no store (or an empty one) this is the plain GRU output.
    """
    out: list[RouteEstimate] = []
    leave_out = leave_out or [None] * len(routes)
    for lo in range(0, len(routes), batch_size):
        r = [tuple(x) for x in routes[lo : lo + batch_size]]
        batch = RouteBatch.build(network, params.scaler, r, arrivals[lo : lo + batch_size])
        evidence = None
        if store is not None:
            evidence = _store_evidence(store, r, selection or SelectionParams(), leave_out[lo : lo + batch_size])
        fwd = forward(params, batch, evidence)
        mu, k, a, b = fwd.posterior
        nu = 2.0 * a
        scale = np.sqrt(b * (k + 1.0) / (a * k))
        for row, route in enumerate(r):
            n = len(route)
            out.append(
                RouteEstimate(
                    "studentt",
                    np.stack([nu[:n, row], mu[:n, row], scale[:n, row]], axis=1),
                    mu[:n, row].copy(),
                    fwd.tau[:n, row].copy(),
                    fwd.stats[0][:n, row].astype(np.int64),
                    np.stack([p[:n, row] for p in fwd.prior], axis=1),
                )
            )
    return out


class NeuralEstimator:
    """GRU (no store) or UniTE (store + selection) over a trained prior."""

    def __init__(
        self,
        network: RoadNetwork,
        params: ModelParams,
        store: RecordStore | None = None,
        selection: SelectionParams | None = None,
        name: str = "gru",
    ):
        self.network, self.params, self.store = network, params, store
        self.selection = selection or SelectionParams()
        self.name = name

    def estimate_route(self, route, arrivals, leave_out: str | None = None) -> RouteEstimate:
        return neural_estimates(
            self.params, self.network, [route], [arrivals], self.store, self.selection, [leave_out]
        )[0]

    def estimate(self, trajectories: Sequence[Trajectory], recorded_arrivals: bool = False, leave_out: bool = False):
        return neural_estimates(
            self.params,
            self.network,
            [tr.route for tr in trajectories],
            [_arrival_inputs(tr, recorded_arrivals) for tr in trajectories],
            self.store,
            self.selection,
            [tr.id if leave_out else None for tr in trajectories],
        )


def gru_estimate(params: ModelParams, network: RoadNetwork, route, arrivals) -> RouteEstimate:
    return NeuralEstimator(network, params).estimate_route(route, arrivals)


def unite_dis_estimate(
    params: ModelParams, store: RecordStore, network: RoadNetwork, route, arrivals, selection: SelectionParams
) -> RouteEstimate:
    return NeuralEstimator(network, params, store, selection, "unite-dis").estimate_route(
        route, arrivals, selection.leave_out_trip
    )


def unite_gen_estimate(
    gru_params: ModelParams, store: RecordStore, network: RoadNetwork, route, arrivals, selection: SelectionParams
) -> RouteEstimate:
    """Same computation as UniTE-DIS, on weights trained without evidence."""
    return NeuralEstimator(network, gru_params, store, selection, "unite-gen").estimate_route(
        route, arrivals, selection.leave_out_trip
    )


def make_estimator(
    algorithm: str,
    network: RoadNetwork,
    store: RecordStore | None = None,
    params: ModelParams | None = None,
    agg: AggConfig | None = None,
    selection: SelectionParams | None = None,
):
    if algorithm == "agg":
        return AggEstimator(network, store if store is not None else EMPTY_STORE, agg or AggConfig())
    if params is None:
        raise ValueError(f"{algorithm} needs model parameters")
    if algorithm == "gru":
        return NeuralEstimator(network, params, None, None, "gru")
    if algorithm in ("unite-dis", "unite-gen"):
        return NeuralEstimator(network, params, store if store is not None else EMPTY_STORE, selection, algorithm)
    raise ValueError(f"unknown algorithm {algorithm!r}")
