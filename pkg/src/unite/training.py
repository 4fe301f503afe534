"""Training loop for the recurrent prior (GRU and UniTE-DIS objectives).

Both objectives minimise the mean per-trajectory sum of posterior-predictive
NLLs. For GRU the posterior is the prior itself (no evidence); for UniTE-DIS
each step is updated with records selected from the training store, leaving
out the trajectory being fitted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conjugate import NonFinite, SampleStats, snll_and_grad
from .network import FeatureScaler, RoadNetwork, Trajectory
from .neural import AdamState, ModelParams, RouteBatch, adam_step, backward, forward
from .records import RecordStore, SelectionParams

log = logging.getLogger(__name__)

OBJECTIVES = ("gru", "unite-dis")


@dataclass
class TrainConfig:
    objective: str = "unite-dis"
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    a: float = 1.0
    epsilon: float = 1e-6
    selection: SelectionParams = field(default_factory=SelectionParams)
    max_steps: int | None = None  # stop after this many optimizer steps

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch size must be positive")


@dataclass
class EpochLog:
    epoch: int
    steps: int
    train_nll: float
    val_nll: float | None


@dataclass
class TrainResult:
    params: ModelParams  # best validation checkpoint (last one without validation)
    history: list[EpochLog]
    best_epoch: int


class _EvidenceCache:
    """Record statistics per (trip, step, arrival); training arrivals are recorded so queries repeat."""

    def __init__(self, store: RecordStore, selection: SelectionParams):
        self.store, self.selection = store, selection
        self._cache: dict[tuple, SampleStats] = {}

    def for_batch(self, trajectories: Sequence[Trajectory], leave_out: bool = True):
        sels = [self.selection.leaving_out(tr.id if leave_out else None) for tr in trajectories]

        def evidence(row: int, step: int, tau: float) -> SampleStats:
            key = (trajectories[row].id, step, tau, leave_out)
            st = self._cache.get(key)
            if st is None:
                st = self.store.select_stats(trajectories[row].route, step, tau, sels[row])
                self._cache[key] = st
            return st

        return evidence


def _speed_matrix(batch: RouteBatch, trajectories: Sequence[Trajectory]) -> np.ndarray:
    t = np.full(batch.mask.shape, np.nan)
    for b, tr in enumerate(trajectories):
        t[: len(tr), b] = [np.nan if s is None else s for s in tr.speeds]
    return t


def batch_loss(
    params: ModelParams,
    network: RoadNetwork,
    trajectories: Sequence[Trajectory],
    evidence=None,
    recorded_arrivals: bool = True,
    with_grad: bool = True,
):
    """Mean per-trajectory NLL over a batch and (optionally) its weight gradients."""
    arrivals = [
        tr.arrivals if recorded_arrivals else [tr.traversals[0].arrival] + [None] * (len(tr) - 1)
        for tr in trajectories
    ]
    batch = RouteBatch.build(network, params.scaler, [tr.route for tr in trajectories], arrivals)
    fwd = forward(params, batch, evidence)
    speeds = _speed_matrix(batch, trajectories)
    observed = ~np.isnan(speeds)
    loss, g = snll_and_grad(*fwd.prior, *fwd.stats, np.where(observed, speeds, 0.0))
    loss = np.where(observed, loss, 0.0)
    total = float(loss.sum()) / len(trajectories)
    if not math.isfinite(total):
        raise NonFinite("training loss is not finite")
    if not with_grad:
        return total, None
    scale = 1.0 / len(trajectories)
    grads = backward(params, fwd.tape, [np.where(observed, gj, 0.0) * scale for gj in g])
    return total, grads


def mean_nll(
    params: ModelParams,
    network: RoadNetwork,
    trajectories: Sequence[Trajectory],
    store: RecordStore | None = None,
    selection: SelectionParams | None = None,
    batch_size: int = 256,
) -> float:
    """Test-protocol NLL: only the first arrival is known, later ones are propagated."""
    total = 0.0
    cache = _EvidenceCache(store, selection or SelectionParams()) if store is not None else None
    for lo in range(0, len(trajectories), batch_size):
        chunk = trajectories[lo : lo + batch_size]
        ev = cache.for_batch(chunk, leave_out=True) if cache else None
        nll, _ = batch_loss(params, network, chunk, ev, recorded_arrivals=False, with_grad=False)
        total += nll * len(chunk)
    return total / len(trajectories)


def train(
    network: RoadNetwork,
    train_set: Sequence[Trajectory],
    cfg: TrainConfig,
    val_set: Sequence[Trajectory] | None = None,
    store: RecordStore | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Fit the prior with ADAM on a fixed random partition into batches.

    The partition is drawn once from ``cfg.seed``; its order is reshuffled
    every epoch. The returned weights are those of the epoch with the lowest
    validation NLL.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    scaler = FeatureScaler.fit(network, train_set)
    params = init.copy() if init is not None else ModelParams.init(rng, cfg.a, cfg.epsilon, scaler)
    params.scaler = scaler
    if cfg.objective == "unite-dis" and store is None:
        store = RecordStore.build(train_set, c_max=cfg.selection.c)
    dis = cfg.objective == "unite-dis"
    cache = _EvidenceCache(store, cfg.selection) if dis else None

    order = rng.permutation(len(train_set))
    batches = [order[k : k + cfg.batch_size] for k in range(0, len(order), cfg.batch_size)]
    state = AdamState.zeros(params)
    history: list[EpochLog] = []
    best, best_epoch, best_val = params.copy(), 0, math.inf
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for bi in rng.permutation(len(batches)):
            chunk = [train_set[k] for k in batches[bi]]
            ev = cache.for_batch(chunk) if dis else None
            loss, grads = batch_loss(params, network, chunk, ev)
            params, state = adam_step(params, grads, state, cfg.lr)
            losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val = None
        if val_set:
            val = mean_nll(params, network, val_set, store if dis else None, cfg.selection)
        history.append(EpochLog(epoch, steps, float(np.mean(losses)), val))
        log.info("epoch %d: train %.4f val %s", epoch, history[-1].train_nll, val)
        if val is None or val < best_val:
            best, best_epoch, best_val = params.copy(), epoch, math.inf if val is None else val
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return TrainResult(best, history, best_epoch)
