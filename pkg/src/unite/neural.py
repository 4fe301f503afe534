"""Recurrent prior function: time embeddings, GRU cell with skip connection,
prior function layer, reverse-mode gradients and ADAM.

Everything runs batched over trajectories: arrays are laid out (step, row, ...)
and padded rows carry zero loss gradient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .conjugate import NonFinite, NormalGamma, SampleStats, posterior_arrays
from .network import DAY_SECONDS, WEEK_SECONDS, FeatureScaler, RoadNetwork

N_TOD = 96
N_DOW = 7
EMBED = 8
HIDDEN = 32
INPUT = 32  # 16 segment features + 16 time embedding
SKIP = HIDDEN + INPUT

PARAM_SHAPES = {
    "W_tod": (N_TOD, EMBED),
    "W_dow": (N_DOW, EMBED),
    "gru_Wx": (INPUT, 3 * HIDDEN),  # column blocks: reset, update, candidate
    "gru_Wh": (HIDDEN, 3 * HIDDEN),
    "gru_b": (3 * HIDDEN,),
    "W_out": (SKIP, 4),
}
CHECKPOINT_VERSION = 1

# floor on the speed used to advance arrival times; keeps an untrained prior
# with a nonpositive mean from moving time backwards
MIN_PROPAGATION_SPEED = 0.5


def _glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    a: float = 1.0
    epsilon: float = 1e-6
    scaler: FeatureScaler = field(default_factory=FeatureScaler)

    def __post_init__(self):
        if not (self.a > 0 and self.epsilon > 0):
            raise ValueError("a and epsilon must be positive")
        for name, shape in PARAM_SHAPES.items():
            if name not in self.weights:
                raise ValueError(f"missing weight block {name!r}")
            if self.weights[name].shape != shape:
                raise ValueError(f"weight {name!r} has shape {self.weights[name].shape}, expected {shape}")

    @classmethod
    def init(cls, seed: int | np.random.Generator = 0, a: float = 1.0, epsilon: float = 1e-6, scaler=None):
        rng = np.random.default_rng(seed)
        w = {
            "W_tod": _glorot(rng, N_TOD, EMBED, (N_TOD, EMBED)),
            "W_dow": _glorot(rng, N_DOW, EMBED, (N_DOW, EMBED)),
            "gru_Wx": np.hstack([_glorot(rng, INPUT, HIDDEN, (INPUT, HIDDEN)) for _ in range(3)]),
            "gru_Wh": np.hstack([_glorot(rng, HIDDEN, HIDDEN, (HIDDEN, HIDDEN)) for _ in range(3)]),
            "gru_b": np.zeros(3 * HIDDEN),
            "W_out": _glorot(rng, SKIP, 4, (SKIP, 4)),
        }
        return cls(w, a, epsilon, scaler or FeatureScaler())

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, self.a, self.epsilon, self.scaler)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def config_hash(self) -> str:
        blob = json.dumps({"shapes": PARAM_SHAPES, "a": self.a, "epsilon": self.epsilon}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                version=np.array(CHECKPOINT_VERSION),
                a=np.array(self.a),
                epsilon=np.array(self.epsilon),
                scaler_mean=np.asarray(self.scaler.mean),
                scaler_scale=np.asarray(self.scaler.scale),
                config_hash=np.array(self.config_hash()),
                **{f"w_{k}": v for k, v in self.weights.items()},
            )

    @classmethod
    def load(cls, path: str | Path) -> ModelParams:
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {int(z['version'])}")
            weights = {k[2:]: z[k].astype(float) for k in z.files if k.startswith("w_")}
            params = cls(
                weights,
                float(z["a"]),
                float(z["epsilon"]),
                FeatureScaler(z["scaler_mean"].tolist(), z["scaler_scale"].tolist()),
            )
            if str(z["config_hash"]) != params.config_hash():
                raise ValueError(f"{path}: config hash mismatch")
        return params


def time_indices(tau):
    """(15-minute slot of the day, day of week) for times of week."""
    tau = np.asarray(tau, dtype=float)
    tod = np.floor(np.mod(tau, DAY_SECONDS) / 900.0).astype(np.int64)
    dow = np.floor(tau / DAY_SECONDS).astype(np.int64)
    return np.clip(tod, 0, N_TOD - 1), np.clip(dow, 0, N_DOW - 1)


def embed_time(tau: float, params: ModelParams) -> np.ndarray:
    tod, dow = time_indices(tau)
    return np.concatenate([params.weights["W_tod"][tod], params.weights["W_dow"][dow]])


def elu(x, a):
    return np.where(x > 0, x, a * np.expm1(np.minimum(x, 0.0)))


def constrain(h1, a: float, eps: float):
    """Map raw projections (..., 4) to (mu0, kappa0, alpha0, beta0)."""
    return (
        h1[..., 0],
        elu(h1[..., 1], a) + a + eps,
        np.abs(h1[..., 2]) + eps,
        np.abs(h1[..., 3]) + eps,
    )


def prior_function_layer(h, params: ModelParams) -> NormalGamma:
    h1 = np.asarray(h, dtype=float) @ params.weights["W_out"]
    out = [float(v) for v in constrain(h1, params.a, params.epsilon)]
    if not all(math.isfinite(v) for v in out):
        raise NonFinite(f"prior function layer produced {out}")
    return NormalGamma(*out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- batched forward pass ----------------------------------------------------


@dataclass
class RouteBatch:
    """Padded inputs for a batch of routes, laid out (step, row)."""

    features: np.ndarray  # (L, B, 16) standardized
    lengths: np.ndarray  # (L, B) segment lengths in meters
    recorded: np.ndarray  # (L, B) recorded arrival, nan where missing/unused
    mask: np.ndarray  # (L, B) bool, True for real steps
    routes: list[tuple[str, ...]]

    @property
    def n_steps(self) -> int:
        return self.features.shape[0]

    @property
    def n_rows(self) -> int:
        return self.features.shape[1]

    @classmethod
    def build(
        cls,
        network: RoadNetwork,
        scaler: FeatureScaler,
        routes: Sequence[Sequence[str]],
        arrivals: Sequence[Sequence[float | None]],
    ) -> RouteBatch:
        B = len(routes)
        L = max(len(r) for r in routes)
        feats = np.zeros((L, B, 16))
        lengths = np.ones((L, B))
        recorded = np.full((L, B), np.nan)
        mask = np.zeros((L, B), dtype=bool)
        for b, (route, arr) in enumerate(zip(routes, arrivals)):
            n = len(route)
            if arr[0] is None:
                raise ValueError("first arrival time must be known")
            feats[:n, b] = scaler.transform([network[s].features for s in route])
            lengths[:n, b] = [network[s].length for s in route]
            recorded[:n, b] = [np.nan if t is None else t for t in arr]
            mask[:n, b] = True
        return cls(feats, lengths, recorded, mask, [tuple(r) for r in routes])


Evidence = Callable[[int, int, float], SampleStats]  # (row, step, tau) -> stats


@dataclass
class Tape:
    """Forward activations needed for the backward pass."""

    x: np.ndarray  # (L, B, 32)
    z_prev: np.ndarray  # (L, B, 32)
    r: np.ndarray
    u: np.ndarray
    n: np.ndarray
    z: np.ndarray
    h1: np.ndarray  # (L, B, 4)
    tod: np.ndarray  # (L, B)
    dow: np.ndarray
    mask: np.ndarray


@dataclass
class Forward:
    prior: tuple[np.ndarray, ...]  # 4 arrays (L, B)
    posterior: tuple[np.ndarray, ...]
    stats: tuple[np.ndarray, np.ndarray, np.ndarray]  # m, mean, var (L, B)
    tau: np.ndarray  # (L, B) arrival times used
    tape: Tape


def forward(params: ModelParams, batch: RouteBatch, evidence: Evidence | None = None) -> Forward:
    """Run the recurrent prior over a batch, drawing evidence step by step.

    The arrival time at step i+1 is the recorded one when present, otherwise
    the time at step i advanced by length / posterior mean speed. That chain
    is not differentiated.
    """
    w = params.weights
    L, B = batch.n_steps, batch.n_rows
    Wx, Wh, bias = w["gru_Wx"], w["gru_Wh"], w["gru_b"]
    H = HIDDEN

    x_all = np.zeros((L, B, INPUT))
    zp_all = np.zeros((L, B, H))
    r_all = np.zeros((L, B, H))
    u_all = np.zeros((L, B, H))
    n_all = np.zeros((L, B, H))
    z_all = np.zeros((L, B, H))
    h1_all = np.zeros((L, B, 4))
    tod_all = np.zeros((L, B), dtype=np.int64)
    dow_all = np.zeros((L, B), dtype=np.int64)
    tau_all = np.zeros((L, B))
    stats = np.zeros((3, L, B))
    post = np.zeros((4, L, B))
    prior = np.zeros((4, L, B))

    z = np.zeros((B, H))
    tau = batch.recorded[0].copy()
    for s in range(L):
        rec = batch.recorded[s]
        if s > 0:
            tau = np.where(np.isnan(rec), tau, rec)
        tau = np.where(batch.mask[s], tau, 0.0)
        tau_all[s] = tau
        tod, dow = time_indices(tau)
        x = np.concatenate([batch.features[s], w["W_tod"][tod], w["W_dow"][dow]], axis=1)
        gx = x @ Wx + bias
        gh = z @ Wh[:, : 2 * H]
        r = _sigmoid(gx[:, :H] + gh[:, :H])
        u = _sigmoid(gx[:, H : 2 * H] + gh[:, H:])
        n = np.tanh(gx[:, 2 * H :] + (r * z) @ Wh[:, 2 * H :])
        z_new = (1.0 - u) * n + u * z
        h = np.concatenate([z_new, x], axis=1)
        h1 = h @ w["W_out"]
        p = constrain(h1, params.a, params.epsilon)

        x_all[s], zp_all[s], r_all[s], u_all[s], n_all[s], z_all[s], h1_all[s] = x, z, r, u, n, z_new, h1
        tod_all[s], dow_all[s] = tod, dow
        for j in range(4):
            prior[j, s] = p[j]

        m = np.zeros(B)
        mean = np.zeros(B)
        var = np.zeros(B)
        if evidence is not None:
            for b in np.flatnonzero(batch.mask[s]):
                st = evidence(int(b), s, float(tau[b]))
                m[b], mean[b], var[b] = st.m, st.mean, st.var_biased
        stats[:, s] = m, mean, var
        q = posterior_arrays(*p, m, mean, var)
        for j in range(4):
            post[j, s] = q[j]

        if not np.all(np.isfinite(h1[batch.mask[s]])):
            raise NonFinite(f"non-finite prior projection at step {s}")
        speed = np.maximum(q[0], MIN_PROPAGATION_SPEED)
        tau = np.mod(tau + batch.lengths[s] / speed, WEEK_SECONDS)
        z = z_new

    tape = Tape(x_all, zp_all, r_all, u_all, n_all, z_all, h1_all, tod_all, dow_all, batch.mask)
    return Forward(tuple(prior), tuple(post), (stats[0], stats[1], stats[2]), tau_all, tape)


def backward(params: ModelParams, tape: Tape, d_prior: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of a loss w.r.t. all weights, given d loss / d prior hyperparameters.

    ``d_prior`` holds four (L, B) arrays for (mu0, kappa0, alpha0, beta0).
    """
    w = params.weights
    H = HIDDEN
    Wx, Wh, W_out = w["gru_Wx"], w["gru_Wh"], w["W_out"]
    g = params.zeros_like()
    L, B = tape.mask.shape
    a = params.a
    dz_next = np.zeros((B, H))
    d_mu, d_k, d_a, d_b = (np.where(tape.mask, d, 0.0) for d in d_prior)

    for s in reversed(range(L)):
        h1 = tape.h1[s]
        elu_grad = np.where(h1[:, 1] > 0, 1.0, a * np.exp(np.minimum(h1[:, 1], 0.0)))
        dh1 = np.stack(
            [d_mu[s], d_k[s] * elu_grad, d_a[s] * np.sign(h1[:, 2]), d_b[s] * np.sign(h1[:, 3])], axis=1
        )
        x, zp, r, u, n = tape.x[s], tape.z_prev[s], tape.r[s], tape.u[s], tape.n[s]
        h = np.concatenate([tape.z[s], x], axis=1)
        g["W_out"] += h.T @ dh1
        dh = dh1 @ W_out.T
        dz = dh[:, :H] + dz_next
        dx = dh[:, H:].copy()

        dn = dz * (1.0 - u)
        du = dz * (zp - n)
        dzp = dz * u
        dan = dn * (1.0 - n * n)
        rz = r * zp
        d_rz = dan @ Wh[:, 2 * H :].T
        dr = d_rz * zp
        dzp += d_rz * r
        dar = dr * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dgates = np.concatenate([dar, dau, dan], axis=1)

        g["gru_Wx"] += x.T @ dgates
        g["gru_b"] += dgates.sum(axis=0)
        g["gru_Wh"][:, : 2 * H] += zp.T @ dgates[:, : 2 * H]
        g["gru_Wh"][:, 2 * H :] += rz.T @ dan
        dx += dgates @ Wx.T
        dzp += dgates[:, : 2 * H] @ Wh[:, : 2 * H].T

        np.add.at(g["W_tod"], tape.tod[s], dx[:, 16:24])
        np.add.at(g["W_dow"], tape.dow[s], dx[:, 24:32])
        dz_next = dzp
    return g


def forward_route(
    route: Sequence[str],
    arrivals: Sequence[float | None],
    params: ModelParams,
    network: RoadNetwork,
    posterior_hook: Callable[[int, float], SampleStats] | None = None,
) -> tuple[list[NormalGamma], Forward]:
    """Single-route forward pass; the hook maps (step, tau) to evidence."""
    batch = RouteBatch.build(network, params.scaler, [route], [arrivals])
    hook = None if posterior_hook is None else (lambda row, step, tau: posterior_hook(step, tau))
    fwd = forward(params, batch, hook)
    priors = [NormalGamma(*(float(fwd.prior[j][s, 0]) for j in range(4))) for s in range(len(route))]
    return priors, fwd


def gradients(params: ModelParams, fwd: Forward, d_prior) -> dict[str, np.ndarray]:
    return backward(params, fwd.tape, d_prior)


# --- ADAM --------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    t = state.t + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    new_w, new_m, new_v = {}, {}, {}
    for k, p in params.weights.items():
        g = grads[k]
        m = BETA1 * state.m[k] + (1.0 - BETA1) * g
        v = BETA2 * state.v[k] + (1.0 - BETA2) * g * g
        new_w[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return ModelParams(new_w, params.a, params.epsilon, params.scaler), AdamState(new_m, new_v, t)
