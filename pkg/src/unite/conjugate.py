"""Normal-gamma conjugate updates and the Student-t posterior predictive.

Scalar API over small frozen dataclasses, plus array versions used by the
training loop (``posterior_arrays``, ``snll_and_grad``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .special import digamma, lgamma

_HALF_LOG_PI = 0.5 * math.log(math.pi)


class NonFinite(ArithmeticError):
    """A computation produced NaN or infinity."""


@dataclass(frozen=True)
class NormalGamma:
    mu: float
    kappa: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("kappa", "alpha", "beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"NormalGamma.{name} must be positive and finite, got {v!r}")
        if not math.isfinite(self.mu):
            raise ValueError(f"NormalGamma.mu must be finite, got {self.mu!r}")

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.mu, self.kappa, self.alpha, self.beta)


@dataclass(frozen=True)
class StudentT:
    nu: float
    loc: float
    scale: float

    def __post_init__(self):
        if not (self.nu > 0 and self.scale > 0):
            raise ValueError(f"StudentT needs nu > 0 and scale > 0, got {self}")

    def logpdf(self, t: float) -> float:
        return studentt_logpdf(self, t)


@dataclass(frozen=True)
class SampleStats:
    """Record count, mean and biased (divisor m) variance."""

    m: int
    mean: float = 0.0
    var_biased: float = 0.0


def sample_stats(records: Sequence[float]) -> SampleStats:
    m = len(records)
    if m == 0:
        return SampleStats(0)
    x = np.asarray(records, dtype=float)
    mean = float(x.mean())
    return SampleStats(m, mean, float(np.mean((x - mean) ** 2)))


def posterior_update(prior: NormalGamma, stats: SampleStats) -> NormalGamma:
    if stats.m == 0:
        return prior
    mu0, k0, a0, b0 = prior.astuple()
    m, mean, s2 = stats.m, stats.mean, stats.var_biased
    km = k0 + m
    return NormalGamma(
        mu=(k0 * mu0 + m * mean) / km,
        kappa=km,
        alpha=a0 + 0.5 * m,
        beta=b0 + 0.5 * m * s2 + 0.5 * k0 * m * (mean - mu0) ** 2 / km,
    )


def posterior_predictive(ng: NormalGamma) -> StudentT:
    return StudentT(
        nu=2.0 * ng.alpha,
        loc=ng.mu,
        scale=math.sqrt(ng.beta * (ng.kappa + 1.0) / (ng.alpha * ng.kappa)),
    )


def studentt_logpdf(dist: StudentT, t):
    nu, loc, scale = dist.nu, dist.loc, dist.scale
    z = (np.asarray(t, dtype=float) - loc) / scale
    out = (
        lgamma(0.5 * (nu + 1.0))
        - lgamma(0.5 * nu)
        - 0.5 * math.log(nu * math.pi)
        - math.log(scale)
        - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
    )
    return float(out) if np.ndim(out) == 0 else out


def snll(ng: NormalGamma, t: float) -> float:
    return -studentt_logpdf(posterior_predictive(ng), t)


def gaussian_logpdf(mu, sigma, t):
    z = (np.asarray(t, dtype=float) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi)


# --- array versions ---------------------------------------------------------


def posterior_arrays(mu0, k0, a0, b0, m, mean, s2):
    """Elementwise posterior update; rows with m == 0 return the prior bit-for-bit."""
    m = np.asarray(m, dtype=float)
    km = k0 + m
    mu_m = np.where(m > 0, (k0 * mu0 + m * mean) / km, mu0)
    a_m = np.where(m > 0, a0 + 0.5 * m, a0)
    b_m = np.where(m > 0, b0 + 0.5 * m * s2 + 0.5 * k0 * m * (mean - mu0) ** 2 / km, b0)
    k_m = np.where(m > 0, km, k0)
    return mu_m, k_m, a_m, b_m


def snll_and_grad(mu0, k0, a0, b0, m, mean, s2, t):
    """Posterior-predictive sNLL and its gradient w.r.t. the prior hyperparameters.

    Uses snll = lgamma(a) - lgamma(a+1/2) + log(pi)/2 + log(D)/2
    + (a+1/2) log(1 + r^2/D) with D = 2b(k+1)/k, r = t - mu, all at the posterior.
    Returns (loss, (d_mu0, d_k0, d_a0, d_b0)).
    """
    m = np.asarray(m, dtype=float)
    mu, k, a, b = posterior_arrays(mu0, k0, a0, b0, m, mean, s2)
    r = t - mu
    D = 2.0 * b * (k + 1.0) / k
    r2 = r * r
    loss = lgamma(a) - lgamma(a + 0.5) + _HALF_LOG_PI + 0.5 * np.log(D) + (a + 0.5) * np.log1p(r2 / D)

    g_a = digamma(a) - digamma(a + 0.5) + np.log1p(r2 / D)
    g_mu = -(2.0 * a + 1.0) * r / (D + r2)
    g_D = 0.5 / D - (a + 0.5) * r2 / (D * (D + r2))
    g_b = g_D * D / b
    g_k = g_D * (-2.0 * b / (k * k))

    # chain through the update; m == 0 rows reduce to the identity
    g_mu0 = g_mu * k0 / k - g_b * k0 * m * (mean - mu0) / k
    g_k0 = g_k + g_mu * (mu0 - mu) / k + g_b * 0.5 * m * m * (mean - mu0) ** 2 / (k * k)
    g_mu0 = np.where(m > 0, g_mu0, g_mu)
    g_k0 = np.where(m > 0, g_k0, g_k)
    return loss, (g_mu0, g_k0, g_a, g_b)
