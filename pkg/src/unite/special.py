"""Lanczos log-gamma and its exact derivative (digamma), vectorized.

The digamma here is the derivative of *this* lgamma, so analytic gradients
of expressions built from ``lgamma`` agree with finite differences of them.
"""

import numpy as np

_G = 7.0
_P = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_K = np.arange(1, len(_P), dtype=float)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _series(z):
    # z is the shifted argument x - 1, shape (...,)
    denom = z[..., None] + _K
    a = _P[0] + np.sum(_P[1:] / denom, axis=-1)
    da = -np.sum(_P[1:] / denom**2, axis=-1)
    return a, da


def _lgamma_right(x):
    z = x - 1.0
    t = z + _G + 0.5
    a, _ = _series(z)
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def _digamma_right(x):
    z = x - 1.0
    t = z + _G + 0.5
    a, da = _series(z)
    return np.log(t) + (z + 0.5) / t - 1.0 + da / a


def lgamma(x):
    """log|Gamma(x)| for positive x (reflection below 0.5)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    right = x >= 0.5
    out[right] = _lgamma_right(x[right])
    left = ~right
    if left.any():
        xl = x[left]
        out[left] = np.log(np.pi / np.abs(np.sin(np.pi * xl))) - _lgamma_right(1.0 - xl)
    return out[0] if scalar else out


def digamma(x):
    """d/dx of :func:`lgamma`."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    right = x >= 0.5
    out[right] = _digamma_right(x[right])
    left = ~right
    if left.any():
        xl = x[left]
        out[left] = _digamma_right(1.0 - xl) - np.pi / np.tan(np.pi * xl)
    return out[0] if scalar else out
