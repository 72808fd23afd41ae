"""Signed log-domain helpers for the exponential potentials.

A signed-log value is a pair ``(sign, logmag)`` standing for ``sign * exp(logmag)``.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from scipy.special import logsumexp


def log_two_sinh(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed-log form of exp(z) - exp(-z), elementwise."""
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    with np.errstate(divide="ignore"):
        logmag = a + np.log(-np.expm1(-2.0 * a))
    return np.sign(z), logmag


def signed_sum(sign: np.ndarray, logmag: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sum signed-log terms along ``axis``; zero terms are allowed."""
    sign = np.asarray(sign, dtype=float)
    logmag = np.where(sign == 0, 0.0, logmag)
    if sign.shape[axis] == 0:
        shape = np.delete(np.array(sign.shape), axis)
        return np.zeros(shape), np.full(shape, -np.inf)
    # scipy's signed logsumexp returns nan when the largest terms cancel exactly
    top = np.max(np.where(sign == 0, -np.inf, logmag), axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(under="ignore"):
        total = np.sum(sign * np.exp(logmag - top), axis=axis)
    out_sign = np.sign(total)
    with np.errstate(divide="ignore"):
        out = np.squeeze(top, axis=axis) + np.log(np.abs(total))
    return out_sign, out


def coefficients(values: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Sum over the leading (group) axis of exp(eta V) - exp(-eta V)."""
    s, l = log_two_sinh(eta * values)
    return signed_sum(s, l, axis=0)


def rescale(sign: np.ndarray, logmag: np.ndarray, shift: float | None = None) -> tuple[np.ndarray, float]:
    """Return sign*exp(logmag - shift) and the shift used (max finite log by default)."""
    if shift is None:
        finite = logmag[np.isfinite(logmag)]
        shift = float(finite.max()) if finite.size else 0.0
    with np.errstate(under="ignore"):
        vals = np.where(sign == 0, 0.0, sign * np.exp(np.where(sign == 0, 0.0, logmag) - shift))
    return vals, shift


def log_surrogate(values: Iterable[np.ndarray], eta: float, untouched_cells: int) -> float:
    """log of sum_cells exp(eta V) + exp(-eta V), where untouched cells each add 2."""
    parts = [np.ravel(eta * v) for v in values]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    terms = np.concatenate([flat, -flat])
    if untouched_cells > 0:
        terms = np.append(terms, np.log(2.0 * untouched_cells))
    if terms.size == 0:
        return -np.inf
    return float(logsumexp(terms))
