"""Locating the query of interest from a contaminated batch of queries.

The defender only sees query points.  Some of them are decoys; the rest are
Gaussian samples around the point the attacker is really interested in.
Estimators here work coordinate by coordinate so the scalar contamination
analysis (:func:`bias_bound`) applies to each coordinate separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from statistics import NormalDist

import numpy as np

MAD_FLOOR = 1e-12
_STD_NORMAL = NormalDist()


@dataclass(frozen=True)
class QOIEstimate:
    point: np.ndarray
    method: str  # "mean" | "median" | "robust"
    iterations: int = 0
    bias_bound: float = 0.0  # worst-case per-coordinate bias, in units of the sampling std


def _as_points(batch) -> np.ndarray:
    pts = np.asarray(batch, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("empty batch")
    return pts


def naive_mean(batch) -> np.ndarray:
    return _as_points(batch).mean(axis=0)


def coordinate_median(batch) -> np.ndarray:
    return np.median(_as_points(batch), axis=0)


def mad(values, axis=0):
    """Median absolute deviation from the median, floored at 1e-12."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty input")
    med = np.median(v, axis=axis, keepdims=True)
    out = np.median(np.abs(v - med), axis=axis)
    return np.maximum(out, MAD_FLOOR)


def psi(x):
    """Influence function (e^x - 1) / (e^x + 1), i.e. tanh(x / 2)."""
    x = np.asarray(x, dtype=float)
    out = np.tanh(0.5 * x)
    return np.where(np.abs(x) > 30.0, np.sign(x), out)


def psi_prime(x):
    t = np.tanh(0.5 * np.asarray(x, dtype=float))
    return 0.5 * (1.0 - t * t)


def _normal_pdf(s):
    return math.exp(-0.5 * s * s) / math.sqrt(2.0 * math.pi)


def adaptive_simpson(fn, a: float, b: float, tol: float = 1e-8, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = fn(lm), fn(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(
            m, b, fm, frm, fb, right, tol / 2, depth - 1
        )

    fa, fb, fm = fn(a), fn(b), fn(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def _gauss_expectation(fn, tol=1e-8):
    # folded onto [0, 10]: odd integrands cancel exactly
    return adaptive_simpson(lambda s: (fn(s) + fn(-s)) * _normal_pdf(s), 0.0, 10.0, tol)


@lru_cache(maxsize=None)
def expected_psi_prime(tol: float = 1e-8) -> float:
    """E[psi'(Z)] for Z standard normal (about 0.4132)."""
    return _gauss_expectation(lambda s: float(psi_prime(s)), tol)


def robust_estimate(batch, k: int = 1, assumed_p_fake: float = 0.4) -> QOIEstimate:
    """Coordinatewise M-estimate of the query of interest.

    Starts from the coordinate median and takes ``k`` rescaled psi-steps with
    the batch MAD as scale.  ``assumed_p_fake`` only feeds the reported
    worst-case bias; the defender never observes the true fraction.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    pts = _as_points(batch)
    est = np.median(pts, axis=0)
    scale = mad(pts, axis=0)
    gain = scale / expected_psi_prime()
    for _ in range(k):
        est = est + gain * psi((pts - est) / scale).mean(axis=0)
    return QOIEstimate(est, "robust" if k else "median", k, bias_bound(assumed_p_fake, k))


def estimate_qoi(batch, method: str, k: int = 1, assumed_p_fake: float = 0.4) -> QOIEstimate:
    if method == "mean":
        return QOIEstimate(naive_mean(batch), "mean")
    if method == "median":
        return QOIEstimate(coordinate_median(batch), "median", 0, bias_bound(assumed_p_fake, 0))
    if method == "robust":
        return robust_estimate(batch, k, assumed_p_fake)
    raise ValueError(f"unknown estimator {method!r}")


def _check_p(p_fake):
    if not 0.0 <= p_fake < 0.5:
        raise ValueError(f"p_fake={p_fake} outside the contamination range [0, 0.5)")


@lru_cache(maxsize=256)
def bias_sequence(p_fake: float, k: int) -> tuple[float, ...]:
    """Worst-case bias bounds B(0), ..., B(k) for contamination ``p_fake``.

    The recursion is evaluated exactly as written, with the decoys placed at
    +infinity (psi = 1).  Values are in units of the clean sampling std.
    """
    _check_p(p_fake)
    if k < 0:
        raise ValueError("k must be >= 0")
    e_prime = expected_psi_prime()
    b = _STD_NORMAL.inv_cdf(1.0 / (2.0 * (1.0 - p_fake)))
    seq = [b]
    for _ in range(k):
        shift = b
        clean = _gauss_expectation(lambda s: float(psi(s - shift)))
        b = b + ((1.0 - p_fake) * clean + p_fake * 1.0) / e_prime
        seq.append(b)
    return tuple(seq)


def bias_bound(p_fake: float, k: int = 1) -> float:
    return bias_sequence(float(p_fake), int(k))[-1]
