"""Answering queries from a first-order model around the estimated QOI.

Instead of the true probabilities the defender returns
``f(x~) + J (x - x~)``, a linearisation at its estimate ``x~`` of the
attacker's query of interest.  The slope ``J`` is built from a per-class
gradient matrix that is pulled towards mutually orthogonal directions, so
each target class leaves a more distinctive footprint in the attacker's
steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Classifier, estimate_lipschitz, predict_probs

SCALINGS = ("match", "raw")


@dataclass(frozen=True)
class SolicitationConfig:
    mu: float = 0.3
    seed: Optional[int] = None  # permutation seed; None keeps the plain cyclic pattern
    scaling: str = "match"

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu={self.mu} must lie in [0, 1]")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}")


@dataclass(frozen=True)
class DispersionMatrix:
    matrix: np.ndarray  # (C, d) with 0/1 entries, one nonzero per column
    seed: Optional[int] = None


def build_dispersion_matrix(n_classes: int, d: int, seed=None) -> DispersionMatrix:
    """Coordinate ``j`` goes to class ``perm_b[j mod C]`` where ``b = j // C``.

    Every block of ``C`` consecutive coordinates gets its own permutation of
    the classes (the identity for ``seed=None``), so rows never overlap.
    """
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if d < n_classes:
        raise ValueError(f"d={d} smaller than the number of classes {n_classes}")
    rng = np.random.default_rng(seed) if seed is not None else None
    m = np.zeros((n_classes, d))
    for start in range(0, d, n_classes):
        perm = rng.permutation(n_classes) if rng is not None else np.arange(n_classes)
        for offset in range(min(n_classes, d - start)):
            m[perm[offset], start + offset] = 1.0
    m.flags.writeable = False
    return DispersionMatrix(m, seed)


def mixed_gradient_matrix(true_grads, dispersion, mu: float, scaling: str = "match") -> np.ndarray:
    """``(1 - mu) g + mu M``.

    With ``scaling="match"`` each row of ``M`` is first rescaled to the norm
    of the matching gradient row, so ``mu`` only trades direction.
    """
    g = np.asarray(true_grads, dtype=float)
    m = np.asarray(getattr(dispersion, "matrix", dispersion), dtype=float)
    if g.shape != m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match dispersion shape {m.shape}")
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    if scaling == "match":
        m = m * (np.linalg.norm(g, axis=1) / np.linalg.norm(m, axis=1))[:, None]
    elif scaling != "raw":
        raise ValueError(f"unknown scaling {scaling!r}")
    if mu == 0.0:
        return g.copy()
    if mu == 1.0:
        return m
    return (1.0 - mu) * g + mu * m


def mean_abs_row_cosine(g) -> float:
    """Average |cosine| over all pairs of distinct rows."""
    g = np.asarray(g, dtype=float)
    unit = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    cos = unit @ unit.T
    iu = np.triu_indices(len(g), 1)
    return float(np.abs(cos[iu]).mean())


def answer_jacobian(probs_at_qoi, G) -> np.ndarray:
    """Slope of the answered probabilities.

    ``G`` holds loss gradients (of ``-log p_c``), and ``grad p_c =
    -p_c grad(-log p_c)``, so with the true gradients this is exactly the
    probability Jacobian.
    """
    p = np.asarray(probs_at_qoi, dtype=float)
    return -p[:, None] * np.asarray(G, dtype=float)


def sanitize(raw) -> np.ndarray:
    """Clamp to [0, 1] and renormalise each row onto the simplex."""
    a = np.clip(np.asarray(raw, dtype=float), 0.0, 1.0)
    total = a.sum(axis=-1, keepdims=True)
    flat = np.full_like(a, 1.0 / a.shape[-1])
    return np.where(total > 0, a / np.where(total > 0, total, 1.0), flat)


def synthesize_answer(x_query, qoi_estimate, G, model: Classifier, raw: bool = False) -> np.ndarray:
    """First-order answers for one query ``(d,)`` or a batch ``(n, d)``.

    Queries equal to the estimate get ``predict_probs(model, x~)`` back
    unchanged.
    """
    x = np.asarray(x_query, dtype=float)
    centre = np.asarray(getattr(qoi_estimate, "point", qoi_estimate), dtype=float)
    f0 = predict_probs(model, centre)
    jac = answer_jacobian(f0, G)
    pts = np.atleast_2d(x)
    delta = pts - centre
    out = f0 + delta @ jac.T
    if not raw:
        out = sanitize(out)
    # exact zeroth-order value at the estimate, untouched by rounding
    out[~np.any(delta, axis=1)] = f0
    return out[0] if x.ndim == 1 else out


def check_gaussian_projection(v, n_samples: int = 100_000, seed=0) -> float:
    """Relative error of the Monte Carlo mean of ``(v.u) u`` against ``v``."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("v must be nonzero")
    u = np.random.default_rng(seed).standard_normal((n_samples, v.size))
    est = ((u @ v)[:, None] * u).mean(axis=0)
    return float(np.linalg.norm(est - v) / np.linalg.norm(v))


@dataclass(frozen=True)
class BoundCheck:
    violation_rate: float
    lipschitz: float
    jacobian_norm: float
    max_ratio: float  # largest error / bound over the samples


def check_answer_error_bound(model: Classifier, qoi_estimate, G, sigma: float, n_samples: int = 10_000,
                 bias: float = 0.0, seed=0, lipschitz: Optional[float] = None,
                 slack: float = 1.0) -> BoundCheck:
    """Share of queries whose raw first-order answer strays past the bound.

    The attacker's real QOI sits ``sigma * bias`` away from the estimate in
    a random direction; queries are ``x + sigma u``.  The bound is
    ``(K + ||J||)(sigma ||u|| + sigma * bias)`` with ``J`` the answer slope
    (spectral norm) and ``K`` an empirical Lipschitz constant.  ``slack``
    multiplies the right-hand side.
    """
    rng = np.random.default_rng(seed)
    centre = np.asarray(getattr(qoi_estimate, "point", qoi_estimate), dtype=float)
    d = centre.size
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    qoi = centre + sigma * bias * w
    u = rng.standard_normal((n_samples, d))
    x = qoi + sigma * u
    if lipschitz is None:
        radius = sigma * (bias + math.sqrt(d) + 6.0)
        lipschitz = estimate_lipschitz(model, centre, radius, 20_000, seed=rng.integers(2**32))
    f0 = predict_probs(model, centre)
    jnorm = float(np.linalg.norm(answer_jacobian(f0, G), 2))
    err = np.linalg.norm(synthesize_answer(x, centre, G, model, raw=True) - predict_probs(model, x), axis=1)
    bound = slack * (lipschitz + jnorm) * (sigma * np.linalg.norm(u, axis=1) + sigma * bias)
    ratio = np.where(bound > 0, err / np.where(bound > 0, bound, 1.0), np.where(err > 0, np.inf, 0.0))
    return BoundCheck(float(np.mean(err > bound)), float(lipschitz), jnorm, float(ratio.max()))

