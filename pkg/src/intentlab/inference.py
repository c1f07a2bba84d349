"""Inferring the attacker's target class from its trajectory.

Consecutive estimates of the query of interest give the step the attacker
took.  A targeted attacker steps against the gradient of its loss for the
target class, so the class whose loss gradient is best aligned with the
reversed step is the most likely target.  Per-iteration evidence is folded
into a running posterior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Classifier, gradient_matrix, softmax

SIGNS = ("descent", "verbatim")
SCORE_NORMS = ("standardize", "none")


@dataclass(frozen=True)
class IntentPosterior:
    probabilities: np.ndarray
    iterations_observed: int = 0
    confident: bool = False
    inferred_class: Optional[int] = None

    @classmethod
    def uniform(cls, n_classes: int) -> "IntentPosterior":
        return cls(np.full(n_classes, 1.0 / n_classes))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probabilities))


@dataclass(frozen=True)
class Direction:
    vector: np.ndarray
    degenerate: bool


def descent_direction(x_prev, x_next) -> Direction:
    a = np.asarray(getattr(x_prev, "point", x_prev), dtype=float)
    b = np.asarray(getattr(x_next, "point", x_next), dtype=float)
    if a.shape != b.shape:
        raise ValueError("estimates differ in dimension")
    v = b - a
    return Direction(v, not np.any(v))


def class_scores(direction, grads, sign: str = "descent") -> np.ndarray:
    """Cosine between the (reversed) step and every class gradient.

    With ``sign="descent"`` the step is negated first, so a step straight
    down the target's loss scores 1.  Zero gradient rows score 0.
    """
    v = np.asarray(getattr(direction, "vector", direction), dtype=float)
    if sign not in SIGNS:
        raise ValueError(f"unknown sign convention {sign!r}")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("zero direction")
    if sign == "descent":
        v = -v
    g = np.atleast_2d(np.asarray(grads, dtype=float))
    row_norms = np.linalg.norm(g, axis=1)
    safe = np.where(row_norms > 0, row_norms, 1.0)
    scores = (g @ v) / (safe * norm)
    return np.clip(np.where(row_norms > 0, scores, 0.0), -1.0, 1.0)


def normalize_scores(scores, mode: str = "standardize") -> np.ndarray:
    """Put scores on a common scale before the softmax.

    ``standardize`` centres the scores and divides by their spread across
    classes; identical scores map to all zeros.
    """
    s = np.asarray(scores, dtype=float)
    if mode == "none":
        return s
    if mode != "standardize":
        raise ValueError(f"unknown score normalization {mode!r}")
    centred = s - s.mean()
    spread = centred.std()
    return centred / spread if spread > 1e-12 else np.zeros_like(s)


def update_posterior(posterior: IntentPosterior, scores, kappa: float,
                     normalize: str = "standardize") -> IntentPosterior:
    p = posterior.probabilities * softmax(normalize_scores(scores, normalize))
    p = p / p.sum()
    confident = bool(p.max() >= kappa)
    return IntentPosterior(p, posterior.iterations_observed + 1, confident,
                           int(np.argmax(p)) if confident else None)


@dataclass(frozen=True)
class InferenceResult:
    inferred_class: Optional[int]  # None when undetermined
    posterior: IntentPosterior
    stopped_at: Optional[int] = None  # index of the step that crossed kappa

    @property
    def undetermined(self) -> bool:
        return self.inferred_class is None


def passive_infer(qoi_sequence, model: Classifier, kappa: float = 0.6, sign: str = "descent",
                  normalize: str = "standardize", grad_fn=None) -> InferenceResult:
    """Score every consecutive pair of estimates and stop once confident.

    ``grad_fn(x)`` returns the per-class gradient matrix used for scoring;
    the model's true gradients by default.
    """
    seq = list(qoi_sequence)
    if len(seq) < 2:
        raise ValueError("need at least 2 estimates")
    grad_fn = grad_fn or (lambda x: gradient_matrix(model, x))
    post = IntentPosterior.uniform(model.n_classes)
    used = 0
    for i in range(len(seq) - 1):
        step = descent_direction(seq[i], seq[i + 1])
        if step.degenerate:
            continue
        x = np.asarray(getattr(seq[i], "point", seq[i]), dtype=float)
        post = update_posterior(post, class_scores(step, grad_fn(x), sign), kappa, normalize)
        used += 1
        if post.confident:
            return InferenceResult(post.inferred_class, post, i + 1)
    if used == 0:
        return InferenceResult(None, post)
    return InferenceResult(post.argmax, post)
