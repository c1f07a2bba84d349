"""Splitting the defender's query stream into per-iteration batches.

Queries arrive in time order.  Each attack iteration produces a tight
cluster (radius ~ sigma sqrt(d)) and consecutive clusters sit a step of
size ~ alpha sqrt(d) apart, so a chronological scan with a distance
threshold separates them.  Decoys are far from everything and never form a
cluster of their own, which is what the confirmation rule relies on.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


def segment_stream(stream, sigma_hint: float, threshold_multiplier: float = 6.0, confirm: int = 3):
    """Greedy chronological segmentation.

    Returns a list of index arrays, one per batch, covering the stream in
    order.  A query within ``threshold_multiplier * sigma_hint * sqrt(d)`` of
    the current batch centre (coordinate median of its inliers) joins the
    batch.  Far queries are held as candidates; once ``confirm`` candidates
    lie within the threshold of each other, away from every earlier batch
    centre, a new batch starts at the first of them.  Isolated far queries
    stay with the batch they arrived in.
    """
    pts = np.asarray(stream, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("stream must be a non-empty (n, d) array")
    if sigma_hint <= 0:
        raise ValueError("sigma_hint must be > 0")
    thr = threshold_multiplier * sigma_hint * math.sqrt(pts.shape[1])
    starts = [0]
    old_centres: list[np.ndarray] = []
    centre = None
    inliers: list[int] = []
    pending: list[int] = []
    last_inlier = -1

    for i in range(len(pts)):
        p = pts[i]
        if centre is not None and np.linalg.norm(p - centre) <= thr:
            inliers.append(i)
            last_inlier = i
            centre = np.median(pts[inliers], axis=0)
            continue
        pending.append(i)
        pend = np.asarray(pending)
        near = pend[np.linalg.norm(pts[pend] - p, axis=1) <= thr].tolist()
        if len(near) < confirm:
            continue
        cand = np.median(pts[near], axis=0)
        if any(np.linalg.norm(cand - c) <= thr for c in old_centres):
            continue  # replayed queries from an earlier iteration
        if centre is None:
            # first cluster of the current batch
            centre, inliers = cand, near
            last_inlier = max(near)
            pending = [j for j in pending if j not in near]
            continue
        start = min(j for j in near if j > last_inlier)
        old_centres.append(centre)
        starts.append(start)
        inliers = [j for j in near if j >= start]
        centre = np.median(pts[inliers], axis=0)
        last_inlier = max(inliers)
        pending = [j for j in pending if j >= start and j not in inliers]

    bounds = starts + [len(pts)]
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def labels_from_segments(segments, n: int) -> np.ndarray:
    labels = np.empty(n, dtype=int)
    for k, idx in enumerate(segments):
        labels[idx] = k
    return labels


def assignment_accuracy(pred_labels, true_labels) -> float:
    """Share of queries whose predicted batch maps to their true batch
    under the best one-to-one matching of batches."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    _, p_inv = np.unique(pred, return_inverse=True)
    _, t_inv = np.unique(true, return_inverse=True)
    table = np.zeros((p_inv.max() + 1, t_inv.max() + 1))
    np.add.at(table, (p_inv, t_inv), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(true))


def ssw_ssb_ratio(points, labels) -> float:
    """Within-batch over between-batch sum of squares."""
    pts = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ValueError("need at least 2 batches")
    grand = pts.mean(axis=0)
    ssw = ssb = 0.0
    for g in groups:
        members = pts[labels == g]
        mu = members.mean(axis=0)
        ssw += float(((members - mu) ** 2).sum())
        ssb += len(members) * float(((mu - grand) ** 2).sum())
    return ssw / ssb


def estimate_s_constant(d: int, n_samples: int = 100_000, seed=0, g=None) -> float:
    """Monte Carlo E||<g,u> u||^2 / ||g||^2 for u ~ N(0, I_d).

    The exact value is d + 2 for every nonzero g: E[u_i^4] = 3 contributes
    once and the d - 1 cross terms E[u_i^2 u_j^2] = 1 the rest.  The looser
    d + 3 is an upper bound.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    if g is None:
        g = rng.standard_normal(d)
    g = np.asarray(g, dtype=float)
    u = rng.standard_normal((n_samples, d))
    proj = u @ g
    sq = proj**2 * (u**2).sum(axis=1)
    return float(sq.mean() / (g @ g))


def synthetic_stream(n_iter=10, dim=32, sigma=0.001, alpha=0.01, n_query=100, p_fake=0.0,
                     fake_strategy="uniform", seed=0, start=None):
    """Query stream of an idealised sign-descent attack.

    Every iteration moves the centre by ``alpha * sign(g)`` for a fresh
    random ``g`` and issues ``n_query`` queries (true Gaussian samples plus a
    ``p_fake`` share of decoys) in random order.  Returns ``(points,
    iteration_labels, is_fake, centres)``.
    """
    from .attack import generate_fake_queries

    rng = np.random.default_rng(seed)
    x = np.full(dim, 0.5) if start is None else np.asarray(start, float).copy()
    n_true = int(math.floor(round((1.0 - p_fake) * n_query, 9)))
    pts, labels, fake, centres, history = [], [], [], [], []
    for i in range(n_iter):
        true = x + sigma * rng.standard_normal((n_true, dim))
        decoys = generate_fake_queries(x, n_query - n_true, fake_strategy, rng, sigma,
                                       history=np.concatenate(history) if history else None)
        batch = np.concatenate([true, decoys])
        is_fake = np.r_[np.zeros(n_true, bool), np.ones(len(decoys), bool)]
        order = rng.permutation(len(batch))
        pts.append(batch[order])
        fake.append(is_fake[order])
        labels.append(np.full(len(batch), i))
        centres.append(x.copy())
        history.append(true)
        x = x - alpha * np.sign(rng.standard_normal(dim))
    return np.concatenate(pts), np.concatenate(labels), np.concatenate(fake), np.array(centres)


def write_stream(points, path) -> None:
    """One query per line, coordinates separated by spaces."""
    with open(path, "w") as fh:
        for p in np.asarray(points, dtype=float):
            fh.write(" ".join(repr(float(v)) for v in p) + "\n")


def read_stream(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=float)
