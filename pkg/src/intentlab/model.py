"""Small softmax MLPs used as the attacked model.

Everything here is plain numpy.  A :class:`Classifier` is immutable once
built; forward passes, losses and input gradients are pure functions of the
parameters, so one model can be shared freely between concurrent games.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Classifier:
    """Fully connected tanh network with a softmax head.

    ``weights[i]`` has shape ``(widths[i], widths[i + 1])``; inputs are row
    vectors.  ``widths == [d, C]`` gives a plain linear-softmax model.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"bad layer shapes {w.shape} / {b.shape}")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("consecutive layers do not chain")
        for arr in (*self.weights, *self.biases):
            arr.setflags(write=False)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> np.ndarray:
        """Flat parameter vector (weights then bias, layer by layer)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_parameters(cls, widths, flat, domain=(0.0, 1.0)) -> "Classifier":
        flat = np.asarray(flat, dtype=float)
        weights, biases, pos = [], [], 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            weights.append(flat[pos:pos + n_in * n_out].reshape(n_in, n_out).copy())
            pos += n_in * n_out
            biases.append(flat[pos:pos + n_out].copy())
            pos += n_out
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return cls(tuple(weights), tuple(biases), tuple(domain))

    @classmethod
    def zeros(cls, widths, domain=(0.0, 1.0)) -> "Classifier":
        n = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        return cls.from_parameters(widths, np.zeros(n), domain)


def _check_input(model: Classifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {model.dim}")
    return x


def _forward(model, x):
    """Return (hidden activations, logits) for a 2-D batch."""
    hidden = []
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.tanh(h @ w + b)
        hidden.append(h)
    return hidden, h @ model.weights[-1] + model.biases[-1]


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logits(model: Classifier, x) -> np.ndarray:
    x = _check_input(model, x)
    _, z = _forward(model, np.atleast_2d(x))
    return z[0] if x.ndim == 1 else z


def predict_probs(model: Classifier, x) -> np.ndarray:
    """Softmax probabilities for one input ``(d,)`` or a batch ``(n, d)``."""
    return softmax(logits(model, x))


def predict_label(model: Classifier, x):
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(predict_probs(model, x), axis=-1)


def cross_entropy(probs, c) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return -np.log(np.maximum(probs[..., c], PROB_FLOOR))


def loss(model: Classifier, x, c: int) -> float:
    """Cross-entropy of class ``c``: ``-log p_c`` with a 1e-12 floor."""
    return cross_entropy(predict_probs(model, x), c)


def logit_jacobian(model: Classifier, x) -> np.ndarray:
    """d(logits)/dx, shape ``(C, d)``."""
    x = _check_input(model, x)
    if x.ndim != 1:
        raise ValueError("logit_jacobian takes a single input")
    hidden, _ = _forward(model, x[None, :])
    jac = model.weights[0].T
    for h, w in zip(hidden, model.weights[1:]):
        jac = w.T @ ((1.0 - h[0] ** 2)[:, None] * jac)
    return jac


def gradient_matrix(model: Classifier, x) -> np.ndarray:
    """Row ``c`` is the input gradient of ``loss(model, x, c)``."""
    p = predict_probs(model, x)
    jac = logit_jacobian(model, x)
    # d(-log p_c)/dz = p - e_c
    return (p[None, :] - np.eye(model.n_classes)) @ jac


def input_gradient(model: Classifier, x, c: int) -> np.ndarray:
    p = predict_probs(model, x)
    return (p - np.eye(model.n_classes)[c]) @ logit_jacobian(model, x)


def estimate_lipschitz(model: Classifier, center, radius: float, n_samples: int, seed=0) -> float:
    """Empirical Lipschitz constant of the probability map over a box.

    Returns the largest ``||f(x) - f(y)|| / ||x - y||`` over ``n_samples``
    random pairs drawn in ``center +- radius`` (clipped to the domain).  This
    is a lower bound on the true constant.  Pairs are drawn as a prefix of a
    single stream, so increasing ``n_samples`` can only raise the estimate.
    """
    center = _check_input(model, center)
    rng = np.random.default_rng(seed)
    lo, hi = model.domain
    x = np.clip(center + rng.uniform(-radius, radius, size=(n_samples, model.dim)), lo, hi)
    # the partner of each point sits at a random scale, so both local slopes
    # and long-range secants get sampled
    scale = radius * 10.0 ** rng.uniform(-3, 0, size=(n_samples, 1))
    y = np.clip(x + scale * rng.uniform(-1, 1, size=(n_samples, model.dim)), lo, hi)
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 0
    if not ok.any():
        return 0.0
    diff = np.linalg.norm(predict_probs(model, x[ok]) - predict_probs(model, y[ok]), axis=1)
    return float(np.max(diff / dist[ok]))


# ---------------------------------------------------------------------------
# synthetic task + training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Gaussian-blob classification task and network shape."""

    dim: int = 32
    n_classes: int = 10
    samples_per_class: int = 200
    separation: float = 0.25  # distance of blob centres from the box centre
    spread: float = 0.08  # per-coordinate std of each blob
    hidden: int = 64
    epochs: int = 400
    learning_rate: float = 0.01
    test_fraction: float = 0.25


@dataclass
class TrainingResult:
    model: Classifier
    train_accuracy: float
    test_accuracy: float
    x_test: np.ndarray
    y_test: np.ndarray
    converged: bool
    losses: list[float] = field(default_factory=list)


def make_blobs(spec: ToySpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """One isotropic blob per class, centres on a sphere around 0.5*1."""
    dirs = rng.standard_normal((spec.n_classes, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = 0.5 + spec.separation * dirs
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    x = centres[y] + spec.spread * rng.standard_normal((y.size, spec.dim))
    return np.clip(x, 0.0, 1.0), y


def _init_params(widths, rng):
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _backprop(weights, biases, x, y_onehot):
    """Mean cross-entropy and its parameter gradients."""
    acts = [x]
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    p = softmax(h @ weights[-1] + biases[-1])
    n = x.shape[0]
    value = -np.mean(np.log(np.maximum((p * y_onehot).sum(axis=1), PROB_FLOOR)))
    delta = (p - y_onehot) / n
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in reversed(range(len(weights))):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (1.0 - acts[i] ** 2)
    return value, gw, gb


def _split(spec: ToySpec, rng):
    x, y = make_blobs(spec, rng)
    perm = rng.permutation(y.size)
    n_test = int(round(spec.test_fraction * y.size))
    return x, y, perm[n_test:], perm[:n_test]


def toy_test_set(spec: ToySpec = ToySpec(), seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """The held-out points :func:`train_toy_model` uses for the same arguments."""
    x, y, _, test = _split(spec, np.random.default_rng(seed))
    return x[test], y[test]


def train_toy_model(spec: ToySpec = ToySpec(), seed: int = 0) -> TrainingResult:
    """Fit a tanh MLP to Gaussian blobs with full-batch Adam.

    Deterministic for a fixed seed.  Poor accuracy is logged and flagged in
    ``converged`` rather than raised.
    """
    rng = np.random.default_rng(seed)
    x, y, train, test = _split(spec, rng)

    widths = [spec.dim] + ([spec.hidden] if spec.hidden else []) + [spec.n_classes]
    weights, biases = _init_params(widths, rng)
    onehot = np.eye(spec.n_classes)[y[train]]
    params = weights + biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for t in range(1, spec.epochs + 1):
        value, gw, gb = _backprop(weights, biases, x[train], onehot)
        losses.append(float(value))
        for i, g in enumerate(gw + gb):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            step = spec.learning_rate * (m[i] / (1 - b1**t)) / (np.sqrt(v[i] / (1 - b2**t)) + eps)
            params[i] -= step  # in place, shared with weights/biases
    model = Classifier(tuple(w.copy() for w in weights), tuple(b.copy() for b in biases))
    train_acc = float(np.mean(predict_label(model, x[train]) == y[train]))
    test_acc = float(np.mean(predict_label(model, x[test]) == y[test]))
    converged = bool(losses and losses[-1] < losses[0] and train_acc > 1.5 / spec.n_classes)
    if not converged:
        log.warning("training did not converge (train acc %.3f)", train_acc)
    return TrainingResult(model, train_acc, test_acc, x[test], y[test], converged, losses)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MODEL_FORMAT = "intentlab-mlp/1"


def save_model(model: Classifier, path) -> None:
    """Write architecture and flat parameters as JSON text.

    Floats are written with ``repr`` so a load reproduces them bit-for-bit.
    """
    doc = {
        "format": MODEL_FORMAT,
        "widths": model.widths,
        "activation": "tanh",
        "output": "softmax",
        "domain": list(model.domain),
        "parameters": [float(p) for p in model.parameters()],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path) -> Classifier:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not an {MODEL_FORMAT} file")
    return Classifier.from_parameters(doc["widths"], doc["parameters"], tuple(doc["domain"]))
