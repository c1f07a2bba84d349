"""Query-based black-box attacker.

The attacker runs projected sign-gradient descent on the target-class
cross-entropy, estimating each gradient from oracle answers at Gaussian
perturbations of the current iterate (its query of interest, QOI).  An
adaptive attacker mixes decoy queries into every batch.

:class:`Attacker` is a small state machine: ``next_request()`` hands out the
next batch of points, ``receive(answers)`` consumes the oracle's probability
vectors.  :func:`run_attack` drives it against a plain oracle; the CTF
harness drives it against a defender.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import Classifier, cross_entropy, input_gradient, predict_label, predict_probs

ESTIMATORS = ("nes", "nes_antithetic", "signsgd", "hessaware")
FAKE_STRATEGIES = ("none", "uniform", "blind", "duplicate")

# roles of the points in a batch; fakes are the only ones the attacker ignores
QOI, PLUS, MINUS, SAMPLE, PRECOND, SPARE, FAKE = range(7)


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.01
    epsilon: float = 0.03
    n_iter: int = 10
    n_query: int = 100
    sigma: float = 0.001
    p_fake: float = 0.5
    tau: float = 1.0
    estimator: str = "signsgd"
    fake_strategy: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.n_query < 2:
            raise ValueError("n_query must be >= 2")
        if not 0.0 <= self.p_fake < 1.0:
            raise ValueError(f"p_fake={self.p_fake} must lie in [0, 1)")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; pick from {ESTIMATORS}")
        if self.fake_strategy not in FAKE_STRATEGIES:
            raise ValueError(f"unknown fake strategy {self.fake_strategy!r}")
        if self.fake_strategy == "none" and self.p_fake > 0:
            raise ValueError("fake_strategy 'none' requires p_fake = 0")
        if self.n_true < 2:
            raise ValueError("fewer than 2 true queries per iteration")

    @property
    def n_true(self) -> int:
        # round first: (1 - 0.9) * 100 is 9.999...
        return int(math.floor(round((1.0 - self.p_fake) * self.n_query, 9)))

    @property
    def n_fake(self) -> int:
        return self.n_query - self.n_true

    @property
    def adaptive(self) -> bool:
        return self.n_fake > 0


@dataclass(frozen=True)
class Query:
    point: np.ndarray
    is_fake: bool
    answer: Optional[np.ndarray] = None


@dataclass
class QueryBatch:
    """One request sent to the oracle.

    ``roles`` and ``directions`` are private to the attacker (and to the
    evaluation harness); a defender only gets ``points``.
    """

    iteration: int
    points: np.ndarray
    roles: np.ndarray
    directions: np.ndarray  # unit-free perturbation u for each true query, zeros elsewhere
    qoi_truth: np.ndarray
    answers: Optional[np.ndarray] = None

    def __len__(self):
        return self.points.shape[0]

    @property
    def is_fake(self) -> np.ndarray:
        return self.roles == FAKE

    @property
    def queries(self) -> list[Query]:
        answers = self.answers if self.answers is not None else [None] * len(self)
        return [Query(p, bool(f), a) for p, f, a in zip(self.points, self.is_fake, answers)]


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    estimator: str
    n_true: int


# ---------------------------------------------------------------------------
# estimators (pure array maths; ``values`` are scalar objective values)
# ---------------------------------------------------------------------------


def nes_estimate(values, u, sigma) -> np.ndarray:
    """Plain NES: mean of f(x + sigma u) u / sigma."""
    values, u = np.asarray(values, float), np.asarray(u, float)
    return values @ u / (sigma * len(values))


def nes_antithetic_estimate(values_plus, values_minus, u, sigma) -> np.ndarray:
    """Antithetic NES over pairs x +- sigma u."""
    diff = np.asarray(values_plus, float) - np.asarray(values_minus, float)
    return diff @ np.asarray(u, float) / (2.0 * sigma * len(diff))


def signsgd_estimate(values, u, value_at_qoi, sigma) -> np.ndarray:
    """One-sided estimator: NES with f(x) subtracted from every sample."""
    values = np.asarray(values, float) - value_at_qoi
    return values @ np.asarray(u, float) / (sigma * len(values))


class HessianError(np.linalg.LinAlgError):
    pass


def hessian_estimate(values_plus, values_minus, value_at_qoi, u, sigma, tau) -> np.ndarray:
    """Second-difference curvature estimate plus ``tau * I``.

    Raises :class:`HessianError` if the matrix is still not positive definite
    after growing ``tau`` tenfold three times.
    """
    u = np.asarray(u, float)
    curv = np.abs(np.asarray(values_plus, float) + np.asarray(values_minus, float) - 2.0 * value_at_qoi)
    h = (u * curv[:, None]).T @ u / (2.0 * sigma**2 * len(curv))
    h = 0.5 * (h + h.T)
    eye = np.eye(u.shape[1])
    for attempt in range(4):
        reg = h + tau * 10.0**attempt * eye
        try:
            np.linalg.cholesky(reg)
            return reg
        except np.linalg.LinAlgError:
            continue
    raise HessianError("Hessian estimate not positive definite after regularisation")


def inverse_sqrt_factor(h) -> np.ndarray:
    """``P = L^-T`` for ``h = L L^T``, so ``P P^T = h^-1``."""
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise HessianError(str(exc)) from exc
    return np.linalg.inv(chol).T


def hessaware_estimate(values, z, value_at_qoi, sigma) -> np.ndarray:
    """Preconditioned one-sided estimate; ``z = P u`` are the sampled directions."""
    return signsgd_estimate(values, z, value_at_qoi, sigma)


def estimate_gradient(objective: Callable, x, config: AttackConfig, rng, n_samples=None, hessian=None):
    """Sample and estimate the gradient of a scalar ``objective`` at ``x``.

    Convenience for checking the estimators against known functions;
    ``objective`` maps an ``(n, d)`` array to ``n`` values.  All
    ``n_samples`` (default ``config.n_true``) are true queries.
    """
    x = np.asarray(x, float)
    n = n_samples or config.n_true
    sigma = config.sigma
    est = config.estimator
    if est == "nes":
        u = rng.standard_normal((n, x.size))
        return GradientEstimate(nes_estimate(objective(x + sigma * u), u, sigma), est, n)
    if est == "signsgd":
        u = rng.standard_normal((n, x.size))
        f0 = objective(x[None, :])[0]
        return GradientEstimate(signsgd_estimate(objective(x + sigma * u), u, f0, sigma), est, n)
    if est == "nes_antithetic":
        u = rng.standard_normal((n // 2, x.size))
        g = nes_antithetic_estimate(objective(x + sigma * u), objective(x - sigma * u), u, sigma)
        return GradientEstimate(g, est, 2 * (n // 2))
    # hessaware: half the budget on curvature, half on the preconditioned step
    f0 = objective(x[None, :])[0]
    if hessian is None:
        u = rng.standard_normal((max(n // 4, 1), x.size))
        hessian = hessian_estimate(objective(x + sigma * u), objective(x - sigma * u), f0, u, sigma, config.tau)
    z = rng.standard_normal((n - n // 2, x.size)) @ inverse_sqrt_factor(hessian).T
    return GradientEstimate(hessaware_estimate(objective(x + sigma * z), z, f0, sigma), est, n)


# ---------------------------------------------------------------------------
# batches and decoys
# ---------------------------------------------------------------------------


def generate_fake_queries(x_qoi, count, strategy, rng, sigma=0.001, domain=(0.0, 1.0), history=None):
    """Decoy query points.

    ``uniform`` draws from the domain box, ``blind`` offsets the QOI by up to
    ``10 sigma sqrt(d)`` per coordinate, ``duplicate`` replays true queries
    from earlier iterations (``history``), falling back to ``uniform`` when
    there is nothing to replay yet.
    """
    x_qoi = np.asarray(x_qoi, float)
    d = x_qoi.size
    lo, hi = domain
    if count <= 0:
        return np.empty((0, d))
    if strategy == "duplicate" and history is not None and len(history):
        history = np.asarray(history, float)
        return history[rng.integers(0, len(history), size=count)].copy()
    if strategy in ("uniform", "duplicate"):
        return rng.uniform(lo, hi, size=(count, d))
    if strategy == "blind":
        half_width = 10.0 * sigma * math.sqrt(d)
        return np.clip(x_qoi + rng.uniform(-half_width, half_width, size=(count, d)), lo, hi)
    raise ValueError(f"no decoys for strategy {strategy!r}")


def _assemble(iteration, x, parts, rng, domain):
    points = np.concatenate([p for p, _, _ in parts])
    roles = np.concatenate([np.full(len(p), r) for p, r, _ in parts])
    dirs = np.concatenate([u for _, _, u in parts])
    order = rng.permutation(len(points))  # position carries no signal
    lo, hi = domain
    return QueryBatch(iteration, np.clip(points[order], lo, hi), roles[order], dirs[order], x.copy())


def sample_batch(x, config: AttackConfig, rng, fake_rng=None, iteration=1, history=None,
                 domain=(0.0, 1.0), n_true=None, n_fake=None, include_qoi=True):
    """Build one shuffled batch around ``x``: the QOI itself, the true
    Gaussian samples and the decoys.

    Antithetic estimators (``nes_antithetic`` and the curvature phase of
    ``hessaware``) get their true samples as +-u pairs.
    """
    x = np.asarray(x, float)
    d = x.size
    fake_rng = fake_rng if fake_rng is not None else rng
    n_true = config.n_true if n_true is None else n_true
    n_fake = config.n_fake if n_fake is None else n_fake
    s = config.sigma
    zeros = lambda n: np.zeros((n, d))
    parts = []
    if include_qoi:
        parts.append((x[None, :], QOI, zeros(1)))
    if config.estimator in ("nes_antithetic", "hessaware"):
        u = rng.standard_normal((n_true // 2, d))
        parts += [(x + s * u, PLUS, u), (x - s * u, MINUS, u)]
        if n_true % 2:
            u1 = rng.standard_normal((1, d))
            parts.append((x + s * u1, SPARE, u1))
    else:
        u = rng.standard_normal((n_true, d))
        parts.append((x + s * u, SAMPLE, u))
    fakes = generate_fake_queries(x, n_fake, config.fake_strategy, fake_rng, s, domain, history)
    parts.append((fakes, FAKE, zeros(len(fakes))))
    return _assemble(iteration, x, parts, rng, domain)


def sample_precond_batch(x, precond, n_true, n_fake, config, rng, fake_rng, iteration, history, domain):
    """Second HessAware request: samples along ``P u``."""
    x = np.asarray(x, float)
    z = rng.standard_normal((n_true, x.size)) @ precond.T
    fakes = generate_fake_queries(x, n_fake, config.fake_strategy, fake_rng, config.sigma, domain, history)
    parts = [(x + config.sigma * z, PRECOND, z), (fakes, FAKE, np.zeros_like(fakes))]
    return _assemble(iteration, x, parts, rng, domain)


def pgd_step(x_current, estimate, x_origin, alpha, epsilon, domain=(0.0, 1.0)) -> np.ndarray:
    """Signed descent step projected onto the eps-ball and the domain box."""
    x_origin = np.asarray(x_origin, float)
    x = np.asarray(x_current, float) - alpha * np.sign(estimate)
    x = np.clip(x, x_origin - epsilon, x_origin + epsilon)
    return np.clip(x, *domain)


# ---------------------------------------------------------------------------
# the attack loop
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    qoi: np.ndarray
    estimate: Optional[np.ndarray] = None
    success: bool = False
    queries: int = 0  # cumulative, including this iteration's requests
    batches: list = field(default_factory=list)

    @property
    def estimate_norm(self) -> float:
        return float(np.linalg.norm(self.estimate)) if self.estimate is not None else 0.0


class Attacker:
    """Step-wise black-box attack (one run).

    ``gradient_fn`` switches on the white-box ablation: the estimate is
    replaced by the true gradient and only the QOI/success queries are sent.
    """

    def __init__(self, x_origin, target, config: AttackConfig, seed=None, domain=(0.0, 1.0),
                 gradient_fn=None, stop_on_success=True):
        self.x_origin = np.asarray(x_origin, float).copy()
        self.x = self.x_origin.copy()
        self.target = int(target)
        self.config = config
        self.domain = tuple(domain)
        self.gradient_fn = gradient_fn
        self.stop_on_success = stop_on_success
        ss = np.random.SeedSequence(config.seed if seed is None else seed)
        sample_seq, fake_seq = ss.spawn(2)
        self.rng = np.random.default_rng(sample_seq)
        self.fake_rng = np.random.default_rng(fake_seq)
        self.iteration = 1
        self.records: list[IterationRecord] = []
        self.queries = 0
        self.done = config.n_iter == 0
        self.success = False
        self.success_iteration: Optional[int] = None
        self.success_queries: Optional[int] = None
        self.last_label: Optional[int] = None
        self._history: list[np.ndarray] = []
        self._pending: Optional[QueryBatch] = None
        self._phase = 0
        self._phase1: Optional[QueryBatch] = None

    # -- request side ------------------------------------------------------

    def _history_array(self):
        return np.concatenate(self._history) if self._history else None

    def next_request(self) -> Optional[QueryBatch]:
        if self.done:
            return None
        if self._pending is not None:
            raise RuntimeError("previous request not answered yet")
        cfg, i = self.config, self.iteration
        if i > cfg.n_iter:
            # lone success check after the last step
            batch = QueryBatch(i, self.x[None, :].copy(), np.array([QOI]), np.zeros((1, self.x.size)),
                               self.x.copy())
        elif self.gradient_fn is not None:
            batch = QueryBatch(i, self.x[None, :].copy(), np.array([QOI]), np.zeros((1, self.x.size)),
                               self.x.copy())
        elif cfg.estimator == "hessaware" and self._phase == 1:
            n_curv = 2 * (cfg.n_true // 4)
            precond = inverse_sqrt_factor(self._hessian)
            batch = sample_precond_batch(self.x, precond, cfg.n_true - n_curv, cfg.n_fake - cfg.n_fake // 2,
                                         cfg, self.rng, self.fake_rng, i, self._history_array(), self.domain)
        elif cfg.estimator == "hessaware":
            batch = sample_batch(self.x, cfg, self.rng, self.fake_rng, i, self._history_array(), self.domain,
                                 n_true=2 * (cfg.n_true // 4), n_fake=cfg.n_fake // 2)
        else:
            batch = sample_batch(self.x, cfg, self.rng, self.fake_rng, i, self._history_array(), self.domain)
        self._pending = batch
        return batch

    # -- answer side -------------------------------------------------------

    def _values(self, batch, role):
        return cross_entropy(batch.answers[batch.roles == role], self.target)

    def receive(self, answers) -> None:
        batch = self._pending
        if batch is None:
            raise RuntimeError("no outstanding request")
        answers = np.asarray(answers, float)
        if answers.shape[0] != len(batch):
            raise ValueError("one answer per query required")
        batch.answers = answers
        self._pending = None
        self.queries += len(batch)
        cfg = self.config

        qoi_rows = np.flatnonzero(batch.roles == QOI)
        if qoi_rows.size:
            self._qoi_value = float(cross_entropy(answers[qoi_rows[0]], self.target))
            self.last_label = int(np.argmax(answers[qoi_rows[0]]))
            if self.records:
                prev = self.records[-1]
                prev.queries = self.queries
                inside = np.max(np.abs(self.x - self.x_origin)) <= cfg.epsilon + 1e-12
                if self.last_label == self.target and inside:
                    prev.success = True
                    if not self.success:
                        self.success = True
                        self.success_iteration = prev.iteration
                        self.success_queries = self.queries
                    if self.stop_on_success:
                        self.done = True
                        return
            if self.iteration > cfg.n_iter:
                self.done = True
                return
            self.records.append(IterationRecord(self.iteration, self.x.copy()))
        rec = self.records[-1]
        rec.batches.append(batch)
        rec.queries = self.queries

        if self.gradient_fn is not None:
            self._finish_iteration(np.asarray(self.gradient_fn(self.x), float))
            return
        if cfg.estimator == "hessaware" and self._phase == 0:
            u = batch.directions[batch.roles == PLUS]
            self._hessian = hessian_estimate(self._values(batch, PLUS), self._values(batch, MINUS),
                                             self._qoi_value, u, cfg.sigma, cfg.tau)
            self._phase = 1
            self._remember(batch)
            return
        self._remember(batch)
        self._finish_iteration(self._estimate(batch))

    def _remember(self, batch):
        true = (batch.roles != FAKE) & (batch.roles != QOI)
        self._history.append(batch.points[true])

    def _estimate(self, batch) -> np.ndarray:
        cfg = self.config
        if cfg.estimator == "nes":
            return nes_estimate(self._values(batch, SAMPLE), batch.directions[batch.roles == SAMPLE], cfg.sigma)
        if cfg.estimator == "signsgd":
            return signsgd_estimate(self._values(batch, SAMPLE), batch.directions[batch.roles == SAMPLE],
                                    self._qoi_value, cfg.sigma)
        if cfg.estimator == "nes_antithetic":
            return nes_antithetic_estimate(self._values(batch, PLUS), self._values(batch, MINUS),
                                           batch.directions[batch.roles == PLUS], cfg.sigma)
        z = batch.directions[batch.roles == PRECOND]
        return hessaware_estimate(self._values(batch, PRECOND), z, self._qoi_value, cfg.sigma)

    def _finish_iteration(self, estimate):
        rec = self.records[-1]
        rec.estimate = estimate
        self.x = pgd_step(self.x, estimate, self.x_origin, self.config.alpha, self.config.epsilon, self.domain)
        self.iteration += 1
        self._phase = 0


@dataclass
class AttackTrace:
    records: list[IterationRecord]
    success: bool
    success_iteration: Optional[int]
    total_queries: int
    final_point: np.ndarray

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "iteration": r.iteration,
                "qoi": [float(v) for v in r.qoi],
                "estimate_norm": r.estimate_norm,
                "success": r.success,
                "queries": r.queries,
            }))
        return "\n".join(lines) + ("\n" if lines else "")


def as_oracle(model_or_oracle) -> Callable:
    if isinstance(model_or_oracle, Classifier):
        return lambda pts: predict_probs(model_or_oracle, pts)
    return model_or_oracle


def run_attack(oracle, x_origin, c_target, config: AttackConfig, seed=None, domain=(0.0, 1.0),
               gradient_fn=None) -> AttackTrace:
    """Run one attack to success or ``config.n_iter`` iterations.

    ``oracle`` is a :class:`Classifier` or any callable mapping an ``(n, d)``
    array of points to ``(n, C)`` probability vectors.
    """
    if isinstance(oracle, Classifier):
        label = int(np.argmax(predict_probs(oracle, x_origin)))
        if label == c_target:
            raise ValueError("target class already predicted at the origin")
        domain = oracle.domain
    answer = as_oracle(oracle)
    atk = Attacker(x_origin, c_target, config, seed=seed, domain=domain, gradient_fn=gradient_fn)
    while (req := atk.next_request()) is not None:
        atk.receive(answer(req.points))
    return AttackTrace(atk.records, atk.success, atk.success_iteration, atk.queries, atk.x.copy())


def white_box_pgd(model: Classifier, x_origin, c_target, alpha, epsilon, n_iter):
    """Reference PGD with exact gradients; returns the success iteration or None."""
    x_origin = np.asarray(x_origin, float)
    x = x_origin.copy()
    for i in range(1, n_iter + 1):
        x = pgd_step(x, input_gradient(model, x, c_target), x_origin, alpha, epsilon, model.domain)
        if predict_label(model, x) == c_target:
            return i
    return None


def config_dict(config: AttackConfig) -> dict:
    return asdict(config)
