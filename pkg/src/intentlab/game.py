"""Capture-the-flag games between an attacker and a defender.

Each game picks an origin from the toy test set and a target class other
than its predicted label.  The attacker runs its black-box attack through
the defender, which sees only query points.  The defender estimates each
batch's query of interest, answers (truthfully or with synthesized first-order
answers) and updates its belief about the target.

Timing: at iteration ``t`` the attacker queries around its ``t``-th point
and steps to the next one; its win at ``t`` means that step landed on an
adversarial input.  A defender claim made on receiving the ``t``-th batch
(so from ``t - 1`` observed steps) counts for iteration ``t``.  The claim
precedes the check of step ``t``, which travels with batch ``t + 1``, so
ties go to the defender.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .attack import QOI, AttackConfig, Attacker
from .estimation import estimate_qoi
from .inference import (SCORE_NORMS, SIGNS, IntentPosterior, class_scores, descent_direction,
                        update_posterior)
from .model import Classifier, ToySpec, gradient_matrix, predict_label, predict_probs, train_toy_model
from .proactive import build_dispersion_matrix, mixed_gradient_matrix, synthesize_answer

VARIANTS = ("basic", "robust", "robust+proactive")
WRONG_CLAIM_POLICIES = ("stop", "ignore")
WORKERS_ENV = "INTENTLAB_WORKERS"


@dataclass(frozen=True)
class DefenderConfig:
    variant: str = "robust+proactive"
    kappa: float = 0.6
    k: int = 1
    mu: float = 0.3
    assumed_p_fake: float = 0.4
    sigma_hint: float = 0.001
    merge_multiplier: float = 6.0
    sign: str = "descent"
    score_norm: str = "standardize"
    scaling: str = "match"
    wrong_claim: str = "stop"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if not 0.0 < self.kappa <= 1.0 + 1e-6:
            raise ValueError("kappa must lie in (0, 1]")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not 0.0 <= self.assumed_p_fake < 0.5:
            raise ValueError("assumed_p_fake must lie in [0, 0.5)")
        if self.sigma_hint <= 0:
            raise ValueError("sigma_hint must be > 0")
        if self.sign not in SIGNS:
            raise ValueError(f"unknown sign convention {self.sign!r}")
        if self.score_norm not in SCORE_NORMS:
            raise ValueError(f"unknown score normalization {self.score_norm!r}")
        if self.wrong_claim not in WRONG_CLAIM_POLICIES:
            raise ValueError(f"unknown wrong-claim policy {self.wrong_claim!r}")

    @property
    def estimator(self) -> str:
        return "mean" if self.variant == "basic" else "robust"

    @property
    def proactive(self) -> bool:
        return self.variant == "robust+proactive"


@dataclass(frozen=True)
class Claim:
    iteration: int
    inferred_class: int


class Defender:
    """Watches one attacker's requests, answers them and infers its target."""

    def __init__(self, model: Classifier, config: DefenderConfig, seed=None):
        self.model = model
        self.config = config
        self.posterior = IntentPosterior.uniform(model.n_classes)
        self.dispersion = build_dispersion_matrix(model.n_classes, model.dim, seed) if config.proactive else None
        self.merge_radius = config.merge_multiplier * config.sigma_hint * math.sqrt(model.dim)
        self.estimates: list[np.ndarray] = []
        self.released: list[np.ndarray] = []  # gradient matrix used to answer each batch
        self._points: list[np.ndarray] = []
        self.claims: list[Claim] = []
        self.active = True
        self.trajectory: list[tuple[int, np.ndarray, bool]] = []

    def _estimate(self, points) -> np.ndarray:
        c = self.config
        return estimate_qoi(points, c.estimator, c.k, c.assumed_p_fake).point

    def _scoring_grads(self, i):
        if self.config.proactive:
            return self.released[i]
        return gradient_matrix(self.model, self.estimates[i])

    def observe(self, points) -> tuple[np.ndarray, Optional[Claim]]:
        """Take one request, return ``(answers, new claim or None)``."""
        points = np.asarray(points, float)
        claim = None
        est = self._estimate(points)
        if self.estimates and np.linalg.norm(est - self.estimates[-1]) <= self.merge_radius:
            # a follow-up request for the same iteration
            self._points[-1] = np.concatenate([self._points[-1], points])
            self.estimates[-1] = self._estimate(self._points[-1])
            if self.config.proactive:
                self.released[-1] = self._mixed(self.estimates[-1])
        else:
            if self.estimates and self.active:
                claim = self._infer(self.estimates[-1], est)
            self.estimates.append(est)
            self._points.append(points)
            if self.config.proactive:
                self.released.append(self._mixed(est))
        return self._answer(points), claim

    def _mixed(self, x):
        return mixed_gradient_matrix(gradient_matrix(self.model, x), self.dispersion, self.config.mu,
                                     self.config.scaling)

    def _infer(self, prev, new) -> Optional[Claim]:
        step = descent_direction(prev, new)
        iteration = len(self.estimates) + 1  # batches seen, counting this one
        if step.degenerate:
            return None
        scores = class_scores(step, self._scoring_grads(len(self.estimates) - 1), self.config.sign)
        self.posterior = update_posterior(self.posterior, scores, self.config.kappa, self.config.score_norm)
        self.trajectory.append((iteration, self.posterior.probabilities, self.posterior.confident))
        if not self.posterior.confident:
            return None
        claim = Claim(iteration, self.posterior.inferred_class)
        self.claims.append(claim)
        if self.config.wrong_claim == "stop":
            self.active = False
        return claim

    def _answer(self, points):
        if not self.config.proactive:
            return predict_probs(self.model, points)
        return synthesize_answer(points, self.estimates[-1], self.released[-1], self.model)


@dataclass(frozen=True)
class GameOutcome:
    result: str  # "attacker" | "defender" | "draw"
    iteration: Optional[int]
    total_queries: int
    inferred_class: Optional[int]
    target: int
    origin_index: int
    attack_iteration: Optional[int] = None  # first answered-label success
    true_attack_iteration: Optional[int] = None  # first success on the real model
    inference_iteration: Optional[int] = None  # first correct confident claim
    first_claim_iteration: Optional[int] = None


@dataclass(frozen=True)
class Benchmark:
    model: Classifier
    x_pool: np.ndarray
    labels: np.ndarray  # predicted labels of the pool


@lru_cache(maxsize=8)
def toy_benchmark(spec: ToySpec = ToySpec(), seed: int = 0) -> Benchmark:
    res = train_toy_model(spec, seed)
    return Benchmark(res.model, res.x_test, predict_label(res.model, res.x_test))


def benchmark_from_model(model: Classifier, x_pool) -> Benchmark:
    x_pool = np.asarray(x_pool, float)
    return Benchmark(model, x_pool, predict_label(model, x_pool))


def _draw_task(bench: Benchmark, seq: np.random.SeedSequence):
    rng = np.random.default_rng(seq)
    idx = int(rng.integers(len(bench.x_pool)))
    label = int(bench.labels[idx])
    others = [c for c in range(bench.model.n_classes) if c != label]
    return idx, int(rng.choice(others))


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def play_ctf(bench: Benchmark, attack_config: AttackConfig, defender_config: DefenderConfig, seed,
             independent: bool = False) -> GameOutcome:
    """Play one game.

    With ``independent=True`` neither side's success ends the game: the
    attacker keeps stepping until it believes it has succeeded or runs out
    of iterations, and the defender keeps inferring.  Used by the sweeps.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    task_seq, atk_seq, def_seq = ss.spawn(3)
    idx, target = _draw_task(bench, task_seq)
    model = bench.model
    x0 = bench.x_pool[idx]
    attacker = Attacker(x0, target, attack_config, seed=_seed_int(atk_seq), domain=model.domain,
                        stop_on_success=not independent)
    defender = Defender(model, defender_config, seed=_seed_int(def_seq))
    n_iter = attack_config.n_iter
    attack_it = true_it = infer_it = None
    first_claim = None
    winner, win_it = "draw", None

    while (req := attacker.next_request()) is not None:
        answers, claim = defender.observe(req.points)
        events = []
        if claim is not None:
            # the defender counts requests; score it on the attack's clock
            claim = Claim(req.iteration, claim.inferred_class)
        if claim is not None and claim.iteration <= n_iter:
            first_claim = first_claim or claim
            if claim.inferred_class == target and infer_it is None:
                infer_it = claim.iteration
                events.append((infer_it, 0, "defender"))
        checked = len(attacker.records)  # iteration whose step this request checks
        if checked and true_it is None and np.any(req.roles == QOI):
            inside = np.max(np.abs(attacker.x - attacker.x_origin)) <= attack_config.epsilon + 1e-12
            if inside and int(predict_label(model, attacker.x)) == target:
                true_it = checked
        attacker.receive(answers)
        if attacker.success and attack_it is None:
            attack_it = attacker.success_iteration
            events.append((attack_it, 1, "attacker"))
        if events and winner == "draw":
            win_it, _, winner = min(events)  # earlier iteration wins, the defender on ties
            if not independent:
                break

    inferred = first_claim.inferred_class if first_claim else None
    if first_claim is None and defender.posterior.iterations_observed:
        inferred = defender.posterior.argmax
    return GameOutcome(winner, win_it, attacker.queries, inferred, target, idx,
                       attack_it, true_it, infer_it, first_claim.iteration if first_claim else None)


def _worker_count(workers=None) -> int:
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer") from None


def _play_chunk(args):
    bench, atk, dfn, seeds, independent = args
    return [play_ctf(bench, atk, dfn, s, independent) for s in seeds]


def play_many(bench, attack_config, defender_config, n_games, seed, independent=False, workers=None):
    """Outcomes of ``n_games`` games in game order.

    Game ``g`` always uses the ``g``-th child of ``SeedSequence(seed)``, so
    the same seed replays the same origins, targets and attacker noise for
    every defender variant, and the worker count has no effect on results.
    """
    if n_games < 1:
        raise ValueError("n_games must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_games)
    n_workers = min(_worker_count(workers), n_games)
    if n_workers == 1:
        return _play_chunk((bench, attack_config, defender_config, seeds, independent))
    chunks = [seeds[i::n_workers] for i in range(n_workers)]
    with ProcessPoolExecutor(n_workers) as pool:
        parts = list(pool.map(_play_chunk, [(bench, attack_config, defender_config, c, independent)
                                            for c in chunks]))
    out = [None] * n_games
    for w, part in enumerate(parts):
        out[w::n_workers] = part
    return out


@dataclass
class TournamentResult:
    outcomes: list[GameOutcome]
    n_iter: int
    attacker_curve: np.ndarray = field(init=False)
    defender_curve: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.outcomes)
        self.attacker_curve = self._wins("attacker") / n
        self.defender_curve = self._wins("defender") / n

    def _wins(self, side) -> np.ndarray:
        its = [o.iteration for o in self.outcomes if o.result == side]
        return np.array([sum(i <= t for i in its) for t in range(1, self.n_iter + 1)])

    @property
    def draw_rate(self) -> float:
        return float(np.mean([o.result == "draw" for o in self.outcomes]))

    def rows(self):
        n = len(self.outcomes)
        att, dfn = self._wins("attacker"), self._wins("defender")
        for t in range(self.n_iter):
            yield {"iteration": t + 1, "attacker_win": att[t] / n, "defender_win": dfn[t] / n,
                   "undecided": (n - att[t] - dfn[t]) / n}


TOURNAMENT_COLUMNS = ("iteration", "attacker_win", "defender_win", "undecided")


def run_tournament(bench, attack_config, defender_config, n_games, seed, workers=None) -> TournamentResult:
    outcomes = play_many(bench, attack_config, defender_config, n_games, seed, workers=workers)
    return TournamentResult(outcomes, attack_config.n_iter)


SWEEP_PARAMETERS = ("n_query", "p_fake", "mu")
SWEEP_COLUMNS = ("parameter", "value", "attack_success", "inference_success", "games")


def _rate(values, n_iter):
    return float(np.mean([v is not None and v <= n_iter for v in values]))


def sweep(bench, parameter: str, values, attack_config: AttackConfig, defender_config: DefenderConfig,
          n_games: int, seed, workers=None) -> list[dict]:
    """Independent attack and inference success by the last iteration for
    each value of one parameter; everything else stays at the base configs.

    Attack success counts adversarial points that fool the real model.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"cannot sweep {parameter!r}; pick from {SWEEP_PARAMETERS}")
    rows = []
    for v in values:
        atk, dfn = attack_config, defender_config
        if parameter == "mu":
            dfn = replace(dfn, mu=float(v))
        elif parameter == "p_fake":
            atk = replace(atk, p_fake=float(v),
                          fake_strategy="none" if v == 0 else ("uniform" if atk.fake_strategy == "none"
                                                               else atk.fake_strategy))
        else:
            atk = replace(atk, n_query=int(v))
        out = play_many(bench, atk, dfn, n_games, seed, independent=True, workers=workers)
        rows.append({"parameter": parameter, "value": v,
                     "attack_success": _rate([o.true_attack_iteration for o in out], atk.n_iter),
                     "inference_success": _rate([o.inference_iteration for o in out], atk.n_iter),
                     "games": n_games})
    return rows


def query_budget(config: AttackConfig) -> int:
    """Queries allotted to a full run: every batch carries the QOI on top
    of its ``n_query`` samples, plus one final success check."""
    return config.n_iter * (config.n_query + 1) + 1


@dataclass(frozen=True)
class CostResult:
    baseline_rate: float
    baseline_budget: int
    grid: list  # (n_query, budget, success rate) for the adaptive attacker
    matched_budget: Optional[float]  # None when no grid point reaches the baseline

    @property
    def ratio(self) -> Optional[float]:
        return None if self.matched_budget is None else self.matched_budget / self.baseline_budget


def attack_cost(bench, attack_config: AttackConfig, defender_config: DefenderConfig, n_games: int, seed,
                grid=(100, 150, 200, 250, 300), workers=None) -> CostResult:
    """Budget an adaptive attacker needs to match a non-adaptive one.

    The baseline is ``attack_config`` without decoys.  The adaptive attacker
    keeps ``attack_config.p_fake`` and scans ``grid`` for its ``n_query``;
    the matching budget is interpolated linearly between the first grid
    point that reaches the baseline success rate and the one before it.
    Success is the independent (real-model) success by the last iteration.
    """
    if not attack_config.adaptive:
        raise ValueError("attack_config must use decoys")
    base_cfg = replace(attack_config, p_fake=0.0, fake_strategy="none")
    base = sweep(bench, "n_query", [base_cfg.n_query], base_cfg, defender_config, n_games, seed, workers)[0]
    rows = sweep(bench, "n_query", list(grid), attack_config, defender_config, n_games, seed, workers)
    points = [(r["value"], query_budget(replace(attack_config, n_query=r["value"])), r["attack_success"])
              for r in rows]
    target = base["attack_success"]
    matched = None
    for i, (_, budget, rate) in enumerate(points):
        if rate >= target:
            if i == 0:
                matched = float(budget)
            else:
                _, b0, r0 = points[i - 1]
                matched = b0 + (target - r0) / (rate - r0) * (budget - b0)
            break
    return CostResult(target, query_budget(base_cfg), points, matched)
