"""Command-line entry point: ``intentlab <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime error (or a failed ``verify`` check),
2 usage or configuration error.  ``INTENTLAB_WORKERS`` sets the number of
worker processes for tournaments and sweeps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import batching, estimation, game, proactive
from .attack import Attacker, generate_fake_queries
from .config import ConfigError, ExperimentConfig, config_hash, parse_config
from .inference import IntentPosterior, class_scores, descent_direction, update_posterior
from .model import gradient_matrix, load_model, predict_probs, save_model, toy_test_set, train_toy_model

log = logging.getLogger("intentlab")

DEFAULT_OUT = {
    "train-model": "model.json",
    "attack": "attack.csv",
    "defend": "posterior.csv",
    "estimate-bench": "estimate_bench.csv",
    "segment": "segments.csv",
    "ctf": "ctf.csv",
    "sweep": "sweep.csv",
    "verify": "verify.csv",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def write_csv(path, columns, rows, config: ExperimentConfig) -> None:
    """CSV with a leading ``# config_sha256=... seed=...`` line and a header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={config_hash(config)} seed={config.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def load_benchmark(config: ExperimentConfig) -> game.Benchmark:
    spec, seed = config.model.spec, config.model.seed
    if config.model.path is None:
        return game.toy_benchmark(spec, seed)
    model = load_model(config.model.path)
    if model.dim != spec.dim or model.n_classes != spec.n_classes:
        raise ValueError(f"{config.model.path}: model shape ({model.dim}, {model.n_classes}) does not match "
                         f"model.dim={spec.dim}, model.n_classes={spec.n_classes}")
    x_pool, _ = toy_test_set(spec, seed)
    return game.benchmark_from_model(model, x_pool)


# ---------------------------------------------------------------------------
# subcommands; each returns (exit status, one-line summary)
# ---------------------------------------------------------------------------


def cmd_train_model(args, config):
    res = train_toy_model(config.model.spec, config.model.seed)
    save_model(res.model, args.out)
    status = 0 if res.converged else 1
    return status, (f"trained d={res.model.dim} classes={res.model.n_classes} "
                    f"test_accuracy={res.test_accuracy:.3f} -> {args.out}")


def cmd_attack(args, config):
    bench = load_benchmark(config)
    rng = np.random.default_rng(config.seed)
    idx = args.origin if args.origin is not None else int(rng.integers(len(bench.x_pool)))
    if not 0 <= idx < len(bench.x_pool):
        raise UsageError(f"--origin must lie in [0, {len(bench.x_pool)})")
    label = int(bench.labels[idx])
    if args.target is None:
        target = int(rng.choice([c for c in range(bench.model.n_classes) if c != label]))
    else:
        target = args.target
        if not 0 <= target < bench.model.n_classes or target == label:
            raise UsageError(f"--target must be a class other than the origin's label {label}")
    x0 = bench.x_pool[idx]
    atk = Attacker(x0, target, config.attack, seed=config.seed, domain=bench.model.domain)
    stream = []
    while (req := atk.next_request()) is not None:
        stream.append(req.points)
        atk.receive(predict_probs(bench.model, req.points))
    rows = [{"iteration": r.iteration, "queries": r.queries, "success": r.success,
             "linf_distance": float(np.max(np.abs(r.qoi - x0))), "estimate_norm": r.estimate_norm}
            for r in atk.records]
    write_csv(args.out, ("iteration", "queries", "success", "linf_distance", "estimate_norm"), rows, config)
    if args.stream_out:
        batching.write_stream(np.concatenate(stream), args.stream_out)
    outcome = f"success at iteration {atk.success_iteration}" if atk.success else "no success"
    return 0, f"attack origin={idx} target={target}: {outcome} after {atk.queries} queries -> {args.out}"


def cmd_defend(args, config):
    bench = load_benchmark(config)
    model, dcfg = bench.model, config.defender
    points = batching.read_stream(args.stream)
    if points.shape[1] != model.dim:
        raise ValueError(f"{args.stream}: queries have dimension {points.shape[1]}, model expects {model.dim}")
    segments = batching.segment_stream(points, dcfg.sigma_hint, args.multiplier)
    estimates = [estimation.estimate_qoi(points[s], dcfg.estimator, dcfg.k, dcfg.assumed_p_fake).point
                 for s in segments]
    post = IntentPosterior.uniform(model.n_classes)
    rows = []
    claimed = None
    for i in range(1, len(estimates)):
        step = descent_direction(estimates[i - 1], estimates[i])
        if not step.degenerate:
            scores = class_scores(step, gradient_matrix(model, estimates[i - 1]), dcfg.sign)
            post = update_posterior(post, scores, dcfg.kappa, dcfg.score_norm)
        row = {"iteration": i + 1, "confident": post.confident, "argmax": post.argmax}
        row.update({f"p{c}": p for c, p in enumerate(post.probabilities)})
        rows.append(row)
        if post.confident and claimed is None:
            claimed = (i + 1, post.argmax)
    columns = ("iteration", "confident", "argmax") + tuple(f"p{c}" for c in range(model.n_classes))
    write_csv(args.out, columns, rows, config)
    if claimed:
        verdict = f"confident target {claimed[1]} at batch {claimed[0]}"
    elif rows:
        verdict = f"not confident; most likely target {post.argmax}"
    else:
        verdict = "undetermined (fewer than 2 batches)"
    return 0, f"defend: {len(segments)} batches, {verdict} -> {args.out}"


ESTIMATE_BENCH_COLUMNS = ("method", "p_fake", "strategy", "batches", "error_q50", "error_q90", "error_q99",
                          "error_max")


def cmd_estimate_bench(args, config):
    """l-inf estimation error (in units of sigma) of each method over
    contaminated batches; ``duplicate`` decoys replay the previous iterate."""
    atk = config.attack
    rng = np.random.default_rng(config.seed)
    if not 0.0 <= args.p_fake < 1.0:
        raise UsageError("--p-fake must lie in [0, 1)")
    n_true = int(math.floor(round((1.0 - args.p_fake) * atk.n_query, 9)))
    n_fake = atk.n_query - n_true
    if n_true < 1:
        raise UsageError("--p-fake leaves no true queries")
    if args.batches < 1:
        raise UsageError("--batches must be >= 1")
    dcfg = config.defender
    d = config.model.spec.dim
    methods = ("mean", "median", "robust")
    errors = {m: [] for m in methods}
    for _ in range(args.batches):
        x = rng.uniform(0.2, 0.8, d)
        true = x + atk.sigma * rng.standard_normal((n_true, d))
        prev = x + atk.alpha * np.sign(rng.standard_normal(d))
        history = prev + atk.sigma * rng.standard_normal((atk.n_query, d))
        fakes = generate_fake_queries(x, n_fake, args.strategy, rng, atk.sigma, history=history)
        batch = np.concatenate([true, fakes])
        for m in methods:
            est = estimation.estimate_qoi(batch, m, dcfg.k, dcfg.assumed_p_fake).point
            errors[m].append(float(np.max(np.abs(est - x)) / atk.sigma))
    rows = []
    for m in methods:
        q50, q90, q99 = np.quantile(errors[m], [0.5, 0.9, 0.99])
        rows.append({"method": m, "p_fake": args.p_fake, "strategy": args.strategy, "batches": args.batches,
                     "error_q50": q50, "error_q90": q90, "error_q99": q99, "error_max": max(errors[m])})
    write_csv(args.out, ESTIMATE_BENCH_COLUMNS, rows, config)
    wins = np.mean(np.array(errors["robust"]) < np.array(errors["mean"]))
    return 0, (f"estimate-bench p_fake={args.p_fake} {args.strategy}: robust beats mean in {wins:.1%} "
               f"of {args.batches} batches -> {args.out}")


def cmd_segment(args, config):
    points = batching.read_stream(args.stream)
    sigma = args.sigma_hint if args.sigma_hint is not None else config.defender.sigma_hint
    segments = batching.segment_stream(points, sigma, args.multiplier)
    rows = [{"batch": k, "start": int(s[0]), "stop": int(s[-1]) + 1, "size": len(s)}
            for k, s in enumerate(segments)]
    write_csv(args.out, ("batch", "start", "stop", "size"), rows, config)
    return 0, f"segment: {len(points)} queries in {len(segments)} batches -> {args.out}"


def cmd_ctf(args, config):
    bench = load_benchmark(config)
    res = game.run_tournament(bench, config.attack, config.defender, config.game.n_games, config.seed)
    write_csv(args.out, game.TOURNAMENT_COLUMNS, list(res.rows()), config)
    return 0, (f"ctf {config.defender.variant} vs {config.attack.estimator}: defender "
               f"{res.defender_curve[-1]:.3f}, attacker {res.attacker_curve[-1]:.3f} after "
               f"{config.attack.n_iter} iterations ({config.game.n_games} games) -> {args.out}")


def cmd_sweep(args, config):
    bench = load_benchmark(config)
    try:
        values = [json.loads(v) for v in args.values.split(",")]
    except json.JSONDecodeError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    rows = game.sweep(bench, args.parameter, values, config.attack, config.defender, config.game.n_games,
                      config.seed)
    write_csv(args.out, game.SWEEP_COLUMNS, rows, config)
    return 0, f"sweep {args.parameter} over {len(values)} values ({config.game.n_games} games each) -> {args.out}"


def verification_checks(config: ExperimentConfig, n_samples: int = 100_000):
    """The Monte Carlo sanity checks run by ``verify``: rows of
    ``(check, value, limit, passed)``."""
    rows = []
    rng = np.random.default_rng(config.seed)
    for d in (2, 8, 32):
        err = proactive.check_gaussian_projection(rng.standard_normal(d), n_samples, seed=rng.integers(2**32))
        rows.append((f"gaussian_projection_d{d}", err, 0.05, err <= 0.05))
    for d in (1, 4, 16, 64):
        s = batching.estimate_s_constant(d, n_samples, seed=rng.integers(2**32))
        # exact moment d + 2; d + 3 only bounds it from above
        rows.append((f"s_constant_d{d}", s, d + 2, abs(s / (d + 2) - 1.0) <= 0.05 and s <= d + 3))
    e = estimation.expected_psi_prime()
    rows.append(("expected_psi_prime", e, 0.4132, abs(e - 0.4132) <= 5e-4))
    bench = load_benchmark(config)
    x = bench.x_pool[int(rng.integers(len(bench.x_pool)))]
    dcfg = config.defender
    dispersion = proactive.build_dispersion_matrix(bench.model.n_classes, bench.model.dim, config.seed)
    G = proactive.mixed_gradient_matrix(gradient_matrix(bench.model, x), dispersion, dcfg.mu, dcfg.scaling)
    bias = estimation.bias_bound(dcfg.assumed_p_fake, dcfg.k) * math.sqrt(bench.model.dim)
    check = proactive.check_answer_error_bound(bench.model, x, G, config.attack.sigma, 10_000, bias,
                                   seed=int(rng.integers(2**32)))
    rows.append(("answer_error_bound_violations", check.violation_rate, 0.01, check.violation_rate <= 0.01))
    return rows


def cmd_verify(args, config):
    rows = [dict(zip(("check", "value", "limit", "passed"), r)) for r in verification_checks(config)]
    write_csv(args.out, ("check", "value", "limit", "passed"), rows, config)
    failed = [r["check"] for r in rows if not r["passed"]]
    if failed:
        return 1, f"verify: {len(failed)} of {len(rows)} checks failed ({', '.join(failed)}) -> {args.out}"
    return 0, f"verify: all {len(rows)} checks passed -> {args.out}"


COMMANDS = {
    "train-model": (cmd_train_model, "train the toy classifier and save it"),
    "attack": (cmd_attack, "run one black-box attack against the undefended model"),
    "defend": (cmd_defend, "infer the target from a recorded query stream"),
    "estimate-bench": (cmd_estimate_bench, "compare QOI estimators on contaminated batches"),
    "segment": (cmd_segment, "split a query stream into batches"),
    "ctf": (cmd_ctf, "play a tournament of attacker-versus-defender games"),
    "sweep": (cmd_sweep, "independent success rates over one parameter"),
    "verify": (cmd_verify, "Monte Carlo checks of the estimator identities and answer bound"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intentlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="experiment config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output file (default {DEFAULT_OUT[name]})")
        p.add_argument("--model", help="model file to use instead of training the toy model")
        if name == "attack":
            p.add_argument("--origin", type=int, help="index into the toy test set")
            p.add_argument("--target", type=int, help="target class")
            p.add_argument("--stream-out", help="also write the issued queries as a stream file")
        if name in ("defend", "segment"):
            p.add_argument("--stream", required=True, help="query stream, one vector per line")
            p.add_argument("--multiplier", type=float, default=6.0, help="segmentation threshold multiplier")
        if name == "segment":
            p.add_argument("--sigma-hint", type=float, help="sampling scale (default defender.sigma_hint)")
        if name == "estimate-bench":
            p.add_argument("--p-fake", type=float, default=0.4)
            p.add_argument("--strategy", choices=("uniform", "blind", "duplicate"), default="blind")
            p.add_argument("--batches", type=int, default=200)
        if name == "sweep":
            p.add_argument("--parameter", required=True, choices=game.SWEEP_PARAMETERS)
            p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        config = config.with_seed(args.seed)
    if args.model:
        config = replace(config, model=replace(config.model, path=args.model))
    if args.out is None:
        args.out = config.out or DEFAULT_OUT[args.command]
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        config = _load_config(args)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        status, summary = handler(args, config)
    except (ConfigError, UsageError) as exc:
        print(f"intentlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"intentlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return status


if __name__ == "__main__":
    sys.exit(main())
