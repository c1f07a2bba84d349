"""Inferring the target class of query-based black-box attacks."""

from .attack import AttackConfig, Attacker, run_attack
from .estimation import bias_bound, estimate_qoi, robust_estimate
from .game import DefenderConfig, Defender, play_ctf, run_tournament, sweep, toy_benchmark
from .inference import IntentPosterior, passive_infer
from .model import Classifier, ToySpec, train_toy_model

__all__ = [
    "AttackConfig", "Attacker", "Classifier", "Defender", "DefenderConfig", "IntentPosterior", "ToySpec",
    "bias_bound", "estimate_qoi", "passive_infer", "play_ctf", "robust_estimate", "run_attack",
    "run_tournament", "sweep", "toy_benchmark", "train_toy_model",
]

__version__ = "0.1.0"
