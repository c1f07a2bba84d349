import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intentlab.attack import AttackConfig
from intentlab.config import ConfigError, ExperimentConfig, config_hash, parse_config, parse_config_text, \
    serialize_config
from intentlab.game import DefenderConfig


def test_empty_config_is_defaults():
    cfg = parse_config_text("")
    assert cfg == ExperimentConfig()
    a, d = cfg.attack, cfg.defender
    assert (a.alpha, a.epsilon, a.n_iter, a.n_query, a.p_fake, a.sigma, a.tau) == \
        (0.01, 0.03, 10, 100, 0.5, 0.001, 1.0)
    assert (d.k, d.mu, d.kappa) == (1, 0.3, 0.6)


def test_values_and_comments():
    cfg = parse_config_text("# comment\nseed = 7\nattack.p_fake = 0.3\ndefender.variant = robust\n"
                            "model.dim = 16\nmodel.n_classes = 4\ngame.n_games = 20\n")
    assert cfg.seed == 7 and cfg.attack.seed == 7
    assert cfg.attack.p_fake == 0.3 and cfg.defender.variant == "robust"
    assert cfg.model.spec.dim == 16 and cfg.game.n_games == 20


def test_decoy_fraction_above_half_rejected():
    with pytest.raises(ConfigError, match="p_fake"):
        parse_config_text("attack.p_fake = 0.6")


def test_zero_decoys_switch_strategy_off():
    assert parse_config_text("attack.p_fake = 0").attack.fake_strategy == "none"


@pytest.mark.parametrize("text", [
    "attack.learning_rate = 0.1",
    "colour = 3",
    "arena.size = 2",
    "attack.n_query = 'many'",
    "attack.n_query = 1",
    "defender.kappa = 0",
    "attack.seed = 4",
    "seed = -1",
    "just some words",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.cfg")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.5), st.sampled_from(["basic", "robust", "robust+proactive"]),
       st.floats(0.0, 1.0), st.integers(2, 500))
def test_round_trip(seed, p_fake, variant, mu, n_query):
    strategy = "none" if p_fake == 0 else "blind"
    if int((1 - p_fake) * n_query + 1e-9) < 2:
        return  # too few true queries; rejected on construction
    cfg = ExperimentConfig(attack=AttackConfig(p_fake=p_fake, n_query=n_query, fake_strategy=strategy,
                                               seed=seed),
                           defender=DefenderConfig(variant=variant, mu=mu), seed=seed)
    text = serialize_config(cfg)
    back = parse_config_text(text)
    assert back == cfg
    assert serialize_config(back) == text


def test_hash_tracks_content():
    base = ExperimentConfig()
    assert config_hash(base) == config_hash(parse_config_text(""))
    assert config_hash(base) != config_hash(base.with_seed(1))
    other = dataclasses.replace(base, defender=DefenderConfig(mu=0.1))
    assert config_hash(base) != config_hash(other)
