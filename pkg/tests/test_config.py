import dataclasses

import pytest

from advtrans.config import (ATTACK_NAMES, ExperimentConfig, load_config, parse_config_text, preset_names,
                             schema_text)
from advtrans.errors import ConfigurationError


def test_empty_text_gives_defaults():
    assert parse_config_text("") == ExperimentConfig()


def test_values_are_typed():
    cfg = parse_config_text("""
[experiment]
seed = 0x10
[transform]
delta = 0.25
stepsize = auto
random_start = no
[attack]
suite = pgd, bpda-i
""")
    assert cfg.seed == 16 and cfg.transform.delta == 0.25 and cfg.transform.stepsize is None
    assert cfg.transform.random_start is False
    assert cfg.attack.suite == ("pgd", "bpda-i")


@pytest.mark.parametrize("text, path", [
    ("[nonsense]\nx = 1", "nonsense"),
    ("[data]\ncolour = red", "data.colour"),
    ("[transform]\ndelta = wide", "transform.delta"),
    ("[transform]\ndelta = -0.1", "transform"),
    ("[attack]\nsuite = pgd, lasers", "attack.suite"),
    ("[attack]\neval_sampling = sometimes", "attack.eval_sampling"),
    ("[data]\neval_size = 5000", "data.eval_size"),
    ("[fb]\npretrain = partially", "fb.pretrain"),
    ("[sweep]\nn_attacks = query", "sweep.n_attacks"),
])
def test_errors_name_the_field(text, path):
    with pytest.raises(ConfigurationError, match=path.replace(".", r"\.")):
        parse_config_text(text)


def test_syntax_error_is_config_error():
    with pytest.raises(ConfigurationError):
        parse_config_text("no section header")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "absent.ini")


def test_presets_load():
    assert {"desk", "smoke"} <= set(preset_names())
    for name in preset_names():
        cfg = load_config(f"preset:{name}")
        assert cfg.experiment.name == name
    with pytest.raises(ConfigurationError, match="unknown preset"):
        load_config("preset:galaxy")


def test_desk_preset_covers_every_attack():
    suite = set(load_config("preset:desk").attack.suite)
    assert suite == set(ATTACK_NAMES) - {"pgd"}


def test_schema_lists_every_key():
    text = schema_text()
    for f in dataclasses.fields(ExperimentConfig):
        assert f"[{f.name}]" in text
    assert "delta : float = 0.3" in text


def test_seed_override_changes_derived_seeds():
    cfg = ExperimentConfig()
    other = cfg.with_seed(5)
    assert other.seed == 5
    assert cfg.attack_config().rng_seed != other.attack_config().rng_seed
    assert cfg.transform_config().rng_seed != other.transform_config().rng_seed


def test_to_dict_is_json_friendly():
    import json
    assert json.loads(json.dumps(ExperimentConfig().to_dict()))["transform"]["delta"] == 0.3
