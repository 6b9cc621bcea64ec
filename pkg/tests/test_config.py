import json

import pytest

from drivelm.config import (CONFIG_ENV, ConfigError, RunConfig, apply_overrides, load_config, preset)


def test_defaults_valid_and_consistent():
    cfg = RunConfig().validate()
    assert cfg.tokens_per_frame == 19 and cfg.vocab == 304
    assert cfg.model.context == cfg.data.frames * cfg.tokens_per_frame
    preset("planning").validate()


def test_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["model.layers=2", "sim.profile_weights=[1,0,0]", "sampler.top_k=50"])
    cfg.save(tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()
    assert back.sim.profile_weights == (1, 0, 0)
    assert RunConfig().digest() != cfg.digest()


def test_cross_field_errors_listed():
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), ["model.context=100", "rollout.window_condition=8"]).validate()
    text = " ".join(e.value.problems)
    assert "model.context" in text and "window_condition" in text
    with pytest.raises(ConfigError) as e:
        apply_overrides(RunConfig(), ["tokenizer.S=5"]).validate()
    assert "tokenizer.S" in e.value.problems[0]
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["codec.M=8"]).validate()  # vocab no longer matches


def test_bad_overrides():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["model.depth=3"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["nosuch.x=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["model.layers"])
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema": "other/1"})


def test_env_default(tmp_path, monkeypatch):
    cfg = apply_overrides(RunConfig(), ["seed=42"])
    cfg.save(tmp_path / "c.json")
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "c.json"))
    assert load_config().seed == 42
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "missing.json"))
    with pytest.raises(ConfigError):
        load_config()


def test_json_is_plain(tmp_path):
    RunConfig().save(tmp_path / "c.json")
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["schema"] == "drivelm-config/1" and d["model"]["width"] == 128
