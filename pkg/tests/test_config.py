import json

import pytest

from estoi_sep.config import ConfigError, RunConfig, load_config


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_validate():
    cfg = load_config().validate()
    assert cfg.stft_config().latency_ms == 8.0
    assert cfg.loss_config().segment_frames == 96
    assert cfg.band_config().num_bands == 14
    assert cfg.train_config().patience == 30


def test_parse_and_override(tmp_path):
    cfg = load_config(write(tmp_path, """
[training]
regime = "estoi"
seed = 2
[model]
hidden_sizes = [64]
"""))
    cfg.override("training", "seed", 3)
    cfg.override("training", "regime", None)
    cfg.validate()
    assert cfg.training.seed == 3 and cfg.training.regime == "estoi"
    assert cfg.model.hidden_sizes == [64]


@pytest.mark.parametrize("text,match", [
    ("[nope]\na = 1\n", "unknown config section"),
    ("[stft]\nwindw = 3\n", "unknown key"),
    ("[stft\n", "run.toml"),
])
def test_parse_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


@pytest.mark.parametrize("section,key,value", [
    ("stft", "hop", 0), ("training", "patience", 0), ("training", "regime", "sgd"),
    ("model", "hidden_sizes", []), ("data", "n_shifts", 0), ("bands", "max_freq", 9000.0),
    ("data", "sequence_length", 50),
])
def test_validation_errors(section, key, value):
    cfg = RunConfig()
    cfg.override("training", "regime", "estoi")
    cfg.override(section, key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_short_sequences_allowed_for_mse():
    cfg = RunConfig()
    cfg.override("data", "sequence_length", 50)
    cfg.validate()


def test_strict_bands_rejected_at_default_fft():
    cfg = RunConfig()
    cfg.override("bands", "drop_empty", False)
    with pytest.raises(ConfigError, match="band 0"):
        cfg.validate()


def test_dump_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.override("loss", "alpha", 0.5)
    cfg.dump(tmp_path / "c.json")
    again = RunConfig.from_dict(json.loads((tmp_path / "c.json").read_text()))
    assert again == cfg


def test_model_configs():
    blocks = RunConfig().model_configs()
    assert blocks["stft"]["hop"] == 64
    assert blocks["loss"]["segment_frames"] == 96
    assert blocks["sequence_length"] == 256
