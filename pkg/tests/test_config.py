"""Config defaults, file parsing, overrides, and validation."""

import pytest

from hpfuse.config import ConfigError, TrainConfig, apply_overrides, parse_config_file


def test_defaults_follow_training_protocol():
    cfg = TrainConfig().validate()
    assert cfg.epochs == 100
    assert cfg.batch_size == 8
    assert cfg.resize == 224
    assert cfg.alpha == 4.0 and cfg.beta == 1.0
    assert (cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (1e-4, 0.9, 0.999, 1e-8)


def test_parse_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# desk run\n"
        "epochs = 3\n"
        "batch_size = 4\n"
        "beta = 0.5   # lighter semantic term\n"
        "disable_hier_loss = true\n"
        "max_iters = none\n"
        "data_dir = data/synth\n",
        encoding="utf-8")
    cfg = parse_config_file(path)
    assert cfg.epochs == 3
    assert cfg.batch_size == 4
    assert cfg.beta == 0.5
    assert cfg.disable_hier_loss is True
    assert cfg.max_iters is None
    assert cfg.data_dir == "data/synth"


def test_unknown_key_reports_line_number(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs = 3\nnot_a_key = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 2") as err:
        parse_config_file(path)
    assert err.value.line == 2


def test_bad_value_reports_line_number(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("\n\nepochs = soon\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_file(path)


def test_missing_equals_is_an_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_file(path)


def test_overrides():
    cfg = apply_overrides(TrainConfig(), ["epochs=2", "backend=http", "beta=0"])
    assert (cfg.epochs, cfg.backend, cfg.beta) == (2, "http", 0.0)
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(TrainConfig(), ["nope=1"])
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(TrainConfig(), ["epochs"])


@pytest.mark.parametrize("field,value,message", [
    ("epochs", 0, "epochs"),
    ("batch_size", 1, "batch"),
    ("resize", 16, "resize"),
    ("alpha", -1.0, "weights"),
    ("backend", "llava", "backend"),
    ("dtype", "float16", "dtype"),
    ("refresh_interval", 0, "refresh"),
    ("max_iters", 0, "max_iters"),
])
def test_validation_rejects_bad_values(field, value, message):
    cfg = TrainConfig(**{field: value})
    with pytest.raises(ConfigError, match=message):
        cfg.validate()


def test_custom_question_texts_flow_into_question_set():
    cfg = TrainConfig(question1="Where is the warmest region?")
    qs = cfg.questions()
    assert qs.questions[0].text == "Where is the warmest region?"
    assert qs.questions[3].text == "What is the content of the image?"
