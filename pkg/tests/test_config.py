import pytest

from dlperf.config import ConfigError, Option, format_config, read_config_file, resolve

OPTS = [
    Option("epochs", int, 30, "epochs"),
    Option("lr", float, 0.01, "rate"),
    Option("arch", str, "mini-alexnet", "arch", ("mini-alexnet", "mini-googlenet")),
    Option("save", bool, True, "save"),
    Option("weights", str, None, "weights"),
]


def test_defaults():
    assert resolve(OPTS) == {"epochs": 30, "lr": 0.01, "arch": "mini-alexnet", "save": True, "weights": None}


def test_precedence_flags_over_file_over_defaults():
    cfg = resolve(OPTS, {"epochs": "5", "lr": "0.1"}, {"epochs": "7"})
    assert cfg["epochs"] == 7 and cfg["lr"] == 0.1 and cfg["arch"] == "mini-alexnet"


def test_none_flag_means_unset():
    assert resolve(OPTS, {"epochs": "5"}, {"epochs": None})["epochs"] == 5


@pytest.mark.parametrize("raw,value", [("yes", True), ("off", False), ("TRUE", True), ("0", False)])
def test_bool_words(raw, value):
    assert resolve(OPTS, {"save": raw})["save"] is value


def test_errors_name_the_key():
    with pytest.raises(ConfigError, match="epochs"):
        resolve(OPTS, {"epochs": "ten"})
    with pytest.raises(ConfigError, match="arch"):
        resolve(OPTS, {}, {"arch": "resnet"})
    with pytest.raises(ConfigError, match="bogus"):
        resolve(OPTS, {"bogus": "1"})
    with pytest.raises(ConfigError, match="save"):
        resolve(OPTS, {"save": "maybe"})


def test_read_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 4  # trailing\n\nlearning-rate=0.5\nweights =\n")
    assert read_config_file(path) == {"epochs": "4", "learning_rate": "0.5", "weights": ""}


def test_read_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_config_file(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs 4\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(bad)


def test_format_round_trip(tmp_path):
    cfg = resolve(OPTS, {"epochs": "3", "save": "no"})
    path = tmp_path / "resolved.cfg"
    path.write_text(format_config(cfg))
    assert resolve(OPTS, read_config_file(path)) == cfg
