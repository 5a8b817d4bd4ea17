"""Config grammar: defaults, round trip, validation messages."""

import pytest

from axijet.config import RunConfig, dump_config, load_config
from axijet.errors import ConfigError


def test_empty_text_gives_defaults():
    assert load_config("") == RunConfig()
    assert load_config(None) == RunConfig()


def test_round_trip_identity():
    cfg = load_config("")
    text = dump_config(cfg)
    again = load_config(text)
    assert again == cfg
    assert dump_config(again) == text


def test_keys_are_case_sensitive():
    cfg = load_config("[gas]\nA = 2.5\n")
    assert cfg.A == 2.5


def test_parse_compound_values():
    cfg = load_config(
        "[discretization]\n"
        "stages = 3:15:0.06, 5:25:0.03\n"
        "[solver]\n"
        "c_chi = 1.0, 0.5\n"
        "deterministic = true\n"
        "[shooting]\n"
        "bracket = 0.01, 0.04\n"
        "fit_tol =\n")
    assert cfg.stages == ((3.0, 15.0, 0.06), (5.0, 25.0, 0.03))
    assert cfg.c_chi == (1.0, 0.5)
    assert cfg.deterministic is True
    assert cfg.bracket == (0.01, 0.04)
    assert cfg.fit_tol is None


def test_round_trip_with_compound_values():
    text = dump_config(load_config(
        "[discretization]\nstages = 3:15:0.06, 5:25:0.03\n"
        "[shooting]\nbracket = 0.01,0.04\n"))
    cfg = load_config(text)
    assert cfg.stages == ((3.0, 15.0, 0.06), (5.0, 25.0, 0.03))
    assert dump_config(cfg) == text


def test_gamma_invariant_named_in_error():
    with pytest.raises(ConfigError, match="gamma > 1"):
        load_config("[gas]\ngamma = 0.9\n")


@pytest.mark.parametrize("text,fragment", [
    ("[nope]\nx = 1\n", "unknown section"),
    ("[gas]\nrho = 1\n", "unknown key"),
    ("[gas]\ngamma = squid\n", "key gamma"),
    ("[walls]\na = 3\n", "0 < a < b"),
    ("[discretization]\nx_max = 2.0\n", "x_max"),
    ("[discretization]\nstages = 5:25:0.03, 3:15:0.06\n", "stages must grow"),
    ("[solver]\nc_chi = \n", "at least one stage"),
    ("[shooting]\nbracket = 0.04\n", "lo,hi"),
    ("[critical]\nrel_width = 1.5\n", "rel_width"),
    ("[outputs]\nformats = txt, yaml\n", "unknown output formats"),
])
def test_validation_messages(text, fragment):
    assert load_config("") == RunConfig()  # sanity: defaults stay valid
    with pytest.raises(ConfigError, match=fragment):
        load_config(text)


def test_stage_triple_shape_checked():
    with pytest.raises(ConfigError, match="mu:x_max:h"):
        load_config("[discretization]\nstages = 3:15\n")
