import math

import pytest

from qbilliard import config as cf


def test_defaults_are_full_preset():
    c = cf.RunConfig()
    assert (c.cutoff, c.state_start, c.state_stop, c.seeds) == (130, 50, 1050, (0, 1, 2, 3, 4))
    assert c.kappas == (1.0, 2.0, 5.0, math.inf)


def test_fast_preset():
    c = cf.resolve("fast")
    assert (c.cutoff, c.state_stop, len(c.seeds)) == (60, 300, 2)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ncutoff = 80  # trailing\nkappas = 1, 3, inf\n\nepochs=4\n")
    c = cf.resolve("fast", path, {"epochs": "7", "alphas": "0.5,1"})
    assert c.cutoff == 80 and c.kappas == (1.0, 3.0, math.inf)
    assert c.epochs == 7 and c.alphas == (0.5, 1.0) and c.state_stop == 300


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(cf.ConfigError):
        cf.parse_text("cutof = 60\n")
    with pytest.raises(cf.ConfigError):
        cf.resolve(overrides={"nope": "1"})
    with pytest.raises(cf.ConfigError):
        cf.parse_text("just text\n")
    with pytest.raises(cf.ConfigError):
        cf.parse_text("epochs = many\n")


def test_validation():
    with pytest.raises(cf.ConfigError):
        cf.resolve(overrides={"kind": "photo"})
    with pytest.raises(cf.ConfigError):
        cf.resolve(overrides={"state_start": "10", "state_stop": "5"})


def test_dump_round_trip():
    c = cf.resolve("fast", overrides={"noise_G": "2.5", "distributions": "gaussian"})
    again = cf.RunConfig(**cf.parse_text(cf.dump(c)))
    assert again == c
