import numpy as np
import pytest

from gamakit import cli, config
from gamakit.attacks import AttackConfig
from gamakit.errors import ConfigError, ParseError
from gamakit.training import GatConfig


def test_parse_config_text():
    vals = config.parse_config_text("# attack\nepsilon = 0.3\nschedule = 50, 75  # drops\n\nrestarts=5\n")
    assert vals == {"epsilon": "0.3", "schedule": "50, 75", "restarts": "5"}
    coerced = config.apply_fields(AttackConfig, vals)
    assert coerced == {"epsilon": 0.3, "schedule": (50, 75), "restarts": 5}


def test_config_errors():
    with pytest.raises(ParseError):
        config.parse_config_text("no equals sign")
    with pytest.raises(ParseError):
        config.parse_config_text("a=1\na=2")
    with pytest.raises(ConfigError):
        config.apply_fields(AttackConfig, {"colour": "red"})


def test_gat_config_pairs():
    v = config.apply_fields(GatConfig, {"lr_drops": "5:10, 8:10", "alternate_lambda": "false", "alpha": "none"})
    assert v == {"lr_drops": ((5, 10.0), (8, 10.0)), "alternate_lambda": False, "alpha": None}


def test_csv_round_trip(tmp_path):
    rows = [(0, 1, 2, True, -0.25, 0.1), (1, 3, 3, False, float("nan"), 1e-17)]
    text = cli.write_csv(rows, cli.ATTACK_HEADER, tmp_path / "a.csv")
    header, parsed = cli.read_csv(tmp_path / "a.csv")
    assert header == cli.ATTACK_HEADER
    assert parsed[0] == (0, 1, 2, 1, -0.25, 0.1)
    assert np.isnan(parsed[1][4]) and parsed[1][5] == 1e-17
    assert cli.read_csv(text)[1][0] == parsed[0]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "m.ckpt"
    assert cli.main(["train", "--regime", "standard", "--dataset", "gaussians", "--epochs", "3",
                     "--hidden", "8", "--checkpoint", str(path), "--out", str(d / "t.csv")]) == 0
    return path


def test_unknown_attack_exit_2(ckpt, capsys):
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--attacks", "fgsm,bogus"]) == 2
    err = capsys.readouterr().err
    assert "gama-pgd" in err and "bogus" in err


def test_usage_errors_exit_2(ckpt, tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["attack"]) == 2
    assert cli.main(["attack", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert cli.main(["train", "--regime", "trades", "--dataset", "gaussians", "--epochs", "1"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps = many\n")
    assert cli.main(["attack", "--checkpoint", str(ckpt), "--config", str(bad)]) == 2


def test_numeric_failure_exit_1(tmp_path):
    code = cli.main(["train", "--regime", "standard", "--dataset", "gaussians", "--epochs", "3",
                     "--set", "lr=1e6", "--set", "momentum=0", "--out", str(tmp_path / "t.csv")])
    assert code == 1


def test_flags_override_config_file(ckpt, tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("attack = gama-fw\nsteps = 4\nrestarts = 2\n")
    assert cli.main(["attack", "--checkpoint", str(ckpt), "--config", str(cfg), "--restarts", "1",
                     "--n", "5", "--out", str(tmp_path / "o.csv")]) == 0
    err = capsys.readouterr().err
    assert "gama-fw" in err and "steps=4" in err and "restarts=1" in err


def test_seed_env_override(ckpt, tmp_path, monkeypatch):
    outs = {}
    for env in ("1", "2"):
        monkeypatch.setenv(cli.SEED_ENV, env)
        p = tmp_path / f"{env}.csv"
        cli.main(["attack", "--checkpoint", str(ckpt), "--steps", "3", "--out", str(p)])
        outs[env] = p.read_bytes()
    assert outs["1"] != outs["2"]
    p = tmp_path / "flag.csv"
    cli.main(["attack", "--checkpoint", str(ckpt), "--steps", "3", "--seed", "1", "--out", str(p)])
    assert p.read_bytes() == outs["1"]


def test_attack_seed_repeatable(ckpt, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert cli.main(["attack", "--checkpoint", str(ckpt), "--seed", "7", "--steps", "5", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    header, rows = cli.read_csv(a)
    assert header == cli.ATTACK_HEADER and len(rows) > 0
