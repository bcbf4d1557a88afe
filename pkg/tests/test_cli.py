import json

import pytest

from stochnoether import __version__, cli
from stochnoether.errors import ParseError

FAST = "M = 2000\nN = 50\nvalue_steps = 128\n"


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_parse_examples():
    cfg = cli.parse_config("command = symcheck\n# comment\nsigma = 0.3  # trailing\nutility = log\n")
    assert cfg.command == "symcheck" and cfg.sigma == 0.3 and cfg.utility == "log"
    assert cfg.M == 50000 and cfg.z_crit == 4.0
    cfg = cli.parse_config("family = omega2\nhalf_step = false\n", {"command": "merton-verify"})
    assert cfg.family == "Omega2" and cfg.half_step is False


def test_parse_error_names_line():
    with pytest.raises(ParseError) as info:
        cli.parse_config("command = symcheck\nT = 1\n\nsigma = -0.1\n")
    assert info.value.line == 4 and "sigma" in str(info.value)


@pytest.mark.parametrize("text,line", [
    ("command = symcheck\nbogus = 1\n", 2),
    ("command = symcheck\nr = 0.01\nr = 0.02\n", 3),
    ("just words\n", 1),
    ("command = symcheck\nM = many\n", 2),
    ("command = launch\n", 1),
])
def test_parse_rejections(text, line):
    with pytest.raises(ParseError) as info:
        cli.parse_config(text)
    assert info.value.line == line


def test_config_round_trip():
    cfg = cli.parse_config("command = merton-verify\nutility = log\nM = 1234\nfamily = all\nx_min = 0.25\n")
    again = cli.parse_config(cli.emit_config(cfg))
    assert again == cfg


def test_combine_precedence():
    assert cli.combine(["pass", "pass"]) == "pass"
    assert cli.combine(["pass", "inconclusive"]) == "inconclusive"
    assert cli.combine(["inconclusive", "fail", "pass"]) == "fail"


def test_main_errors_exit_one(tmp_path, capsys):
    assert cli.main(["symcheck", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = write_config(tmp_path, "sigma = -0.1\n")
    assert cli.main(["symcheck", "--config", bad, "--out", str(tmp_path)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_symcheck_pass_and_fail_exit_codes(tmp_path):
    good = write_config(tmp_path, "family = Omega3\n")
    assert cli.main(["symcheck", "--config", good, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    doc = json.loads((tmp_path / "a" / "determining_report.json").read_text())
    assert doc["version"] == __version__ and doc["command"] == "symcheck"
    assert doc["tolerances"]["tol_residual"] == 1e-8 and doc["config"]["family"] == "Omega3"
    # a full unit of u_x leaves a residual of r*u_x, well above the tolerance
    bad = write_config(tmp_path, "family = Omega3\nperturb = 1.0\n", "bad.cfg")
    assert cli.main(["symcheck", "--config", bad, "--out", str(tmp_path / "b"), "--quiet"]) == 2


def test_inconclusive_exit_code(tmp_path, monkeypatch):
    monkeypatch.setitem(cli.DISPATCH, "symcheck", lambda cfg, out: ("inconclusive", {}))
    cfg = cli.parse_config("command = symcheck\n")
    assert cli.run(cfg, tmp_path) == 3


def test_merton_verify_outputs_are_byte_identical_across_workers(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, FAST + "family = Omega4\n")
    monkeypatch.setenv("STOCH_NOETHER_THREADS", "1")
    assert cli.main(["merton-verify", "--config", cfg, "--out", str(tmp_path / "one"), "--quiet"]) == 0
    monkeypatch.setenv("STOCH_NOETHER_THREADS", "4")
    assert cli.main(["merton-verify", "--config", cfg, "--out", str(tmp_path / "four"), "--quiet"]) == 0
    a = (tmp_path / "one" / "conserved_means.csv").read_bytes()
    assert a == (tmp_path / "four" / "conserved_means.csv").read_bytes()
    assert a.splitlines()[0] == b"t,mean,stderr,drift_z,trimmed_mean,n_valid_paths"
    assert b"\r\n" not in a and len(a.splitlines()) == 52
    report = json.loads((tmp_path / "one" / "martingale_report.json").read_text())
    assert report["seed"] == 7


def test_seed_override_changes_output(tmp_path):
    cfg = write_config(tmp_path, FAST + "family = Omega4\nhalf_step = false\n")
    cli.main(["merton-verify", "--config", cfg, "--out", str(tmp_path / "s7"), "--quiet"])
    cli.main(["merton-verify", "--config", cfg, "--out", str(tmp_path / "s8"), "--seed", "8", "--quiet"])
    a = (tmp_path / "s7" / "conserved_means.csv").read_bytes()
    assert a != (tmp_path / "s8" / "conserved_means.csv").read_bytes()


def test_noether_classical_command(tmp_path):
    cfg = write_config(tmp_path, "el_steps = 500\n")
    assert cli.main(["noether-classical", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    lines = (tmp_path / "constancy.csv").read_text().splitlines()
    assert lines[0] == "t,free_momentum,broken_momentum,oscillator_energy,oscillator_error"
    assert len(lines) == 502
