import filecmp

import pytest

from swingkit.cli import main, parse_config, parse_k_list, parse_starts


def run(tmp, *args):
    return main(list(args) + ["--out", str(tmp)])


def write_cfg(tmp, text, name="run.cfg"):
    p = tmp / name
    p.write_text(text)
    return str(p)


def test_parse_config_types(tmp_path):
    p = write_cfg(tmp_path, "# comment\nmodel = binary\nK=48\nT = 3.0\n\nexhaustive=true\n")
    cfg = parse_config(p)
    assert cfg == {"model": "binary", "K": 48, "T": 3.0, "exhaustive": True}


def test_parse_config_rejects_unknown_key(tmp_path):
    p = write_cfg(tmp_path, "granularity=9\n")
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config(p)


def test_parse_starts():
    assert parse_starts("0:0.5;2:0") == [(0.0, 0.5), (2.0, 0.0)]
    with pytest.raises(ValueError, match="not t:y"):
        parse_starts("0-0.5")
    with pytest.raises(ValueError, match="empty start list"):
        parse_starts(";")


def test_parse_k_list():
    assert parse_k_list("48,96 192") == [48, 96, 192]
    with pytest.raises(ValueError, match="list of integers"):
        parse_k_list("48,None")


def test_cli_requires_a_command(capsys):
    assert main([]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_price_binary(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\nstarts=0:0.5;0:0\n")
    assert run(tmp_path, "price", "--config", cfg, "--exhaustive") == 0
    out = capsys.readouterr().out
    assert "J(0,0.5)=0.875" in out.replace(" ", "")
    for name in ("value_field.txt", "summary.txt", "rollout_0.txt", "exits_0.txt"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "value_field.txt").read_text().splitlines()[0]
    assert header.split() == ["t", "node", "y", "J", "dminus", "dplus"]
    assert "0.875" in (tmp_path / "summary.txt").read_text()


def test_cli_price_rejects_misaligned_volume(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\nL=0.7\n")
    assert run(tmp_path, "price", "--config", cfg) == 1
    assert "misaligned" in capsys.readouterr().err


def test_cli_price_rejects_unknown_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\ngranularity=2\n")
    assert run(tmp_path, "price", "--config", cfg) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_cli_binary_pins_its_horizon(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\nT=2.5\n")
    assert run(tmp_path, "price", "--config", cfg) == 1
    assert "T = 3" in capsys.readouterr().err


def test_cli_verify_binary(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\n")
    assert run(tmp_path, "verify", "--config", cfg, "--steps", "48",
               "--exhaustive") == 0
    report = (tmp_path / "report.txt").read_text()
    assert "FAIL" not in report
    names = [ln.split()[1].rstrip(":") for ln in report.splitlines() if ln.strip()]
    assert "value_invariants" in names
    assert "optimal_martingale" in names


def test_cli_verify_binomial_sampled(tmp_path):
    cfg = write_cfg(tmp_path, "model=binomial\nkind=martingale\nx0=1\n"
                              "up=1.05\ndown=0.96\np_up=0.44444444444444442\n")
    assert run(tmp_path, "verify", "--config", cfg, "--steps", "24",
               "--seed", "5") == 0
    report = (tmp_path / "report.txt").read_text()
    assert "FAIL" not in report


def test_cli_dual_study(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "model=binary\nk_list=12,24\n")
    assert run(tmp_path, "dual", "--config", cfg) == 0
    out = capsys.readouterr().out
    gap = (tmp_path / "gap_study.txt").read_text().splitlines()
    assert gap[0].split() == ["K", "primal", "dual", "gap"]
    assert len(gap) == 3
    assert (tmp_path / "martingale.txt").read_text().splitlines()[0].split() == \
        ["k", "node", "M"]
    assert "12" in out and "24" in out


def test_cli_stopping_table(tmp_path):
    cfg = write_cfg(tmp_path, "model=binary\nstarts=0:0.5\n")
    assert run(tmp_path, "stopping", "--config", cfg, "--exhaustive") == 0
    lines = (tmp_path / "marginal.txt").read_text().splitlines()
    assert lines[0].startswith("t0 y0 region")
    assert lines[1].split()[:3] == ["0", "0.5", "interior"]


def test_cli_example_bundle_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert main(["example", "--steps", "12", "--out", str(a)]) == 0
    assert main(["example", "--steps", "12", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in ("summary.txt", "value_field.txt", "marginal.txt",
                 "gap_study.txt", "example_lattice.txt"):
        assert name in names
    match, mismatch, errors = filecmp.cmpfiles(str(a), str(b), names, shallow=False)
    assert mismatch == [] and errors == []


def test_cli_example_summary_values(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    assert main(["example", "--steps", "48", "--out", str(out)]) == 0
    text = (out / "summary.txt").read_text().replace(" ", "")
    assert "J(0,0.5)=0.875" in text
    assert "J(0,0)=1.5" in text
