import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dplbench import benchharness as bh
from dplbench import cli
from dplbench.config import RunConfig, dump_config, parse_config, parse_config_text
from dplbench.errors import ConfigError, FingerprintMismatch

from conftest import SMALL_INI



# -- config --------------------------------------------------------------------


def test_empty_file_is_reference():
    assert parse_config_text("") == RunConfig()


def test_seed_is_global():
    cfg = parse_config_text("[run]\nseed = 9\n")
    assert cfg.pretrain.seed == 9 and cfg.protocol.hparam_seed == 9 and cfg.protocol.data_seed == 9


def test_derived_seed_not_settable():
    with pytest.raises(ConfigError, match="derived"):
        parse_config_text("[pretrain]\nseed = 4\n")


def test_roundtrip_small():
    cfg = parse_config_text(SMALL_INI)
    assert parse_config_text(dump_config(cfg)) == cfg
    assert cfg.protocol.methods == bh.METHODS


@given(st.integers(0, 99), st.floats(0.0, 5.0), st.integers(1, 50), st.floats(0.05, 0.95))
def test_roundtrip_property(seed, sigma, trials, frac):
    cfg = RunConfig(world=dataclasses.replace(RunConfig().world, noise_sigma=sigma),
                    protocol=dataclasses.replace(RunConfig().protocol, trials=trials, train_fraction=frac),
                    seed=seed)
    assert parse_config_text(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text,line,match", [
    ("[world]\nnum_classes = 4\nbogus = 1\n", 3, "unknown key"),
    ("[world]\n\nnum_classes = one\n", 3, "cannot parse"),
    ("[world]\nnum_classes = 1\n", 2, "out of range"),
    ("[protocol]\nmethods = dpl, magic\n", 2, "unknown method"),
    ("[protocol]\nseeds =\n", 2, "must not be empty"),
    ("\n[nonsense]\n", 2, "unknown section"),
    ("num_classes = 3\n", 1, "outside"),
    ("[world]\nnum_classes = 3\nnum_classes = 4\n", 3, ""),
])
def test_errors_carry_line_numbers(text, line, match):
    with pytest.raises(ConfigError, match=f"cfg.ini:{line}: .*{match}"):
        parse_config_text(text, "cfg.ini")


def test_max_len_must_fit_context():
    with pytest.raises(ConfigError, match="cfg.ini:2: max_len"):
        parse_config_text("[encoder]\nmax_len = 8\n", "cfg.ini")
    parse_config_text("[encoder]\nmax_len = 8\n[protocol]\nmethods = erm_frozen\n")


def test_uncreatable_output_dir(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(ConfigError, match="not creatable"):
        parse_config_text(f"[run]\noutput_dir = {tmp_path / 'file' / 'sub'}\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.ini")


def test_fingerprints():
    a = parse_config_text(SMALL_INI)
    b = parse_config_text(SMALL_INI.replace("trials = 2", "trials = 3"))
    c = parse_config_text(SMALL_INI.replace("steps = 40", "steps = 41"))
    assert a.pretrain_fingerprint() == b.pretrain_fingerprint() and a.fingerprint() != b.fingerprint()
    assert a.pretrain_fingerprint() != c.pretrain_fingerprint()
    d = parse_config_text(SMALL_INI.replace("seed = 3", "seed = 3\noutput_dir = elsewhere"))
    assert d.fingerprint() == a.fingerprint()


# -- command line --------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "small.ini").write_text(SMALL_INI)
    out = root / "out"
    assert cli.main(["pretrain", "--config", str(root / "small.ini"), "--out", str(out)]) == 0
    assert cli.main(["benchmark", "--config", str(root / "small.ini"), "--encoders",
                     str(out / "encoders.dple"), "--out", str(out)]) == 0
    return root


def test_pretrain_outputs(run_dir):
    out = run_dir / "out"
    summary = json.loads((out / "pretrain.json").read_text())
    assert set(summary) >= {"in_pool_zero_shot", "held_out_zero_shot", "retrieval_top1", "encoder_fingerprint"}
    assert parse_config(out / "config.ini") == parse_config(run_dir / "small.ini")


def test_benchmark_outputs(run_dir):
    out = run_dir / "out"
    for name in ("trials.jsonl", "table.csv", "table.json"):
        assert (out / name).is_file()
    assert len(list((out / "generators").glob("*.dplg"))) == 3 * 2
    assert len(list((out / "cache").glob("*.dplc"))) == 3
    header = json.loads((out / "trials.jsonl").read_text().splitlines()[0])
    assert header["expected_trials"] == bh.count_trials(parse_config(run_dir / "small.ini").protocol, 3)


def test_report_reproduces_tables(run_dir, tmp_path, capsys):
    out = run_dir / "out"
    assert cli.main(["report", "--log", str(out / "trials.jsonl"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "table.csv").read_bytes() == (out / "table.csv").read_bytes()
    assert (tmp_path / "table.json").read_bytes() == (out / "table.json").read_bytes()
    assert capsys.readouterr().out.startswith("method,")


def test_benchmark_refuses_foreign_encoders(run_dir, tmp_path, capsys):
    other = run_dir / "other.ini"
    other.write_text(SMALL_INI.replace("steps = 40", "steps = 41"))
    code = cli.main(["benchmark", "--config", str(other), "--encoders", str(run_dir / "out" / "encoders.dple"),
                     "--out", str(tmp_path)])
    assert code == 2 and "produced by config" in capsys.readouterr().err
    with pytest.raises(FingerprintMismatch):
        cli.cmd_benchmark(parse_config(other), run_dir / "out" / "encoders.dple", tmp_path)


@pytest.mark.parametrize("batch", [1, 64])
def test_eval(run_dir, capsys, batch):
    out = run_dir / "out"
    code = cli.main(["eval", "--encoders", str(out / "encoders.dple"),
                     "--generator", str(out / "generators" / "dpl_D3_seed1.dplg"),
                     "--data", str(out / "data" / "D3.json"), "--batch", str(batch)])
    assert code == 0
    acc = float(capsys.readouterr().out.split()[-1])
    assert 0.0 <= acc <= 1.0


def test_eval_missing_file(run_dir, capsys):
    out = run_dir / "out"
    code = cli.main(["eval", "--encoders", str(out / "encoders.dple"), "--generator", str(out / "nope.dplg"),
                     "--data", str(out / "data" / "D3.json")])
    assert code == 2 and "not found" in capsys.readouterr().err


def test_report_partial_log(run_dir, tmp_path, capsys):
    lines = (run_dir / "out" / "trials.jsonl").read_text().splitlines()
    (tmp_path / "p.jsonl").write_text("\n".join(lines[:5]) + "\n")
    assert cli.main(["report", "--log", str(tmp_path / "p.jsonl"), "--out", str(tmp_path)]) == 2
    assert "partial" in capsys.readouterr().err


def test_out_dir_precedence(tmp_path, monkeypatch):
    cfg = parse_config_text(f"[run]\noutput_dir = {tmp_path / 'cfg'}\n")
    assert cli._out_dir(None, cfg) == tmp_path / "cfg"
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli._out_dir(None, cfg) == tmp_path / "env"
    assert cli._out_dir(str(tmp_path / "arg"), cfg) == tmp_path / "arg"


def test_env_out_dir_used_by_pretrain(tmp_path, monkeypatch):
    (tmp_path / "c.ini").write_text(SMALL_INI.replace("steps = 40", "steps = 2"))
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["pretrain", "--config", str(tmp_path / "c.ini")]) == 0
    assert (tmp_path / "env" / "encoders.dple").is_file()


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[world]\nwat = 1\n")
    assert cli.main(["pretrain", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path)]) == 2
    assert "c.ini:2" in capsys.readouterr().err
