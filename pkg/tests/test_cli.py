import csv
import json

import pytest

from heatbeam.cli import COMMANDS, ConfigError, RunConfig, build_parser, main, run
from heatbeam.weights import alpha_star

SMALL = ["--n-points", "16", "--n-layers", "9"]


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_alpha_star_prints_and_writes(tmp_path, capsys):
    assert main(["alpha-star", "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    consts = alpha_star()
    assert f"beta_star = {consts['beta_star']:.17g}" in out
    assert "PASS window_flips_at_alpha_star" in out
    rows = read_csv(tmp_path / "alpha_star.csv")
    assert rows[0] == ["beta_star", "alpha_star", "config_hash"]
    assert float(rows[1][1]) == consts["alpha_star"]


def test_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["hum", *SMALL, "--T", "0.5", "--seed", "4", "--output", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "hum.csv").read_bytes() == (tmp_path / "b" / "hum.csv").read_bytes()


def test_manifest_records_the_run(tmp_path):
    assert main(["simulate", *SMALL, "--T", "0.25", "--seed", "9", "--output", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("command", "config", "config_text", "config_hash", "calibration_version", "seed", "timestamp",
                "artifacts", "assertions", "passed"):
        assert key in manifest
    assert manifest["command"] == "simulate" and manifest["seed"] == 9 and manifest["passed"]
    rows = read_csv(tmp_path / "trajectory.csv")
    assert {row[-1] for row in rows[1:]} == {manifest["config_hash"]}


def test_config_hash_ignores_output_directory():
    a = RunConfig(experiment="hum", output="x")
    b = RunConfig(experiment="hum", output="y")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != RunConfig(experiment="hum", alpha=2.0).config_hash()


def test_config_file_roundtrip(tmp_path):
    cfg = RunConfig(experiment="hum", alpha=2.5, T=0.75, seed=3, n_points=16, n_layers=9)
    path = tmp_path / "run.cfg"
    path.write_text(cfg.dump())
    loaded = RunConfig.from_file(path, "hum")
    assert loaded.config_hash() == cfg.config_hash()


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(RunConfig(experiment="alpha-star", seed=3).dump())
    assert main(["alpha-star", "--config", str(path), "--seed", "5", "--output", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 5


def test_unknown_config_section_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[nonsense]\nfoo = 1\n")
    assert main(["alpha-star", "--config", str(path), "--output", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_grid_is_a_config_error(tmp_path):
    assert main(["simulate", "--n-points", "7", "--output", str(tmp_path)]) == 2
    with pytest.raises(ConfigError):
        run(RunConfig(experiment="simulate", n_points=7, output=str(tmp_path)))


def test_inadmissible_theorem_is_a_config_error(tmp_path):
    assert main(["audit-beam", "--theorem", "1.7", "--alpha", "0", "--output", str(tmp_path)]) == 2


def test_malformed_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["hum", "--alpha", "abc"])
    assert info.value.code == 2


def test_single_ibp_pair(tmp_path):
    assert main(["audit-ibp", "--i", "1", "--j", "1", "--n-samples", "1", "--output", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "ibp.csv")
    assert [row[1:3] for row in rows[1:]] == [["1", "1"]]
    assert float(rows[1][7]) <= 1e-7


def test_heat_audit_runs_end_to_end(tmp_path):
    code = main(["audit-heat", "--n-samples", "2", "--n-calibration", "2", "--n-t", "32", "--output", str(tmp_path)])
    assert code in (0, 1)
    rows = read_csv(tmp_path / "heat.csv")
    assert len(rows) == 5


def test_every_command_has_a_subparser():
    parser = build_parser()
    for name in COMMANDS:
        assert parser.parse_args([name]).experiment == name
