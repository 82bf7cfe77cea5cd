import csv
import json

import numpy as np
import pytest

from stochquant import cli, runner
from stochquant.fields import VortexError
from stochquant.scenario import load, parse_text, validate

from .test_scenario import BORN


@pytest.fixture
def born_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(BORN)
    return path


def test_list(capsys):
    assert cli.main(["list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 8
    assert any(line.startswith("deviation-law") for line in lines)


def test_validate_ok(born_file, capsys):
    assert cli.main(["validate", str(born_file)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok")
    assert json.loads(out[3:])["name"] == "tiny-born"


def test_exit_codes_for_bad_input(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    assert cli.main(["run", str(bad)]) == runner.EXIT_PARSE
    assert cli.main(["run", str(tmp_path / "nope.yaml")]) == runner.EXIT_PARSE
    wrong = tmp_path / "wrong.yaml"
    wrong.write_text(BORN.replace("dt: 1.0e-3}", "dt: 1.0e-3, tau_xi: 1.0e-4}"))
    assert cli.main(["run", str(wrong)]) == runner.EXIT_VALIDATION
    assert "hierarchy" in capsys.readouterr().err


def test_run_writes_outputs(born_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", str(born_file), "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 0, text
    assert "[PASS]" in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["exit_code"] == 0
    for key in ("scenario", "versions", "wall_time_s", "rng_scheme", "verdicts", "files"):
        assert key in manifest
    assert manifest["scenario"]["seed"] == 3
    for entry in manifest["files"]:
        assert (out / entry["path"]).exists(), entry["path"]
    kinds = {e["kind"] for e in manifest["files"]}
    assert {"csv", "json", "png"} <= kinds
    csv_entry = next(e for e in manifest["files"] if e["kind"] == "csv")
    with open(out / csv_entry["path"]) as fh:
        header = next(csv.reader(fh))
    assert header == list(csv_entry["columns"])


def test_seed_override_and_env_default(born_file, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", str(born_file), "--seed", "11"]) == 0
    manifest = json.loads((tmp_path / "env" / "tiny-born" / "manifest.json").read_text())
    assert manifest["scenario"]["seed"] == 11


def test_rerun_is_bitwise_identical(born_file, tmp_path):
    sc = load(str(born_file))
    runner.run_scenario(sc, tmp_path / "a")
    runner.run_scenario(sc, tmp_path / "b", workers=2)
    assert runner.numeric_digest(tmp_path / "a") == runner.numeric_digest(tmp_path / "b")


def test_data_only_outputs(tmp_path):
    r = parse_text(BORN)
    r["outputs"] = ["data"]
    res = runner.run_scenario(validate(r), tmp_path)
    assert res.passed
    assert not list(tmp_path.glob("*.png"))


def test_numerical_abort_exit_code(born_file, tmp_path, monkeypatch):
    def boom(ctx):
        raise VortexError("synthetic")

    monkeypatch.setitem(runner.EXPERIMENT_FUNCS, "born-rule", boom)
    assert cli.main(["run", str(born_file), "--out", str(tmp_path)]) == runner.EXIT_NUMERICAL
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "numerical-abort"
    assert "VortexError" in manifest["diagnostics"]


def test_failed_verdict_exit_code(born_file, tmp_path, monkeypatch):
    def failing(ctx):
        ctx.verdict("always fails", 1.0, "< 0", False)

    monkeypatch.setitem(runner.EXPERIMENT_FUNCS, "born-rule", failing)
    res = runner.run_scenario(load(str(born_file)), tmp_path)
    assert res.exit_code == runner.EXIT_VERDICT
    assert json.loads((tmp_path / "verdicts.json").read_text())[0]["passed"] is False


def test_csv_full_precision(tmp_path):
    w = runner.OutputWriter(tmp_path)
    x = np.array([np.pi, 1 / 3, 1e-300])
    w.csv("x.csv", {"x": x, "label": ["a", "b", "c"], "k": np.arange(3)}, "test")
    rows = list(csv.DictReader(open(tmp_path / "x.csv")))
    assert [float(r["x"]) for r in rows] == x.tolist()
    assert [r["k"] for r in rows] == ["0", "1", "2"]
    with pytest.raises(ValueError):
        w.csv("x.csv", {"x": x}, "again")
    with pytest.raises(ValueError):
        w.csv("y.csv", {"x": x, "y": x[:2]}, "ragged")
