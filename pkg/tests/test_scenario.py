import numpy as np
import pytest

from stochquant.scenario import (EXPERIMENTS, ScenarioParseError, ScenarioValidationError,
                                 bundled_path, list_scenarios, load, parse_text, read_number,
                                 validate)

BORN = """
name: tiny-born
experiment: born-rule
seed: 3
system: {potential: harmonic}
initial: {kind: sho-ground}
grid: {extent: 16.0, n_points: 128}
propagator: {method: split-step, dt_solver: 1.0e-3}
model: {lambda_mag: 1.0, dt: 1.0e-3}
ensemble: {n: 500}
checkpoints: [0.0, 0.01]
"""


def raw(**over):
    r = parse_text(BORN)
    r.update(over)
    return r


def test_valid_scenario_resolves():
    sc = validate(raw())
    assert sc.grid.n_points == (128,)
    assert sc.model.tau_xi == pytest.approx(1e-2)
    assert sc.n == 500 and sc.checkpoints == [0.0, 0.01]
    echo = sc.resolved()
    assert echo["system"]["name"] == "harmonic"
    assert echo["model"]["tau_lambda"] == "inf"


@pytest.mark.parametrize("over,location", [
    ({"seed": None}, "seed"),
    ({"system": {"potential": "morse"}}, "system.potential"),
    ({"grid": {"extent": 16.0, "n_points": 100}}, "grid.n_points"),
    ({"model": {"lambda_mag": 1.0, "dt": 1e-3, "tau_xi": 5e-3}}, "model"),
    ({"propagator": {"method": "split-step", "dt_solver": 1e-2}}, "propagator.dt_solver"),
    ({"initial": {"kind": "cat"}}, "initial.kind"),
    ({"experiment": "teleport"}, "experiment"),
    ({"colour": "blue"}, "colour"),
    ({"outputs": ["movies"]}, "outputs"),
])
def test_validation_errors_name_the_field(over, location):
    r = raw(**over)
    if over.get("seed", 0) is None:
        del r["seed"]
    with pytest.raises(ScenarioValidationError) as info:
        validate(r)
    assert info.value.location == location
    assert str(info.value).startswith(location)


def test_hierarchy_message():
    with pytest.raises(ScenarioValidationError, match="hierarchy"):
        validate(raw(model={"lambda_mag": 1.0, "dt": 1e-3, "tau_xi": 5e-3}))


def test_missing_section_for_experiment():
    r = raw()
    del r["checkpoints"]
    with pytest.raises(ScenarioValidationError, match="checkpoints"):
        validate(r)


def test_parse_errors(tmp_path):
    with pytest.raises(ScenarioParseError):
        parse_text("a: [1, 2")
    with pytest.raises(ScenarioParseError):
        parse_text("- just\n- a list\n")
    with pytest.raises(ScenarioParseError):
        load(str(tmp_path / "missing.yaml"))


def test_read_number():
    assert read_number("2*pi") == pytest.approx(2 * np.pi)
    assert read_number("0.5*sqrt(2)") == pytest.approx(np.sqrt(0.5))
    assert read_number(3) == 3.0
    with pytest.raises(ScenarioValidationError):
        read_number("__import__('os')")


def test_bundled_scenarios_all_validate():
    entries = list_scenarios()
    assert len(entries) >= 8
    kinds = {e["experiment"] for e in entries}
    assert kinds == set(EXPERIMENTS)
    for e in entries:
        sc = load(e["name"])
        assert sc.name == e["name"]
        assert bundled_path(e["name"] + ".yaml") is not None
