import json

import pytest

from errors import ConfigError
from parameters import DdcConfig, EstimationConfig, PiecewiseSpec, RunConfig, TimeGrid


def test_defaults():
    config = EstimationConfig()
    assert (config.s_bar, config.tau, config.weight_regime) == (30, 60, 1)
    assert TimeGrid().horizon == 60
    assert PiecewiseSpec().exit_cuts == (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)


def test_estimation_config_needs_s_bar_within_tau():
    with pytest.raises(ConfigError) as err:
        EstimationConfig(s_bar=40, tau=30)
    assert err.value.fields == ("tau",)


@pytest.mark.parametrize("cuts", [(1.0, 5.0), (0.0, 5.0, 5.0), ()])
def test_piecewise_spec_rejects_bad_cuts(cuts):
    with pytest.raises(ConfigError):
        PiecewiseSpec(exit_cuts=cuts)


def test_piecewise_spec_new():
    spec = PiecewiseSpec.new(5.0, 3)
    assert spec.exit_cuts == spec.treat_cuts == (0.0, 5.0, 10.0)


def test_run_config_merges_file_and_flags(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"grid": {"unit": 7.0}, "estimation": {"s_bar": 10, "tau": 20}}), encoding="utf-8")
    run = RunConfig.new("gcomp", str(path), est_tau=25, grid_horizon=None, n_segments=4)
    assert run.grid.unit == 7.0
    assert run.grid.horizon == 60
    assert (run.estimation.s_bar, run.estimation.tau) == (10, 25)
    assert run.spec.exit_cuts == (0.0, 10.0, 20.0, 30.0)


def test_run_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"plots": {}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="plots"):
        RunConfig.new("gcomp", str(path))


def test_run_config_rejects_missing_input(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.new("gcomp", input_path=str(tmp_path / "absent.csv"))


def test_ddc_config_from_json(tmp_path):
    path = tmp_path / "ddc.json"
    path.write_text(json.dumps({"n_agents": 10, "a_range": [2, 4]}), encoding="utf-8")
    config = DdcConfig.from_json(path)
    assert config.n_agents == 10
    assert config.a_range == (2, 4)
    assert config.replace(seed=1).seed == 1
    assert config.pi(1) == 0.03


def test_run_config_rejects_unknown_output_format():
    with pytest.raises(ConfigError, match="output format"):
        RunConfig.new("gcomp", output_format="curves")
