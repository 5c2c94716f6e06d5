import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from main import cli
from spells import SpellData, write_spells

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ddc_smoke.json"


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def ph_file(tmp_path, ph_spells):
    path = tmp_path / "ph.csv"
    write_spells(ph_spells, path)
    return path


@pytest.fixture
def ph_config(tmp_path):
    path = tmp_path / "run.json"
    config = {
        "grid": {"horizon": 10},
        "spec": {"exit_cuts": [0], "treat_cuts": [0]},
        "schema": {"covariates": ["x0"]},
        "estimation": {"s_bar": 2, "tau": 5},
    }
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def test_gcomp_table(runner, spell_file):
    result = runner.invoke(cli, ["gcomp", str(spell_file), "--horizon", "3", "--s-bar", "2", "--tau", "2", "--empty-cell", "carry_forward"])
    assert result.exit_code == 0, result.output
    assert "beta_0" in result.output
    assert "0.667" in result.output
    assert "carried forward" in result.output


def test_gcomp_json(runner, spell_file, tmp_path):
    out = tmp_path / "gcomp.json"
    args = ["gcomp", str(spell_file), "--horizon", "3", "--s-bar", "2", "--tau", "2", "--empty-cell", "carry_forward", "--format", "json", "-o", str(out)]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["effects"]["beta_z"]["estimate"] == pytest.approx(-1 / 6)
    assert payload["sample_sizes"]["z=1,treated=1"] == 2


def test_gcomp_empty_cell_exit_code(runner, spell_file):
    result = runner.invoke(cli, ["gcomp", str(spell_file), "--horizon", "3", "--s-bar", "2", "--tau", "2"])
    assert result.exit_code == 4
    assert "t=2" in result.output


def test_gcomp_needs_both_regimes(runner, tmp_path):
    path = tmp_path / "one.csv"
    write_spells(SpellData.new(z=[0, 0], treat=[None, 1], exit=[1, 2], censor=[None, None]), path)
    result = runner.invoke(cli, ["gcomp", str(path), "--horizon", "3", "--s-bar", "1", "--tau", "2"])
    assert result.exit_code == 4
    assert "both regimes required" in result.output


def test_malformed_file_exit_code(runner, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,z,treat_time,exit_time,censor_time\na,0,,later,\n", encoding="utf-8")
    result = runner.invoke(cli, ["gcomp", str(path)])
    assert result.exit_code == 3


def test_unknown_config_field_exit_code(runner, spell_file, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"estimation": {"s_bar": 2, "lag": 1}}), encoding="utf-8")
    result = runner.invoke(cli, ["gcomp", str(spell_file), "--config", str(config)])
    assert result.exit_code == 2
    assert "lag" in result.output


def test_km_writes_curve_per_regime(runner, spell_file, tmp_path):
    result = runner.invoke(cli, ["km", str(spell_file), "--horizon", "3", "--output-dir", str(tmp_path / "curves")])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "curves" / "survival_z_0.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "period,value"
    assert len(lines) == 5
    assert (tmp_path / "curves" / "survival_z_1.csv").exists()


def test_km_treatment_curve(runner, spell_file, tmp_path):
    result = runner.invoke(cli, ["km", str(spell_file), "--horizon", "3", "--curve", "treatment", "--output-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "treatment_z_0.csv").exists()


def test_fit_then_decompose(runner, ph_file, ph_config, tmp_path):
    fit_path = tmp_path / "fit.json"
    result = runner.invoke(cli, ["fit", str(ph_file), "--config", str(ph_config), "-o", str(fit_path)])
    assert result.exit_code == 0, result.output
    assert json.loads(fit_path.read_text(encoding="utf-8"))["covariate_names"] == ["x0"]

    out = tmp_path / "report.json"
    result = runner.invoke(cli, ["decompose", str(ph_file), "--config", str(ph_config), "--fit", str(fit_path), "--format", "json", "-o", str(out)])
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert set(payload["effects"]) == {"beta_0", "beta_z", "beta_0s", "beta_z0s", "alpha_z"}
    assert payload["effects"]["beta_0"]["std_error"] > 0
    assert len(payload["beta_s"]) == 2


def test_fit_merges_empty_tail_on_request(runner, ph_file, ph_config, tmp_path):
    config = json.loads(ph_config.read_text(encoding="utf-8"))
    config["spec"] = {"exit_cuts": [0, 8, 16], "treat_cuts": [0, 5, 10]}
    config_path = tmp_path / "tail.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    fit_path = tmp_path / "fit.json"
    result = runner.invoke(cli, ["fit", str(ph_file), "--config", str(config_path), "-o", str(fit_path)])
    assert result.exit_code == 4
    result = runner.invoke(cli, ["fit", str(ph_file), "--config", str(config_path), "--merge-empty-tail", "-o", str(fit_path)])
    assert result.exit_code == 0, result.output
    spec = json.loads(fit_path.read_text(encoding="utf-8"))["spec"]
    assert spec["exit_cuts"] == [0.0] and spec["treat_cuts"] == [0.0]


def test_decompose_with_substrata(runner, ph_file, ph_config):
    result = runner.invoke(cli, ["decompose", str(ph_file), "--config", str(ph_config), "--substrata"])
    assert result.exit_code == 0, result.output
    assert "Substrata" in result.output
    assert "avg" in result.output


def test_decompose_singular_fit_exit_code(runner, tmp_path, ph_spells, ph_config):
    duplicated = SpellData.new(
        z=ph_spells.z,
        treat=[None if math.isnan(v) else v for v in ph_spells.treat],
        exit=[None if math.isnan(v) else v for v in ph_spells.exit],
        censor=[None if math.isnan(v) else v for v in ph_spells.censor],
        x=np.column_stack([ph_spells.x, ph_spells.x]),
        covariate_names=["x0", "x1"],
    )
    path = tmp_path / "dup.csv"
    write_spells(duplicated, path)
    config = json.loads(ph_config.read_text(encoding="utf-8"))
    config["schema"]["covariates"] = ["x0", "x1"]
    config_path = tmp_path / "dup.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    result = runner.invoke(cli, ["decompose", str(path), "--config", str(config_path)])
    assert result.exit_code == 5


def test_substrata_command(runner, spell_file):
    result = runner.invoke(cli, ["substrata", str(spell_file), "--horizon", "3", "--s-bar", "2", "--tau", "3", "--empty-cell", "carry_forward", "--s", "1"])
    assert result.exit_code == 0, result.output
    assert "pr_as" in result.output


def test_simulate_smoke(runner, tmp_path):
    out = tmp_path / "sim.csv"
    result = runner.invoke(cli, ["simulate", "--config", str(SMOKE_CONFIG), "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert len(out.read_text(encoding="utf-8").splitlines()) == 11
    reservations = json.loads((tmp_path / "sim.csv.reservations.json").read_text(encoding="utf-8"))
    assert len(reservations["cells"]) == 18
    assert "treated share Z=1" in result.output


def test_verbose_flag(runner, spell_file):
    result = runner.invoke(cli, ["-v", "gcomp", str(spell_file), "--horizon", "3", "--s-bar", "2", "--tau", "2", "--empty-cell", "carry_forward"])
    assert result.exit_code == 0, result.output
