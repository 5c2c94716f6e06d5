import json
import math

import numpy as np
import pytest

from nonparam import SurvivalCurve
from report import curve_file_name, EffectRow, ReportBuilder, write_curves


@pytest.fixture
def builder() -> ReportBuilder:
    rows = (
        EffectRow("beta_0", 0.6, 0.01, 0.0),
        EffectRow("beta_z", -0.04, 0.02, 0.045),
        EffectRow("beta_0s", -0.1, None, None),
        EffectRow("alpha_z", math.nan),
    )
    return ReportBuilder(title="test", rows=rows, sample_sizes={"z=0,treated=0": 10})


def test_percent_of_base(builder):
    assert builder.base_rate == pytest.approx(0.4)
    assert builder.percent_of_base(builder.rows[1]) == pytest.approx(-10.0)
    assert builder.percent_of_base(builder.rows[0]) is None


def test_table_layout(builder):
    lines = builder.table_lines()
    assert lines[0] == "test"
    assert any(line.strip() == "(0.010)" for line in lines)
    assert any(line.strip() == "[0.045]" for line in lines)
    assert lines[-1].startswith("N z=0,treated=0")


def test_json_replaces_nan_with_null(builder):
    payload = json.loads(builder.to_json())
    assert payload["effects"]["alpha_z"]["estimate"] is None
    assert payload["effects"]["beta_z"]["percent_of_base"] == pytest.approx(-10.0)


def test_delimited(builder):
    text = builder.delimited("\t")
    assert text.splitlines()[0] == "effect\testimate\tstd_error\tp_value\tpercent_of_base"
    assert len(text.splitlines()) == 5


def test_write_picks_format_from_suffix(builder, tmp_path):
    builder.write(tmp_path / "r.csv")
    builder.write(tmp_path / "r.txt")
    assert (tmp_path / "r.csv").read_text(encoding="utf-8").startswith("effect,")
    assert (tmp_path / "r.txt").read_text(encoding="utf-8").startswith("test\n")


def test_write_curves(tmp_path):
    curve = SurvivalCurve(periods=np.arange(3), values=np.array([1.0, 0.5, 0.25]), at_risk=np.array([4, 4, 2]), events=np.array([0, 2, 1]), std_err=np.zeros(3), label="z=1")
    (path,) = write_curves([curve], tmp_path, prefix="km")
    assert path.name == curve_file_name("km", "z=1") == "km_z_1.csv"
    assert path.read_text(encoding="utf-8").splitlines() == ["period,value", "0,1.0", "1,0.5", "2,0.25"]
