from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
import json
import math
import re

import numpy as np
import pandas as pd

from effects import DecompositionResult
from nonparam import GcompEstimates, SurvivalCurve

LABELS = {
    "beta_0": "beta_0",
    "beta_z": "beta_z",
    "beta_0s": "beta_(0,s]",
    "beta_z0s": "beta_z(0,s]",
    "alpha_z": "alpha_z",
}

# effects reported as a share of the base exit probability 1 - beta_0
PERCENT_OF_BASE = ("beta_z", "beta_0s", "beta_z0s")


def _num(v: float | None, fmt: str = "{:.3f}") -> str:
    return "" if v is None or (isinstance(v, float) and not math.isfinite(v)) else fmt.format(v)


@dataclass(frozen=True)
class EffectRow:
    key: str
    estimate: float
    std_error: float | None = None
    p_value: float | None = None


@dataclass(frozen=True)
class ReportBuilder:
    """
    Builds the decomposition report.

    Responsibilities:
    - Lay out effects with standard errors in parentheses and p-values in brackets
    - Add percent-of-base columns and the sample-size block
    - Emit the same numbers as delimited text or JSON
    """

    title: str
    rows: tuple[EffectRow, ...]
    sample_sizes: dict[str, int] = field(default_factory=dict)
    notes: tuple[str, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)
    substrata: pd.DataFrame | None = None

    @property
    def base_rate(self) -> float | None:
        for row in self.rows:
            if row.key == "beta_0":
                return 1.0 - row.estimate
        return None

    def percent_of_base(self, row: EffectRow) -> float | None:
        base = self.base_rate
        if row.key not in PERCENT_OF_BASE or not base:
            return None
        return 100.0 * row.estimate / base

    def table_lines(self) -> list[str]:
        lines = [self.title, f"{'':<14}{'Estimate':>12}{'% of base':>12}"]
        for row in self.rows:
            lines.append(f"{LABELS.get(row.key, row.key):<14}{_num(row.estimate):>12}{_num(self.percent_of_base(row), '{:.1f}'):>12}")
            if row.std_error is not None:
                lines.append(f"{'':<14}{'(' + _num(row.std_error) + ')':>12}")
            if row.p_value is not None:
                lines.append(f"{'':<14}{'[' + _num(row.p_value) + ']':>12}")
        if self.sample_sizes:
            lines.append("")
            for key, count in self.sample_sizes.items():
                lines.append(f"N {key:<20}{count:>6}")
        if self.substrata is not None:
            lines.append("")
            lines.append("Substrata")
            lines.append(self.substrata.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        lines.extend(self.notes)
        return lines

    def table(self) -> str:
        return "\n".join(self.table_lines()) + "\n"

    def delimited(self, delimiter: str = ",") -> str:
        frame = pd.DataFrame(
            [
                {
                    "effect": row.key,
                    "estimate": row.estimate,
                    "std_error": row.std_error,
                    "p_value": row.p_value,
                    "percent_of_base": self.percent_of_base(row),
                }
                for row in self.rows
            ]
        )
        return frame.to_csv(sep=delimiter, index=False, lineterminator="\n", na_rep="")

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.extra)
        out |= {
            "title": self.title,
            "effects": {
                row.key: {"estimate": row.estimate, "std_error": row.std_error, "p_value": row.p_value, "percent_of_base": self.percent_of_base(row)} for row in self.rows
            },
            "sample_sizes": dict(self.sample_sizes),
        }
        return _json_safe(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def write(self, path: str | Path, output_format: str = "table") -> None:
        path = Path(path)
        if output_format == "json":
            text = self.to_json()
        elif path.suffix in (".csv", ".tsv"):
            text = self.delimited("\t" if path.suffix == ".tsv" else ",")
        else:
            text = self.table()
        path.write_text(text, encoding="utf-8")

    @classmethod
    def from_decomposition(cls, result: DecompositionResult, notes: tuple[str, ...] = ()) -> ReportBuilder:
        rows = tuple(EffectRow(k, result.estimates[k], result.std_errors.get(k), result.p_values.get(k)) for k in result.estimates)
        title = f"Causal effect decomposition (tau={result.tau}, s in (0,{result.s_bar}], weights from Z={result.weight_regime})"
        return cls(title=title, rows=rows, sample_sizes=result.sample_sizes, notes=notes, extra=result.to_dict(), substrata=result.substrata)

    @classmethod
    def from_gcomp(cls, estimates: GcompEstimates, sample_sizes: dict[str, int], std_errors: dict[str, float] | None = None) -> ReportBuilder:
        std_errors = std_errors or {}
        rows = tuple(EffectRow(k, v, std_errors.get(k)) for k, v in estimates.effects().items())
        notes = []
        if estimates.no_treatment:
            notes.append("no treated spells: treatment effects are undefined")
        if estimates.imputed_cells:
            cells = ", ".join(f"(t={t}, z={z}, {s})" for t, z, s in estimates.imputed_cells)
            notes.append(f"empty cells carried forward with survival 1: {cells}")
        title = f"g-computation decomposition (tau={estimates.tau}, s in (0,{estimates.s_bar}], weights from Z={estimates.weight_regime})"
        return cls(title=title, rows=rows, sample_sizes=sample_sizes, notes=tuple(notes), extra=estimates.to_dict())


def _json_safe(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def curve_file_name(prefix: str, label: str) -> str:
    return f"{prefix}_{re.sub(r'[^A-Za-z0-9]+', '_', label).strip('_') or 'all'}.csv"


def write_curves(curves: list[SurvivalCurve], directory: str | Path, prefix: str = "km") -> list[Path]:
    """One two-column (period, value) file per curve."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for curve in curves:
        path = directory / curve_file_name(prefix, curve.label)
        curve.write(path)
        paths.append(path)
    return paths
