from __future__ import annotations
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator
import logging
import math

import numpy as np
import pandas as pd

from errors import HorizonError, SpellFormatError, SpellValidationError
from parameters import SpellSchema, TimeGrid

logger = logging.getLogger(__name__)

# relative slack when deciding whether time / unit already sits on a period boundary
_BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class SpellRecord:
    """One subject's stay in the initial state: regime, optional treatment time and one terminal event."""

    id: str
    regime: int
    treat_time: float | None
    exit_time: float | None
    censor_time: float | None
    covariates: tuple[int, ...] = ()

    @property
    def terminal_time(self) -> float:
        return self.exit_time if self.exit_time is not None else self.censor_time

    @property
    def exited(self) -> bool:
        return self.exit_time is not None

    @property
    def treated(self) -> bool:
        return self.treat_time is not None


def _check_record(regime: float, treat: float, exit_: float, censor: float, x: np.ndarray) -> str | None:
    """Returns the reason a record is invalid, or None. Missing times are NaN."""
    if regime not in (0, 1):
        return f"regime must be 0 or 1, got {regime:g}"
    has_exit, has_censor = not math.isnan(exit_), not math.isnan(censor)
    if has_exit == has_censor:
        return "exactly one of exit time and censor time must be present"
    terminal = exit_ if has_exit else censor
    if not terminal > 0:
        return "terminal time must be positive"
    if not math.isnan(treat):
        if not treat > 0:
            return "treatment time must be positive"
        if treat > terminal:
            return "treatment after terminal event"
    if x.size and not np.all((x == 0) | (x == 1)):
        return "covariates must be binary indicators"
    return None


@dataclass(frozen=True)
class SpellData:
    """
    Column-wise spell dataset. Absent times are NaN.

    Responsibilities:
    - Hold validated spells as numpy arrays for vectorized estimation
    - Expose row-wise SpellRecord views
    - Provide the resampling / relabeling used by inference and checks
    """

    ids: np.ndarray
    z: np.ndarray
    treat: np.ndarray
    exit: np.ndarray
    censor: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = ()
    discretized: bool = False

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.x.shape[1])

    @property
    def exited(self) -> np.ndarray:
        return ~np.isnan(self.exit)

    @property
    def treated(self) -> np.ndarray:
        return ~np.isnan(self.treat)

    @property
    def terminal(self) -> np.ndarray:
        return np.where(self.exited, self.exit, self.censor)

    def __len__(self) -> int:
        return self.n

    def records(self) -> Iterator[SpellRecord]:
        def opt(v: float) -> float | None:
            return None if math.isnan(v) else float(v)

        for i in range(self.n):
            yield SpellRecord(
                id=str(self.ids[i]),
                regime=int(self.z[i]),
                treat_time=opt(self.treat[i]),
                exit_time=opt(self.exit[i]),
                censor_time=opt(self.censor[i]),
                covariates=tuple(int(v) for v in self.x[i]),
            )

    def subset(self, index: np.ndarray) -> SpellData:
        """Rows selected by a boolean mask or an integer index (repeats allowed)."""
        return replace(
            self,
            ids=self.ids[index],
            z=self.z[index],
            treat=self.treat[index],
            exit=self.exit[index],
            censor=self.censor[index],
            x=self.x[index],
        )

    def resample(self, rng: np.random.Generator) -> SpellData:
        return self.subset(rng.integers(0, self.n, size=self.n))

    def swap_regimes(self) -> SpellData:
        return replace(self, z=1 - self.z)

    def without_covariates(self) -> SpellData:
        return replace(self, x=np.zeros((self.n, 0)), covariate_names=())

    def equals(self, other: SpellData) -> bool:
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self.ids.astype(str), other.ids.astype(str))
            and np.array_equal(self.z, other.z)
            and all(np.array_equal(a, b, equal_nan=True) for a, b in ((self.treat, other.treat), (self.exit, other.exit), (self.censor, other.censor)))
            and np.array_equal(self.x, other.x)
        )

    @classmethod
    def new(
        cls,
        z: Iterable[int],
        treat: Iterable[float | None],
        exit: Iterable[float | None],
        censor: Iterable[float | None],
        x: np.ndarray | None = None,
        ids: Iterable[str] | None = None,
        covariate_names: Iterable[str] | None = None,
        discretized: bool = False,
    ) -> SpellData:
        """Builds a dataset from columns; any invariant violation raises SpellValidationError."""

        def as_times(values: Iterable[float | None]) -> np.ndarray:
            return np.array([np.nan if v is None else float(v) for v in values], dtype=float)

        z_raw = np.asarray(list(z), dtype=float)
        n = z_raw.shape[0]
        treat_arr, exit_arr, censor_arr = as_times(treat), as_times(exit), as_times(censor)
        x_arr = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
        ids_arr = np.array([str(i) for i in range(n)] if ids is None else [str(i) for i in ids], dtype=object)
        names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{k}" for k in range(x_arr.shape[1]))

        if not (treat_arr.shape[0] == exit_arr.shape[0] == censor_arr.shape[0] == ids_arr.shape[0] == n):
            raise SpellValidationError("spell columns have different lengths", row=0)
        if len(names) != x_arr.shape[1]:
            raise SpellValidationError("covariate names do not match the covariate matrix", row=0)
        for i in range(n):
            reason = _check_record(float(z_raw[i]), treat_arr[i], exit_arr[i], censor_arr[i], x_arr[i])
            if reason is not None:
                raise SpellValidationError(reason, record_id=ids_arr[i])
        return cls(ids=ids_arr, z=z_raw.astype(int), treat=treat_arr, exit=exit_arr, censor=censor_arr, x=x_arr, covariate_names=names, discretized=discretized)

    @classmethod
    def from_records(cls, records: Iterable[SpellRecord], covariate_names: Iterable[str] | None = None) -> SpellData:
        records = list(records)
        widths = {len(r.covariates) for r in records}
        if len(widths) > 1:
            raise SpellValidationError("covariate vector length differs across records", row=0)
        p = widths.pop() if widths else 0
        return cls.new(
            z=[r.regime for r in records],
            treat=[r.treat_time for r in records],
            exit=[r.exit_time for r in records],
            censor=[r.censor_time for r in records],
            x=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            ids=[r.id for r in records],
            covariate_names=covariate_names,
        )


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_accepted: int
    rejects: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejects)


def _parse_column(frame: pd.DataFrame, column: str, integral: bool = False) -> np.ndarray:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw.where(raw != ""), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(values) & (raw != "").to_numpy())
    if bad.size:
        row = int(bad[0])
        raise SpellFormatError(f"column {column!r} value {frame[column].iloc[row]!r} is not a number", row=row)
    negative = np.flatnonzero(values < 0)
    if negative.size:
        raise SpellFormatError(f"column {column!r} holds a negative value", row=int(negative[0]))
    if integral:
        missing = np.flatnonzero(np.isnan(values))
        if missing.size:
            raise SpellFormatError(f"column {column!r} is empty", row=int(missing[0]))
    return values


def load_spells(path: str | Path, schema: SpellSchema) -> tuple[SpellData, LoadReport]:
    """
    Read a delimited spell file (UTF-8, header row, empty field = missing).

    Rows that do not parse raise SpellFormatError carrying the 0-based data row
    index; rows that parse but violate a spell invariant are rejected and listed
    in the returned LoadReport.
    """
    try:
        frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise SpellFormatError(f"spell file not found: {path}") from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SpellFormatError(f"cannot parse {path}: {exc}") from exc

    missing = [c for c in schema.columns if c not in frame.columns]
    if missing:
        raise SpellFormatError(f"declared column(s) missing from {path}: {', '.join(missing)}")

    z = _parse_column(frame, schema.regime, integral=True)
    treat = _parse_column(frame, schema.treat_time)
    exit_ = _parse_column(frame, schema.exit_time)
    censor = _parse_column(frame, schema.censor_time)
    x = np.column_stack([_parse_column(frame, c, integral=True) for c in schema.covariates]) if schema.covariates else np.zeros((len(frame), 0))
    ids = frame[schema.id].str.strip().to_numpy(dtype=object)

    keep = np.ones(len(frame), dtype=bool)
    rejects: list[tuple[int, str, str]] = []
    for i in range(len(frame)):
        reason = _check_record(float(z[i]), treat[i], exit_[i], censor[i], x[i])
        if reason is not None:
            keep[i] = False
            rejects.append((i, str(ids[i]), reason))

    data = SpellData(ids=ids[keep], z=z[keep].astype(int), treat=treat[keep], exit=exit_[keep], censor=censor[keep], x=x[keep], covariate_names=schema.covariates)
    report = LoadReport(n_rows=len(frame), n_accepted=data.n, rejects=rejects)
    logger.info("loaded %d spells from %s (%d rejected)", report.n_accepted, path, report.n_rejected)
    for row, rid, reason in rejects:
        logger.debug("rejected row %d (%s): %s", row, rid, reason)
    return data, report


def write_spells(data: SpellData, path: str | Path, schema: SpellSchema | None = None) -> None:
    if schema is None:
        schema = SpellSchema(covariates=data.covariate_names)
    if len(schema.covariates) != data.n_covariates:
        raise SpellFormatError(f"schema declares {len(schema.covariates)} covariates, dataset has {data.n_covariates}")

    columns = {
        schema.id: data.ids.astype(str),
        schema.regime: data.z.astype(int),
        schema.treat_time: data.treat,
        schema.exit_time: data.exit,
        schema.censor_time: data.censor,
    }
    for k, name in enumerate(schema.covariates):
        columns[name] = data.x[:, k].astype(int)
    frame = pd.DataFrame(columns)
    frame.to_csv(path, sep=schema.delimiter, index=False, na_rep="", encoding="utf-8", lineterminator="\n")


def _to_periods(times: np.ndarray, unit: float) -> np.ndarray:
    q = times / unit
    nearest = np.round(q)
    on_boundary = np.abs(q - nearest) <= _BOUNDARY_TOL * np.maximum(1.0, np.abs(q))
    return np.where(on_boundary, nearest, np.ceil(q))


def discretize(data: SpellData, grid: TimeGrid) -> SpellData:
    """
    Map every time onto its period index ceil(time / unit). A treatment that
    falls in the same period as the terminal event stays in that period and is
    taken to happen before the exit decision.
    """
    treat, exit_, censor = (_to_periods(a, grid.unit) for a in (data.treat, data.exit, data.censor))
    terminal = np.where(np.isnan(exit_), censor, exit_)
    beyond = np.flatnonzero(terminal > grid.horizon)
    if beyond.size:
        i = int(beyond[0])
        raise HorizonError(f"record {data.ids[i]!r} ends in period {int(terminal[i])}, beyond the grid horizon {grid.horizon}")
    return replace(data, treat=treat, exit=exit_, censor=censor, discretized=True)


@dataclass(frozen=True)
class RiskSetTable:
    """
    Period-by-period counts per regime (first axis z), periods indexed 0..horizon+1.

    entering[z, t]       untreated and still present at the start of t (S >= t, T >= t)
    treatments[z, t]     of those, treated in t (before the exit decision)
    exits[z, t]          untreated exits in t
    censorings[z, t]     untreated censored in t (censoring counts as surviving t)
    cohort_at_risk[z, s, t], cohort_exits[z, s, t], cohort_censorings[z, s, t]
                         the same for subjects treated in period s, t >= s
    """

    horizon: int
    n: np.ndarray
    entering: np.ndarray
    treatments: np.ndarray
    exits: np.ndarray
    censorings: np.ndarray
    cohort_at_risk: np.ndarray
    cohort_exits: np.ndarray
    cohort_censorings: np.ndarray

    @property
    def untreated_at_risk(self) -> np.ndarray:
        """Counts for the conditioning set S > t, T >= t."""
        return self.entering - self.treatments

    def survivors(self) -> np.ndarray:
        """Per regime, subjects still under observation after the horizon."""
        untreated = self.entering[:, self.horizon + 1]
        treated = self.cohort_at_risk[:, :, self.horizon + 1].sum(axis=1)
        return untreated + treated

    def censored_in(self, t: int) -> int:
        return int(self.censorings[:, t].sum() + self.cohort_censorings[:, :, t].sum())

    def check_conservation(self) -> bool:
        total = self.exits.sum(axis=1) + self.censorings.sum(axis=1) + self.cohort_exits.sum(axis=(1, 2)) + self.cohort_censorings.sum(axis=(1, 2)) + self.survivors()
        return bool(np.array_equal(total, self.n))

    def __add__(self, other: RiskSetTable) -> RiskSetTable:
        if other.horizon != self.horizon:
            raise ValueError("cannot merge risk tables built on different horizons")
        return RiskSetTable(
            horizon=self.horizon,
            n=self.n + other.n,
            entering=self.entering + other.entering,
            treatments=self.treatments + other.treatments,
            exits=self.exits + other.exits,
            censorings=self.censorings + other.censorings,
            cohort_at_risk=self.cohort_at_risk + other.cohort_at_risk,
            cohort_exits=self.cohort_exits + other.cohort_exits,
            cohort_censorings=self.cohort_censorings + other.cohort_censorings,
        )


def _build_one(data: SpellData, horizon: int) -> RiskSetTable:
    L = horizon + 2
    n = np.zeros(2, dtype=np.int64)
    entering = np.zeros((2, L), dtype=np.int64)
    treatments = np.zeros((2, L), dtype=np.int64)
    exits = np.zeros((2, L), dtype=np.int64)
    censorings = np.zeros((2, L), dtype=np.int64)
    cohort_at_risk = np.zeros((2, L, L), dtype=np.int64)
    cohort_exits = np.zeros((2, L, L), dtype=np.int64)
    cohort_censorings = np.zeros((2, L, L), dtype=np.int64)

    terminal = data.terminal.astype(np.int64)
    exited = data.exited
    treated = data.treated
    s = np.where(treated, np.nan_to_num(data.treat, nan=0.0), 0).astype(np.int64)

    for z in (0, 1):
        mask = data.z == z
        n[z] = mask.sum()

        # untreated stratum: present at the start of t while t <= min(S, T)
        last_untreated = np.where(treated[mask], s[mask], terminal[mask])
        entering[z] = np.bincount(last_untreated, minlength=L)[::-1].cumsum()[::-1][:L]
        treatments[z] = np.bincount(s[mask & treated], minlength=L)[:L]
        exits[z] = np.bincount(terminal[mask & exited & ~treated], minlength=L)[:L]
        censorings[z] = np.bincount(terminal[mask & ~exited & ~treated], minlength=L)[:L]

        # treated cohorts: at risk from s through the terminal period
        cm = mask & treated
        diff = np.zeros((L, L + 1), dtype=np.int64)
        np.add.at(diff, (s[cm], s[cm]), 1)
        np.add.at(diff, (s[cm], terminal[cm] + 1), -1)
        cohort_at_risk[z] = diff.cumsum(axis=1)[:, :L]
        np.add.at(cohort_exits[z], (s[cm & exited], terminal[cm & exited]), 1)
        np.add.at(cohort_censorings[z], (s[cm & ~exited], terminal[cm & ~exited]), 1)

    return RiskSetTable(
        horizon=horizon,
        n=n,
        entering=entering,
        treatments=treatments,
        exits=exits,
        censorings=censorings,
        cohort_at_risk=cohort_at_risk,
        cohort_exits=cohort_exits,
        cohort_censorings=cohort_censorings,
    )


def build_risk_sets(data: SpellData, grid: TimeGrid, n_chunks: int = 1) -> RiskSetTable:
    """
    Count the conditioning sets of the g-computation formulas on a discretized
    dataset. With n_chunks > 1 rows are split into contiguous partitions whose
    tables are merged in partition order.
    """
    if not data.discretized:
        raise HorizonError("build_risk_sets needs a discretized dataset; call discretize() first")
    if data.n and float(np.max(data.terminal)) > grid.horizon:
        raise HorizonError(f"dataset extends beyond the grid horizon {grid.horizon}")

    parts = np.array_split(np.arange(data.n), max(1, n_chunks))
    table = _build_one(data.subset(parts[0]), grid.horizon)
    for part in parts[1:]:
        table = table + _build_one(data.subset(part), grid.horizon)
    return table


def sample_sizes(data: SpellData) -> dict[tuple[int, bool], int]:
    """Number of spells per (regime, ever treated)."""
    return {(z, tr): int(np.sum((data.z == z) & (data.treated == tr))) for z in (0, 1) for tr in (False, True)}


def overlap_report(table: RiskSetTable, s_bar: int) -> pd.DataFrame:
    """
    Per period t <= s_bar and regime: untreated risk set and empirical
    treatment hazard. `flag` marks cells where the risk set is empty or the
    hazard is degenerate (0 or 1).
    """
    rows = []
    for z in (0, 1):
        for t in range(1, min(s_bar, table.horizon) + 1):
            at_risk = int(table.entering[z, t])
            hazard = table.treatments[z, t] / at_risk if at_risk else float("nan")
            flag = "empty" if at_risk == 0 else ("degenerate" if hazard in (0.0, 1.0) else "")
            rows.append({"t": t, "z": z, "at_risk": at_risk, "treatment_hazard": hazard, "flag": flag})
    return pd.DataFrame(rows)
