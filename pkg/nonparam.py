"""
Nonparametric estimators on a discrete period grid: product-limit curves,
the g-computation decomposition of regime and treatment effects, treatment
time probabilities, and the survival-to-s probabilities that define the
always-, complier- and never-survivor substrata.

Conventions shared by every estimator here: within a period, treatment comes
before the exit decision, and a spell censored in period t counts as having
survived t.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol
import logging
import math

import numpy as np
import pandas as pd

from errors import CoverageError, EmptyCellError, RegimeError
from parameters import EstimationConfig, TimeGrid
from spells import RiskSetTable, SpellData

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurvivalCurve:
    """Step function Pr(survive past t) at t = 0..horizon, with at-risk and event counts per point."""

    periods: np.ndarray
    values: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    std_err: np.ndarray
    label: str = ""

    def at(self, t: int) -> float:
        return float(self.values[t])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"period": self.periods, "value": self.values, "at_risk": self.at_risk, "events": self.events, "std_err": self.std_err})

    def write(self, path: str | Path, delimiter: str = ",") -> None:
        """Two-column (period, value) file for external plotting tools."""
        pd.DataFrame({"period": self.periods, "value": self.values}).to_csv(path, sep=delimiter, index=False, lineterminator="\n")


def _stratum_mask(data: SpellData, stratum: dict[str, int] | None) -> tuple[np.ndarray, str]:
    mask = np.ones(data.n, dtype=bool)
    if not stratum:
        return mask, "all"
    for key, value in stratum.items():
        if key == "z":
            mask &= data.z == value
        elif key in data.covariate_names:
            mask &= data.x[:, data.covariate_names.index(key)] == value
        else:
            raise KeyError(f"unknown stratum field {key!r}")
    return mask, ",".join(f"{k}={v}" for k, v in stratum.items())


def kaplan_meier(
    data: SpellData,
    grid: TimeGrid,
    stratum: dict[str, int] | None = None,
    censor_at_treatment: bool = False,
    event: str = "exit",
) -> SurvivalCurve:
    """
    Product-limit estimate over the grid periods for one stratum.

    Args:
        data: Discretized spells
        grid: Analysis grid; the curve runs over 0..grid.horizon
        stratum: Field -> value selector ("z" or a covariate name); None selects all spells
        censor_at_treatment: Treated spells leave the exit risk set when treated, before
            the exit decision of that period (pre-treatment survival)
        event: "exit" for survival, "treatment" for the no-treatment probability
            (an untreated exit censors the treatment duration after the period)

    Returns:
        SurvivalCurve with Greenwood standard errors
    """
    if not data.discretized:
        raise CoverageError("kaplan_meier needs a discretized dataset")
    if event not in ("exit", "treatment"):
        raise ValueError(f"event must be 'exit' or 'treatment', got {event!r}")
    mask, label = _stratum_mask(data, stratum)
    if not mask.any():
        raise EmptyCellError(0, int(stratum.get("z", -1)) if stratum else -1, f"stratum {label}")

    terminal = data.terminal[mask]
    treated = data.treated[mask]
    treat = data.treat[mask]
    if event == "exit":
        observed = data.exited[mask].copy()
        if censor_at_treatment:
            # removed at the start of the treatment period: last period survived untreated is s - 1
            terminal = np.where(treated, treat - 1, terminal)
            observed &= ~treated
    else:
        observed = treated
        terminal = np.where(treated, treat, terminal)

    H = grid.horizon
    L = H + 2
    t_idx = np.clip(terminal, 0, H + 1).astype(np.int64)
    ends = np.bincount(t_idx, minlength=L)[:L]
    events = np.bincount(t_idx[observed], minlength=L)[:L]
    at_risk = ends[::-1].cumsum()[::-1]

    values = np.ones(H + 1)
    greenwood = np.zeros(H + 1)
    surv, acc = 1.0, 0.0
    for t in range(1, H + 1):
        n, d = at_risk[t], events[t]
        if n > 0 and d > 0:
            surv *= 1.0 - d / n
            acc += d / (n * (n - d)) if n > d else math.inf
        values[t] = surv
        greenwood[t] = surv * math.sqrt(acc) if math.isfinite(acc) else 0.0

    return SurvivalCurve(periods=np.arange(H + 1), values=values, at_risk=at_risk[: H + 1], events=events[: H + 1], std_err=greenwood, label=label)


def treatment_curve(data: SpellData, grid: TimeGrid, z: int) -> SurvivalCurve:
    """No-treatment probability in regime z."""
    return kaplan_meier(data, grid, stratum={"z": z}, event="treatment")


def period_hazards(table: RiskSetTable, process: str, z: int) -> pd.DataFrame:
    """Empirical per-period hazard of treatment or of untreated exit."""
    t = np.arange(1, table.horizon + 1)
    if process == "treatment":
        num, den = table.treatments[z, t], table.entering[z, t]
    elif process == "exit":
        num, den = table.exits[z, t], table.untreated_at_risk[z, t]
    else:
        raise ValueError(f"process must be 'treatment' or 'exit', got {process!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        hazard = np.where(den > 0, num / np.maximum(den, 1), np.nan)
    return pd.DataFrame({"period": t, "at_risk": den, "events": num, "hazard": hazard})


class SurvivalBlocks(Protocol):
    """
    Source of the survival building blocks of the decomposition; both the
    risk-set estimator and the fitted hazard model implement it.

    untreated(z, lo, hi) = prod_{t=lo..hi} Pr(T > t | S > t, T >= t, Z = z)
    treated(z, s, lo, hi) = prod_{t=lo..hi} Pr(T > t | S = s, T >= t, Z = z), lo >= s
    """

    horizon: int

    def untreated(self, z: int, lo: int, hi: int) -> float: ...

    def treated(self, z: int, s: int, lo: int, hi: int) -> float: ...


@dataclass
class RiskSetBlocks:
    """Empirical conditional survival fractions from a RiskSetTable, with the empty-cell policy applied."""

    table: RiskSetTable
    empty_cell: str = "error"
    imputed: set[tuple[int, int, str]] = field(default_factory=set)

    def __post_init__(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            at_risk = self.table.untreated_at_risk
            self._p = np.where(at_risk > 0, 1.0 - self.table.exits / np.maximum(at_risk, 1), np.nan)
            entering = self.table.entering
            self._h = np.where(entering > 0, self.table.treatments / np.maximum(entering, 1), np.nan)
            cohort = self.table.cohort_at_risk
            self._q = np.where(cohort > 0, 1.0 - self.table.cohort_exits / np.maximum(cohort, 1), np.nan)

    @property
    def horizon(self) -> int:
        return self.table.horizon

    def _product(self, factors: np.ndarray, lo: int, hi: int, z: int, stratum: str) -> float:
        if hi > self.horizon:
            raise CoverageError(f"period {hi} is beyond the risk-set horizon {self.horizon}")
        out = 1.0
        for t in range(max(lo, 1), hi + 1):
            f = factors[t]
            if math.isnan(f):
                if out == 0.0:
                    continue
                if self.empty_cell == "carry_forward":
                    if (t, z, stratum) not in self.imputed:
                        logger.warning("empty cell t=%d z=%d %s carried forward with survival 1", t, z, stratum)
                    self.imputed.add((t, z, stratum))
                    continue
                raise EmptyCellError(t, z, stratum)
            out *= f
        return out

    def untreated(self, z: int, lo: int, hi: int) -> float:
        return self._product(self._p[z], lo, hi, z, "untreated")

    def treated(self, z: int, s: int, lo: int, hi: int) -> float:
        return self._product(self._q[z, s], max(lo, s), hi, z, f"treated at s={s}")

    def treatment_masses(self, z: int) -> tuple[np.ndarray, float]:
        """
        Pr(S^z = s) for s = 0..horizon (index 0 is 0) and the residual mass
        Pr(S^z > horizon); deaths censor the treatment duration.
        """
        masses = np.zeros(self.horizon + 1)
        surv = 1.0
        for s in range(1, self.horizon + 1):
            h = self._h[z, s]
            if math.isnan(h):
                if surv == 0.0:
                    continue
                if self.empty_cell == "carry_forward":
                    self.imputed.add((s, z, "treatment"))
                    continue
                raise EmptyCellError(s, z, "treatment")
            masses[s] = surv * h
            surv *= 1.0 - h
        return masses, surv


@dataclass(frozen=True)
class GcompEstimates:
    """
    beta_s / beta_zs are indexed by s = 1..s_bar (NaN where undefined);
    treat_prob[z] holds Pr(S^z = s) for s = 0..horizon.
    """

    s_bar: int
    tau: int
    beta_0: float
    beta_z: float
    beta_s: np.ndarray
    beta_zs: np.ndarray
    beta_0s: float
    beta_z0s: float
    alpha_z: float
    treat_prob: np.ndarray
    treat_residual: np.ndarray
    weights: np.ndarray
    weight_regime: int = 1
    no_treatment: bool = False
    imputed_cells: tuple[tuple[int, int, str], ...] = ()

    def effects(self) -> dict[str, float]:
        return {"beta_0": self.beta_0, "beta_z": self.beta_z, "beta_0s": self.beta_0s, "beta_z0s": self.beta_z0s, "alpha_z": self.alpha_z}

    def to_dict(self) -> dict:
        def clean(v: float) -> float | None:
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        return {
            "s_bar": self.s_bar,
            "tau": self.tau,
            "effects": {k: clean(v) for k, v in self.effects().items()},
            "beta_s": [clean(v) for v in self.beta_s],
            "beta_zs": [clean(v) for v in self.beta_zs],
            "treat_prob": {str(z): [float(v) for v in self.treat_prob[z]] for z in (0, 1)},
            "weight_regime": self.weight_regime,
            "no_treatment": self.no_treatment,
            "imputed_cells": [list(c) for c in self.imputed_cells],
        }


def _require_regimes(table: RiskSetTable) -> None:
    missing = [z for z in (0, 1) if table.n[z] == 0]
    if missing:
        raise RegimeError(f"both regimes required; no spells with z={missing[0]}")


def gcomp_decomposition(table: RiskSetTable, config: EstimationConfig) -> GcompEstimates:
    """
    g-computation decomposition at evaluation period tau for treatment periods
    s = 1..s_bar. Aggregates over (0, s_bar] weight beta_s and beta_zs by
    Pr(S^{z_w} = s) normalized over the interval, z_w = config.weight_regime.
    """
    _require_regimes(table)
    s_bar, tau = config.s_bar, config.tau
    if tau > table.horizon:
        raise CoverageError(f"tau={tau} is beyond the risk-set horizon {table.horizon}")
    blocks = RiskSetBlocks(table, empty_cell=config.empty_cell)

    u0 = blocks.untreated(0, 1, tau)
    u1 = blocks.untreated(1, 1, tau)
    beta_0, beta_z = u0, u1 - u0

    masses = np.zeros((2, table.horizon + 1))
    residual = np.zeros(2)
    for z in (0, 1):
        masses[z], residual[z] = blocks.treatment_masses(z)
    cum = masses[:, 1 : s_bar + 1].sum(axis=1)
    alpha_z = cum[0] - cum[1] if config.alpha_contrast == "z0_minus_z1" else cum[1] - cum[0]

    beta_s = np.full(s_bar, np.nan)
    beta_zs = np.full(s_bar, np.nan)
    no_treatment = int(table.treatments.sum()) == 0
    if no_treatment:
        logger.warning("no treated spells: treatment effects are undefined, reporting beta_0 and beta_z only")
        weights = np.full(s_bar, np.nan)
        beta_0s = beta_z0s = float("nan")
    else:
        for s in range(1, s_bar + 1):
            t0 = blocks.treated(0, s, s, tau) * blocks.untreated(0, 1, s - 1)
            t1 = blocks.treated(1, s, s, tau) * blocks.untreated(1, 1, s - 1)
            beta_s[s - 1] = t0 - u0
            beta_zs[s - 1] = (t1 - u1) - beta_s[s - 1]
        mass = masses[config.weight_regime, 1 : s_bar + 1]
        if mass.sum() > 0:
            weights = mass / mass.sum()
            used = weights > 0
            beta_0s = float(np.sum(weights[used] * beta_s[used]))
            beta_z0s = float(np.sum(weights[used] * beta_zs[used]))
        else:
            weights = np.full(s_bar, np.nan)
            beta_0s = beta_z0s = float("nan")

    return GcompEstimates(
        s_bar=s_bar,
        tau=tau,
        beta_0=float(beta_0),
        beta_z=float(beta_z),
        beta_s=beta_s,
        beta_zs=beta_zs,
        beta_0s=beta_0s,
        beta_z0s=beta_z0s,
        alpha_z=float(alpha_z),
        treat_prob=masses,
        treat_residual=residual,
        weights=weights,
        weight_regime=config.weight_regime,
        no_treatment=no_treatment,
        imputed_cells=tuple(sorted(blocks.imputed)),
    )


def effect_paths(estimates: GcompEstimates) -> pd.DataFrame:
    """beta_s and beta_zs as functions of the treatment period at fixed tau."""
    s = np.arange(1, estimates.s_bar + 1)
    return pd.DataFrame({"s": s, "beta_s": estimates.beta_s, "beta_zs": estimates.beta_zs, "weight": estimates.weights})


@dataclass(frozen=True)
class SubstrataProbabilities:
    """
    Shares of always-, complier- and never-survivors to period s.
    direction is "z1_higher" when untreated survival to s is at least as high
    under Z=1 (the complier-survivors survive to s only under Z=1), otherwise "z0_higher".
    s_prime is None when the matched period lies beyond tau.
    """

    s: int
    tau: int
    pr_as: float
    pr_cs: float
    pr_ns: float
    direction: str
    s_prime: int | None

    @property
    def low_regime(self) -> int:
        return 0 if self.direction == "z1_higher" else 1


def match_sprime(blocks: SurvivalBlocks, s: int, tau: int, reference: int = 0) -> int | None:
    """
    Period s' at which untreated survival in the other regime matches the
    reference regime's untreated survival to s: the period s' in [s, tau]
    minimizing |S_other(s') - S_ref(s)|, smallest s' on ties, so identical
    regimes match at s' = s. Returns None when the other regime's curve does
    not reach that level by tau.
    """
    other = 1 - reference
    level = blocks.untreated(reference, 1, s - 1)
    curve = np.array([blocks.untreated(other, 1, sp - 1) for sp in range(s, tau + 1)])
    if curve.size == 0 or curve[-1] > level:
        return None
    gaps = np.abs(curve - level)
    return int(np.flatnonzero(gaps <= gaps.min() + 1e-12)[0]) + s


def substrata_probabilities(blocks: SurvivalBlocks, s: int, tau: int) -> SubstrataProbabilities:
    if not 1 <= s <= tau:
        raise CoverageError(f"need 1 <= s <= tau, got s={s}, tau={tau}")
    surv = [blocks.untreated(z, 1, s - 1) for z in (0, 1)]
    direction = "z1_higher" if surv[1] >= surv[0] else "z0_higher"
    low = 0 if direction == "z1_higher" else 1
    pr_as = min(surv)
    pr_cs = abs(surv[1] - surv[0])
    pr_ns = 1.0 - pr_as - pr_cs
    s_prime = match_sprime(blocks, s, tau, reference=low)
    return SubstrataProbabilities(s=s, tau=tau, pr_as=pr_as, pr_cs=pr_cs, pr_ns=pr_ns, direction=direction, s_prime=s_prime)
