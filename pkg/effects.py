"""
Model-based causal decomposition from a fitted hazard model: spell weights
from the regime treatment sub-density, weighted survival contrasts, the
substrata-conditional effects, and delta-method / bootstrap inference.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Callable
import logging
import math

import numpy as np
import pandas as pd
from scipy.stats import norm

from errors import ConfigError, CoverageError, DecompError, NumericalError
from nonparam import SurvivalBlocks, substrata_probabilities
from parameters import EstimationConfig
from phmodel import FitResult, HazardParams, cumulative_baseline, never_treated_probability, predict_survival, segment_of
from spells import sample_sizes, SpellData

logger = logging.getLogger(__name__)

EFFECT_NAMES = ("beta_0", "beta_z", "beta_0s", "beta_z0s", "alpha_z")


@dataclass(frozen=True)
class WeightVector:
    """
    Spell weights w_i(s), one column per treatment period in `periods`.
    mode "single": each column sums to 1 over spells.
    mode "interval": the whole matrix sums to 1.
    """

    weights: np.ndarray
    periods: np.ndarray
    mode: str
    regime: int = 1

    @property
    def period_weights(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def spell_weights(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def check(self, tol: float = 1e-10) -> bool:
        if np.any(self.weights < 0):
            return False
        if self.mode == "single":
            return bool(np.all(np.abs(self.weights.sum(axis=0) - 1.0) <= tol))
        return abs(float(self.weights.sum()) - 1.0) <= tol


def _treatment_densities(params: HazardParams, x: np.ndarray, z: int, periods: np.ndarray) -> np.ndarray:
    """(n, len(periods)) sub-density of treatment at each period for each spell."""
    cuts = params.spec.treat_cuts
    rates = params.treat_rates[z]
    rel = np.exp(np.atleast_2d(x) @ params.beta_treat)
    hazard = rates[segment_of(cuts, periods)]
    cum = cumulative_baseline(cuts, rates, periods.astype(float))
    return hazard[None, :] * rel[:, None] * np.exp(-rel[:, None] * cum[None, :])


def _normalize(f: np.ndarray, periods: np.ndarray, mode: str, regime: int) -> WeightVector:
    if mode == "single":
        totals = f.sum(axis=0)
        if np.any(totals <= 0):
            s = int(periods[np.flatnonzero(totals <= 0)[0]])
            raise NumericalError(f"treatment sub-density is zero for every spell at s={s}; weights are undefined")
        return WeightVector(weights=f / totals, periods=periods, mode=mode, regime=regime)
    if mode == "interval":
        total = f.sum()
        if not total > 0:
            raise NumericalError("treatment sub-density is zero over the whole interval; weights are undefined")
        return WeightVector(weights=f / total, periods=periods, mode=mode, regime=regime)
    raise ValueError(f"mode must be 'single' or 'interval', got {mode!r}")


def compute_weights(fit: FitResult, data: SpellData, s: int | None = None, s_bar: int | None = None, regime: int = 1) -> WeightVector:
    """
    Weights proportional to the regime treatment sub-density at each spell's
    covariates. Give `s` for a single treatment period or `s_bar` for the
    interval (0, s_bar].
    """
    if (s is None) == (s_bar is None):
        raise ValueError("give exactly one of s (single period) and s_bar (interval)")
    if data.n == 0:
        raise NumericalError("cannot weight an empty dataset")
    periods = np.array([s]) if s is not None else np.arange(1, s_bar + 1)
    f = _treatment_densities(fit.params, data.x, regime, periods)
    return _normalize(f, periods, "single" if s is not None else "interval", regime)


@dataclass(frozen=True)
class _EffectPaths:
    aggregates: np.ndarray  # EFFECT_NAMES order
    beta_s: np.ndarray
    beta_zs: np.ndarray
    period_weights: np.ndarray


def _effect_paths(params: HazardParams, x: np.ndarray, config: EstimationConfig) -> _EffectPaths:
    s_bar, tau = config.s_bar, config.tau
    periods = np.arange(1, s_bar + 1)
    f = _treatment_densities(params, x, config.weight_regime, periods)
    interval = _normalize(f, periods, "interval", config.weight_regime).weights
    single = f / f.sum(axis=0)
    spell_w = interval.sum(axis=1)

    cuts = params.spec.exit_cuts
    rel = np.exp(np.atleast_2d(x) @ params.beta_exit)[:, None]
    grid = np.arange(tau + 1, dtype=float)
    never, diff = [], []
    for z in (0, 1):
        cum0 = cumulative_baseline(cuts, params.exit_rates[z, 0], grid)
        cum1 = cumulative_baseline(cuts, params.exit_rates[z, 1], grid)
        untreated = np.exp(-rel[:, 0] * cum0[tau])
        # treated in s: untreated baseline to s-1, treated baseline on (s-1, tau]
        path = cum0[periods - 1] + cum1[tau] - cum1[periods - 1]
        treated = np.exp(-rel * path[None, :])
        never.append(untreated)
        diff.append(treated - untreated[:, None])

    beta_0 = float(spell_w @ never[0])
    beta_z = float(spell_w @ (never[1] - never[0]))
    beta_s = (single * diff[0]).sum(axis=0)
    beta_zs = (single * (diff[1] - diff[0])).sum(axis=0)
    beta_0s = float((interval * diff[0]).sum())
    beta_z0s = float((interval * (diff[1] - diff[0])).sum())

    by_s_bar = [1.0 - never_treated_probability(params, np.atleast_2d(x), z, float(s_bar)) for z in (0, 1)]
    contrast = by_s_bar[0] - by_s_bar[1] if config.alpha_contrast == "z0_minus_z1" else by_s_bar[1] - by_s_bar[0]
    alpha_z = float(spell_w @ contrast)
    return _EffectPaths(
        aggregates=np.array([beta_0, beta_z, beta_0s, beta_z0s, alpha_z]),
        beta_s=beta_s,
        beta_zs=beta_zs,
        period_weights=interval.sum(axis=0),
    )


def delta_se(fit: FitResult, functional: Callable[[HazardParams], np.ndarray | float], rel_step: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """
    Delta-method standard errors and two-sided normal p-values of a smooth
    functional of the parameters. The Jacobian uses central differences with
    step max(rel_step, rel_step * |theta_j|).

    Returns:
        (std_errors, p_values), arrays shaped like the functional's value
    """
    theta = fit.params.vector()
    estimate = np.atleast_1d(np.asarray(functional(fit.params), dtype=float))
    jac = np.zeros((estimate.size, theta.size))
    active = np.flatnonzero(np.diag(fit.covariance) > 0)
    for j in active:
        h = max(rel_step, rel_step * abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        f_up = np.atleast_1d(np.asarray(functional(fit.params.with_vector(up)), dtype=float))
        f_down = np.atleast_1d(np.asarray(functional(fit.params.with_vector(down)), dtype=float))
        jac[:, j] = (f_up - f_down) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite gradient of the effect functional")
    var = np.einsum("ij,jk,ik->i", jac, fit.covariance, jac)
    se = np.sqrt(np.clip(var, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(se > 0, 2.0 * norm.sf(np.abs(estimate / se)), np.nan)
    return se, p


def bootstrap_se(data: SpellData, statistic: Callable[[SpellData], np.ndarray | float], replicates: int = 200, seed: int = 0) -> np.ndarray:
    """
    Nonparametric bootstrap standard errors: spells are resampled with
    replacement and the statistic recomputed. Replicates on which the
    statistic fails with a DecompError (typically an empty cell) are dropped.
    """
    rng = np.random.default_rng(seed)
    values = []
    failed = 0
    for _ in range(replicates):
        try:
            values.append(np.atleast_1d(np.asarray(statistic(data.resample(rng)), dtype=float)))
        except DecompError as exc:
            failed += 1
            logger.debug("bootstrap replicate dropped: %s", exc)
    if failed:
        logger.warning("%d of %d bootstrap replicates failed and were dropped", failed, replicates)
    if len(values) < 2:
        raise NumericalError("fewer than two successful bootstrap replicates")
    return np.std(np.vstack(values), axis=0, ddof=1)


@dataclass(frozen=True)
class DecompositionResult:
    s_bar: int
    tau: int
    weight_regime: int
    alpha_contrast: str
    estimates: dict[str, float]
    std_errors: dict[str, float]
    p_values: dict[str, float]
    beta_s: np.ndarray
    beta_zs: np.ndarray
    period_weights: np.ndarray
    sample_sizes: dict[str, int] = field(default_factory=dict)
    substrata: pd.DataFrame | None = None

    def paths(self) -> pd.DataFrame:
        return pd.DataFrame({"s": np.arange(1, self.s_bar + 1), "beta_s": self.beta_s, "beta_zs": self.beta_zs, "weight": self.period_weights})

    def to_dict(self) -> dict[str, Any]:
        def clean(v: float) -> float | None:
            return None if v is None or not math.isfinite(v) else float(v)

        out = {
            "s_bar": self.s_bar,
            "tau": self.tau,
            "weight_regime": self.weight_regime,
            "alpha_contrast": self.alpha_contrast,
            "effects": {k: {"estimate": clean(self.estimates[k]), "std_error": clean(self.std_errors.get(k, math.nan)), "p_value": clean(self.p_values.get(k, math.nan))} for k in self.estimates},
            "beta_s": [float(v) for v in self.beta_s],
            "beta_zs": [float(v) for v in self.beta_zs],
            "period_weights": [float(v) for v in self.period_weights],
            "sample_sizes": dict(self.sample_sizes),
        }
        if self.substrata is not None:
            out["substrata"] = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()} for row in self.substrata.to_dict(orient="records")]
        return out


def decompose(fit: FitResult, data: SpellData, config: EstimationConfig) -> DecompositionResult:
    """
    Weighted model predictions of the decomposition at tau, aggregated over
    treatment periods (0, s_bar], with delta-method inference from one
    Jacobian of the whole effect vector.
    """
    if config.tau > fit.params.spec.upper:
        raise CoverageError(f"tau={config.tau} is beyond the model horizon {fit.params.spec.upper:g}")
    if data.n_covariates != fit.params.n_covariates:
        raise ConfigError(f"dataset has {data.n_covariates} covariates, model has {fit.params.n_covariates}", ("covariates",))
    x = data.x
    paths = _effect_paths(fit.params, x, config)
    se, p = delta_se(fit, lambda prm: _effect_paths(prm, x, config).aggregates, rel_step=config.gradient_step)
    logger.info("decomposition at tau=%d over (0, %d]: %s", config.tau, config.s_bar, ", ".join(f"{k}={v:.4f}" for k, v in zip(EFFECT_NAMES, paths.aggregates)))
    counts = {f"z={z},treated={int(tr)}": n for (z, tr), n in sample_sizes(data).items()}
    return DecompositionResult(
        s_bar=config.s_bar,
        tau=config.tau,
        weight_regime=config.weight_regime,
        alpha_contrast=config.alpha_contrast,
        estimates=dict(zip(EFFECT_NAMES, paths.aggregates.tolist())),
        std_errors=dict(zip(EFFECT_NAMES, se.tolist())),
        p_values=dict(zip(EFFECT_NAMES, p.tolist())),
        beta_s=paths.beta_s,
        beta_zs=paths.beta_zs,
        period_weights=paths.period_weights,
        sample_sizes=counts,
    )


@dataclass
class ModelBlocks:
    """
    Population survival blocks from weighted model predictions. untreated(z, lo, hi)
    is the weighted survival to hi divided by the weighted survival to lo-1, so
    consecutive blocks telescope to the marginal survival.
    """

    params: HazardParams
    x: np.ndarray
    weights: np.ndarray
    horizon: int

    def _marginal(self, z: int, s: int | None, t: int) -> float:
        if t <= 0:
            return 1.0
        return float(self.weights @ np.atleast_1d(predict_survival(self.params, self.x, z, s, 0.0, float(t))))

    def untreated(self, z: int, lo: int, hi: int) -> float:
        if hi < lo:
            return 1.0
        den = self._marginal(z, None, lo - 1)
        return self._marginal(z, None, hi) / den if den > 0 else 0.0

    def treated(self, z: int, s: int, lo: int, hi: int) -> float:
        lo = max(lo, s)
        if hi < lo:
            return 1.0
        den = self._marginal(z, s, lo - 1)
        return self._marginal(z, s, hi) / den if den > 0 else 0.0

    @classmethod
    def new(cls, fit: FitResult, data: SpellData, config: EstimationConfig) -> ModelBlocks:
        w = compute_weights(fit, data, s_bar=config.s_bar, regime=config.weight_regime).spell_weights
        horizon = int(config.tau if math.isinf(fit.params.spec.upper) else min(config.tau, fit.params.spec.upper))
        return cls(params=fit.params, x=data.x, weights=w, horizon=horizon)


@dataclass(frozen=True)
class SubstrataEffects:
    """
    Effects conditional on the always-survivor (as) and complier-survivor (cs)
    substrata at treatment period s. The regime with the lower untreated
    survival to s plays the part of regime 0; contrasts stay regime 1 minus
    regime 0. `unstable` marks complier effects divided by Pr(cs) below the floor.
    """

    s: int
    tau: int
    pr_as: float
    pr_cs: float
    pr_ns: float
    direction: str
    s_prime: int | None
    beta_0_as: float
    beta_z_as: float
    beta_s_as: float
    beta_z_cs: float
    beta_zs_cs: float
    unstable: bool

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def substrata_effects(blocks: SurvivalBlocks, s: int, tau: int, cs_floor: float = 1e-3) -> SubstrataEffects:
    probs = substrata_probabilities(blocks, s, tau)
    low = probs.low_regime
    high = 1 - low
    sign = 1.0 if low == 0 else -1.0

    surv_low = blocks.untreated(low, s, tau)
    if probs.s_prime is None:
        matched = 1.0
    else:
        matched = blocks.untreated(high, probs.s_prime, tau)
    beta_0_as = surv_low
    beta_z_as = sign * (matched - surv_low)
    beta_s_as = blocks.treated(low, s, s, tau) - surv_low

    def treated_contrast(z: int) -> float:
        return blocks.treated(z, s, s, tau) * blocks.untreated(z, 1, s - 1) - blocks.untreated(z, 1, tau)

    beta_zs = treated_contrast(1) - treated_contrast(0)
    unstable = probs.pr_cs < cs_floor
    if probs.pr_cs > 0:
        beta_zs_cs = beta_zs / probs.pr_cs
        if probs.s_prime is None:
            beta_z_cs = sign * (blocks.untreated(high, 1, tau) - probs.pr_as) / probs.pr_cs
        else:
            beta_z_cs = 0.0
    else:
        beta_zs_cs = beta_z_cs = math.nan
    if unstable:
        logger.warning("Pr(cs)=%.2e below floor %.1e at s=%d: complier-survivor effects are unstable", probs.pr_cs, cs_floor, s)
    return SubstrataEffects(
        s=s,
        tau=tau,
        pr_as=probs.pr_as,
        pr_cs=probs.pr_cs,
        pr_ns=probs.pr_ns,
        direction=probs.direction,
        s_prime=probs.s_prime,
        beta_0_as=beta_0_as,
        beta_z_as=beta_z_as,
        beta_s_as=beta_s_as,
        beta_z_cs=beta_z_cs,
        beta_zs_cs=beta_zs_cs,
        unstable=unstable,
    )


def substrata_table(blocks: SurvivalBlocks, s_bar: int, tau: int, cs_floor: float = 1e-3, weights: np.ndarray | None = None) -> pd.DataFrame:
    """
    Substrata effects for s = 1..s_bar, plus a final "avg" row weighting each
    column by the treatment-period weights when given.
    """
    frame = pd.DataFrame([substrata_effects(blocks, s, tau, cs_floor).to_dict() for s in range(1, s_bar + 1)])
    if weights is None:
        return frame
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    avg: dict[str, Any] = {"s": "avg", "tau": tau, "direction": "", "s_prime": None, "unstable": bool(frame["unstable"].any())}
    for col in ("pr_as", "pr_cs", "pr_ns", "beta_0_as", "beta_z_as", "beta_s_as", "beta_z_cs", "beta_zs_cs"):
        vals = frame[col].to_numpy(dtype=float)
        ok = np.isfinite(vals)
        avg[col] = float(np.sum(w[ok] * vals[ok]) / w[ok].sum()) if ok.any() else math.nan
    return pd.concat([frame, pd.DataFrame([avg])], ignore_index=True)
