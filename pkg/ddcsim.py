"""
Dynamic discrete choice waiting model used as a data-generating process with
known causal effects.

An agent with ability a and effort e waits in the initial state, enjoying
w0 - c per period. Offers arrive with probability lambda = 1 - exp(-(b_la a + b_le e))
(a Poisson draw of at least one event); an offer w ~ N(b_wa a + shift * 1(treated), sigma_xi^2)
is accepted, ending the spell, when it reaches the applicable reservation
utility. Untreated agents in regime z are treated each period with
probability pi_z, before that period's exit decision.

Reservation utilities, in flow units, solve

    post-treatment: (1 - rho) w = (1 - rho)(w0 - c) + rho lam ME_tr(w)
    pre-treatment:  (1 - rho + rho pi) w = (1 - pi)(1 - rho)(w0 - c) + pi w_tr + (1 - pi) rho lam ME(w)

with ME(w) = E[max(offer - w, 0)] the mean excess of the offer distribution.
"""

from __future__ import annotations
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable
import json
import logging
import math

import numpy as np
import pandas as pd
from scipy.stats import norm

from effects import decompose
from errors import ConvergenceError, DecompError, NumericalError
from nonparam import GcompEstimates
from parameters import DdcConfig, EstimationConfig, FitOptions, PiecewiseSpec
from phmodel import fit, merge_empty_tail
from spells import SpellData

logger = logging.getLogger(__name__)

# periods drawn per generator call while following an agent
_BLOCK = 64

# spawn keys separating the random streams of one master seed
_AGENT_STREAM = 0
_CENSOR_STREAM = 1
_POPULATION_STREAM = 2


def arrival_probability(config: DdcConfig, a: int, e: int) -> float:
    return 1.0 - math.exp(-(config.beta_lambda_a * a + config.beta_lambda_e * e))


def flow_utility(config: DdcConfig, a: int, e: int) -> float:
    """w0 - c for one (a, e) cell."""
    return config.w0_share * config.beta_w_a * a - (config.beta_c_a * a + config.beta_c_e * e)


def offer_mean(config: DdcConfig, a: int, treated: bool) -> float:
    return config.beta_w_a * a + (config.beta_w_s if treated else 0.0)


def gaussian_mean_excess(w: float, mean: float, sd: float) -> tuple[float, float]:
    """E[max(X - w, 0)] for X ~ N(mean, sd^2) and its survival 1 - G(w) (minus the derivative)."""
    if sd == 0.0:
        return max(mean - w, 0.0), float(mean > w)
    zeta = (w - mean) / sd
    tail = float(norm.sf(zeta))
    return sd * (float(norm.pdf(zeta)) - zeta * tail), tail


@dataclass(frozen=True)
class FixedPoint:
    value: float
    n_iter: int
    mc_std_error: float = 0.0
    trace: tuple[float, ...] = field(default=(), repr=False)


def _solve(
    slope: float,
    constant: float,
    k: float,
    mean: float,
    config: DdcConfig,
    draws: np.ndarray | None,
    label: str,
) -> FixedPoint:
    """
    Newton iteration on F(w) = slope * w - constant - k * ME(w). F is increasing
    and concave, so iterates approach the root monotonically after the first step.
    """
    sd = config.sigma_xi

    def mean_excess(w: float) -> tuple[float, float]:
        if draws is None:
            return gaussian_mean_excess(w, mean, sd)
        excess = np.maximum(mean + sd * draws - w, 0.0)
        return float(excess.mean()), float(np.mean(mean + sd * draws > w))

    w = constant / slope
    trace = [w]
    for it in range(1, config.max_iter + 1):
        me, tail = mean_excess(w)
        f = slope * w - constant - k * me
        step = f / (slope + k * tail)
        w -= step
        trace.append(w)
        if not math.isfinite(w):
            raise ConvergenceError(f"reservation utility diverged for {label}", best=trace[-2], trace=trace)
        if abs(step) < config.tol:
            mc_se = 0.0
            if draws is not None:
                excess = np.maximum(mean + sd * draws - w, 0.0)
                _, tail = mean_excess(w)
                mc_se = k * float(excess.std(ddof=1)) / math.sqrt(draws.size) / (slope + k * tail)
            return FixedPoint(value=w, n_iter=it, mc_std_error=mc_se, trace=tuple(trace))
    raise ConvergenceError(f"reservation utility for {label} did not converge in {config.max_iter} iterations", best=w, trace=trace)


def _expectation_draws(config: DdcConfig) -> np.ndarray | None:
    if config.expectation == "analytic":
        return None
    return np.random.default_rng(config.seed).standard_normal(config.mc_draws)


def solve_reservation_post(config: DdcConfig, a: int, e: int) -> FixedPoint:
    """Post-treatment reservation utility; it does not involve the regime."""
    lam = arrival_probability(config, a, e)
    return _solve(
        slope=1.0 - config.rho,
        constant=(1.0 - config.rho) * flow_utility(config, a, e),
        k=config.rho * lam,
        mean=offer_mean(config, a, treated=True),
        config=config,
        draws=_expectation_draws(config),
        label=f"post-treatment a={a} e={e}",
    )


def solve_reservation_pre(config: DdcConfig, a: int, e: int, z: int, post: float | None = None) -> FixedPoint:
    """Pre-treatment reservation utility in regime z, given the post-treatment one."""
    if post is None:
        post = solve_reservation_post(config, a, e).value
    pi = config.pi(z)
    rho = config.rho
    lam = arrival_probability(config, a, e)
    return _solve(
        slope=1.0 - rho + rho * pi,
        constant=(1.0 - pi) * (1.0 - rho) * flow_utility(config, a, e) + pi * post,
        k=(1.0 - pi) * rho * lam,
        mean=offer_mean(config, a, treated=False),
        config=config,
        draws=_expectation_draws(config),
        label=f"pre-treatment a={a} e={e} z={z}",
    )


@dataclass(frozen=True)
class ReservationTable:
    """
    post[a_idx, e_idx] and pre[a_idx, e_idx, z], indices offset by the low end
    of each range. mc_std_error holds the Monte-Carlo standard errors of the
    same cells (zero in analytic mode).
    """

    a_values: np.ndarray
    e_values: np.ndarray
    post: np.ndarray
    pre: np.ndarray
    iterations: np.ndarray
    mc_std_error_post: np.ndarray
    mc_std_error_pre: np.ndarray
    expectation: str = "analytic"
    pi: tuple[float, float] = (0.01, 0.03)

    def cell(self, a: int, e: int) -> tuple[int, int]:
        i = int(np.searchsorted(self.a_values, a))
        j = int(np.searchsorted(self.e_values, e))
        if i >= self.a_values.size or self.a_values[i] != a or j >= self.e_values.size or self.e_values[j] != e:
            raise NumericalError(f"no reservation utility solved for a={a}, e={e}")
        return i, j

    def post_value(self, a: int, e: int) -> float:
        return float(self.post[self.cell(a, e)])

    def pre_value(self, a: int, e: int, z: int) -> float:
        i, j = self.cell(a, e)
        return float(self.pre[i, j, z])

    def is_monotone(self) -> np.ndarray:
        """Per cell: the pre-treatment reservation moves with pi in the direction of sign(post - pre)."""
        gap = (self.pre[:, :, 1] - self.pre[:, :, 0]) * np.sign(self.pi[1] - self.pi[0])
        direction = self.post - self.pre[:, :, 0]
        return (np.sign(gap) == np.sign(direction)) | (np.abs(gap) < 1e-12)

    def with_values(self, post: float, pre: float) -> ReservationTable:
        """Every cell forced to the given values (e.g. -inf to accept every offer)."""
        return replace(self, post=np.full_like(self.post, post), pre=np.full_like(self.pre, pre))

    def to_dict(self) -> dict[str, Any]:
        cells = []
        for i, a in enumerate(self.a_values):
            for j, e in enumerate(self.e_values):
                cells.append(
                    {
                        "a": int(a),
                        "e": int(e),
                        "post": float(self.post[i, j]),
                        "pre_z0": float(self.pre[i, j, 0]),
                        "pre_z1": float(self.pre[i, j, 1]),
                        "iterations": self.iterations[i, j].tolist(),
                        "mc_std_error": [float(self.mc_std_error_post[i, j]), *map(float, self.mc_std_error_pre[i, j])],
                    }
                )
        return {"expectation": self.expectation, "cells": cells}

    def write_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def new(cls, config: DdcConfig) -> ReservationTable:
        a_values = np.arange(config.a_range[0], config.a_range[1] + 1)
        e_values = np.arange(config.e_range[0], config.e_range[1] + 1)
        shape = (a_values.size, e_values.size)
        post = np.empty(shape)
        pre = np.empty(shape + (2,))
        iterations = np.zeros(shape + (3,), dtype=np.int64)
        se_post = np.zeros(shape)
        se_pre = np.zeros(shape + (2,))
        for i, a in enumerate(a_values):
            for j, e in enumerate(e_values):
                fp = solve_reservation_post(config, int(a), int(e))
                post[i, j], se_post[i, j], iterations[i, j, 0] = fp.value, fp.mc_std_error, fp.n_iter
                for z in (0, 1):
                    fz = solve_reservation_pre(config, int(a), int(e), z, post=fp.value)
                    pre[i, j, z], se_pre[i, j, z], iterations[i, j, z + 1] = fz.value, fz.mc_std_error, fz.n_iter
        table = cls(
            a_values=a_values,
            e_values=e_values,
            post=post,
            pre=pre,
            iterations=iterations,
            mc_std_error_post=se_post,
            mc_std_error_pre=se_pre,
            expectation=config.expectation,
            pi=(config.pi_z0, config.pi_z1),
        )
        if not np.all(np.isfinite(post)) or not np.all(np.isfinite(pre)):
            raise NumericalError("non-finite reservation utility in the solved table")
        bad = ~table.is_monotone()
        if bad.any():
            logger.warning("reservation utilities not monotone in pi for %d cell(s)", int(bad.sum()))
        logger.info("solved %d reservation cells (%s expectations)", post.size * 3, config.expectation)
        return table


@dataclass(frozen=True)
class SimPanel:
    """
    One row per agent; period indices with NaN for absent events.
    censor_kind: 0 not censored, 1 administrative, 2 random, 3 still waiting at the end of the simulation.
    """

    a: np.ndarray
    e: np.ndarray
    z: np.ndarray
    treat: np.ndarray
    exit: np.ndarray
    censor: np.ndarray
    offer: np.ndarray
    censor_kind: np.ndarray

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def terminal(self) -> np.ndarray:
        return np.where(np.isnan(self.exit), self.censor, self.exit)

    def to_spells(self, a_range: tuple[int, int] | None = None) -> SpellData:
        """
        Estimation file view: ability as one dummy per level above the lowest
        (full stratification), effort withheld.
        """
        lo, hi = a_range if a_range is not None else (int(self.a.min()), int(self.a.max()))
        levels = list(range(lo + 1, hi + 1))
        x = np.column_stack([(self.a == v).astype(float) for v in levels]) if levels else np.zeros((self.n, 0))
        return SpellData.new(
            z=self.z,
            treat=[None if math.isnan(v) else v for v in self.treat],
            exit=[None if math.isnan(v) else v for v in self.exit],
            censor=[None if math.isnan(v) else v for v in self.censor],
            x=x,
            ids=[str(i) for i in range(self.n)],
            covariate_names=[f"a{v}" for v in levels],
            discretized=True,
        )

    def summary(self) -> dict[str, float]:
        n = max(self.n, 1)
        kind = self.censor_kind
        admin = int(np.sum(kind == 1))
        remaining = max(self.n - admin, 1)
        out: dict[str, float] = {
            "n": self.n,
            "admin_censored_share": admin / n,
            "random_censored_share_of_remaining": float(np.sum(kind == 2)) / remaining,
            "exited_share": float(np.mean(~np.isnan(self.exit))) if self.n else 0.0,
        }
        for z in (0, 1):
            m = self.z == z
            out[f"treated_share_z{z}"] = float(np.mean(~np.isnan(self.treat[m]))) if m.any() else float("nan")
        return out


@dataclass(frozen=True)
class _Population:
    a: np.ndarray
    e: np.ndarray
    z: np.ndarray


def _population(config: DdcConfig) -> _Population:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_POPULATION_STREAM,)))
    n = config.n_agents
    a = rng.integers(config.a_range[0], config.a_range[1] + 1, size=n)
    e = rng.integers(config.e_range[0], config.e_range[1] + 1, size=n)
    z = rng.permutation(np.repeat([0, 1], [n // 2, n - n // 2]))
    return _Population(a=a, e=e, z=z)


def _agent_rng(config: DdcConfig, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_AGENT_STREAM, i)))


def _draw_block(rng: np.random.Generator, arrival_mean: float, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Treatment uniforms, offer arrivals and offer shocks for `size` periods, in a fixed order."""
    u = rng.random(size)
    arrivals = rng.poisson(arrival_mean, size) >= 1
    xi = rng.standard_normal(size)
    return u, arrivals, xi


def _follow_agent(config: DdcConfig, rng: np.random.Generator, a: int, e: int, z: int, pre: float, post: float) -> tuple[float, float, float]:
    """(treatment period, exit period, accepted offer), NaN when absent within n_periods."""
    pi = config.pi(z)
    mean = config.beta_lambda_a * a + config.beta_lambda_e * e
    base = offer_mean(config, a, treated=False)
    s = math.nan
    start = 0
    while start < config.n_periods:
        size = min(_BLOCK, config.n_periods - start)
        u, arrivals, xi = _draw_block(rng, mean, size)
        periods = np.arange(start + 1, start + size + 1)
        if math.isnan(s):
            hit = np.flatnonzero(u < pi)
            if hit.size:
                s = float(periods[hit[0]])
        treated = periods >= s if not math.isnan(s) else np.zeros(size, dtype=bool)
        offers = base + np.where(treated, config.beta_w_s, 0.0) + config.sigma_xi * xi
        accept = arrivals & (offers >= np.where(treated, post, pre))
        k = np.flatnonzero(accept)
        if k.size:
            exit_period = float(periods[k[0]])
            # treatment draws after the exit period never happen
            return (s if s <= exit_period else math.nan), exit_period, float(offers[k[0]])
        start += size
    return s, math.nan, math.nan


def simulate_panel(config: DdcConfig, reservations: ReservationTable | None = None) -> SimPanel:
    """
    Simulate every agent until exit or n_periods. Agent i draws from its own
    substream of the master seed, so results do not depend on evaluation order.
    """
    table = reservations if reservations is not None else ReservationTable.new(config)
    pop = _population(config)
    n = config.n_agents
    treat = np.full(n, np.nan)
    exit_ = np.full(n, np.nan)
    offer = np.full(n, np.nan)
    for i in range(n):
        a, e, z = int(pop.a[i]), int(pop.e[i]), int(pop.z[i])
        treat[i], exit_[i], offer[i] = _follow_agent(config, _agent_rng(config, i), a, e, z, table.pre_value(a, e, z), table.post_value(a, e))
    waiting = np.isnan(exit_)
    censor = np.where(waiting, float(config.n_periods), np.nan)
    kind = np.where(waiting, 3, 0).astype(np.int8)
    logger.info("simulated %d agents: %d exits, %d treated", n, int((~waiting).sum()), int((~np.isnan(treat)).sum()))
    return SimPanel(a=pop.a, e=pop.e, z=pop.z, treat=treat, exit=exit_, censor=censor, offer=offer, censor_kind=kind)


def apply_censoring(panel: SimPanel, config: DdcConfig) -> SimPanel:
    """
    Administrative censoring at config.admin_censor, then random censoring of
    a config.random_censor_share of the remaining spells at a uniform period in
    [1, terminal - 1] (spells ending in period 1 cannot be censored earlier).
    A treatment after the censoring period is unobserved and dropped.
    """
    treat, exit_, censor, offer = panel.treat.copy(), panel.exit.copy(), panel.censor.copy(), panel.offer.copy()
    kind = panel.censor_kind.copy()
    terminal = panel.terminal
    cut = float(config.admin_censor)

    admin = terminal > cut
    exit_[admin] = np.nan
    offer[admin] = np.nan
    censor[admin] = cut
    kind[admin] = 1
    treat[treat > cut] = np.nan

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_CENSOR_STREAM,)))
    remaining = np.flatnonzero(~admin)
    eligible = remaining[np.where(np.isnan(exit_[remaining]), censor[remaining], exit_[remaining]) >= 2]
    k = min(int(round(config.random_censor_share * remaining.size)), eligible.size)
    chosen = np.sort(rng.choice(eligible, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    if k:
        end = np.where(np.isnan(exit_[chosen]), censor[chosen], exit_[chosen])
        at = rng.integers(1, end.astype(np.int64))
        censor[chosen] = at
        exit_[chosen] = np.nan
        offer[chosen] = np.nan
        kind[chosen] = 2
        late = treat[chosen] > at
        treat[chosen[late]] = np.nan
    logger.info("censoring: %d administrative, %d random", int(admin.sum()), k)
    return replace(panel, treat=treat, exit=exit_, censor=censor, offer=offer, censor_kind=kind)


def population_moments(panel: SimPanel, config: DdcConfig) -> pd.DataFrame:
    """
    Simulated offer, cost and arrival-rate moments next to the reference values
    of the configuration (descriptive only).
    """
    offers = config.beta_w_a * panel.a
    offer_sd = math.sqrt(float(np.var(offers)) + config.sigma_xi**2)
    costs = config.beta_c_a * panel.a + config.beta_c_e * panel.e
    rates = config.beta_lambda_a * panel.a + config.beta_lambda_e * panel.e
    accepted = panel.offer[~np.isnan(panel.offer)]
    rows = [
        ("offer mean", config.mu_w, float(np.mean(offers))),
        ("offer sd", config.sigma_w, offer_sd),
        ("cost mean", config.mu_c, float(np.mean(costs))),
        ("cost sd", config.sigma_c, float(np.std(costs))),
        ("arrival rate mean", config.mu_lambda, float(np.mean(rates))),
        ("arrival rate sd", config.sigma_lambda, float(np.std(rates))),
        ("accepted offer mean", math.nan, float(np.mean(accepted)) if accepted.size else math.nan),
    ]
    return pd.DataFrame(rows, columns=["moment", "reference", "simulated"])


def dgp_effects(config: DdcConfig, s_bar: int, tau: int, alpha_contrast: str = "z0_minus_z1") -> GcompEstimates:
    """
    True decomposition of the data-generating process: every agent's own
    shocks are replayed under forced regimes and forced treatment periods, so
    each potential survival outcome is observed. Aggregates weight by the
    regime-1 treatment-time distribution over (0, s_bar].

    Returns:
        GcompEstimates holding the population values
    """
    if not 1 <= s_bar <= tau:
        raise ValueError(f"need 1 <= s_bar <= tau, got s_bar={s_bar}, tau={tau}")
    if config.n_periods < tau:
        raise ValueError(f"n_periods={config.n_periods} is shorter than tau={tau}")
    table = ReservationTable.new(config)
    pop = _population(config)
    n = config.n_agents
    arrivals = np.zeros((n, tau), dtype=bool)
    xi = np.zeros((n, tau))
    for i in range(n):
        rng = _agent_rng(config, i)
        mean = config.beta_lambda_a * pop.a[i] + config.beta_lambda_e * pop.e[i]
        got = 0
        while got < tau:
            size = min(_BLOCK, config.n_periods - got)
            _, arr, x = _draw_block(rng, mean, size)
            take = min(size, tau - got)
            arrivals[i, got : got + take] = arr[:take]
            xi[i, got : got + take] = x[:take]
            got += size

    ai = pop.a - table.a_values[0]
    ei = pop.e - table.e_values[0]
    base = config.beta_w_a * pop.a
    post = table.post[ai, ei]
    accept_post = arrivals & ((base + config.beta_w_s)[:, None] + config.sigma_xi * xi >= post[:, None])
    # exit_after[:, k] is True when a post-treatment acceptance happens in periods k+1..tau
    exit_after = np.flip(np.cumsum(np.flip(accept_post, axis=1), axis=1), axis=1) > 0

    survive_never, survive_treated = [], []
    for z in (0, 1):
        pre = table.pre[ai, ei, z]
        accept_pre = arrivals & (base[:, None] + config.sigma_xi * xi >= pre[:, None])
        # exit_before[:, k] is True when a pre-treatment acceptance happens in periods 1..k
        exit_before = np.concatenate([np.zeros((n, 1), dtype=bool), np.cumsum(accept_pre, axis=1) > 0], axis=1)
        survive_never.append(~exit_before[:, tau])
        survive_treated.append(np.column_stack([~exit_before[:, s - 1] & ~exit_after[:, s - 1] for s in range(1, s_bar + 1)]))

    beta_0 = float(np.mean(survive_never[0]))
    beta_z = float(np.mean(survive_never[1])) - beta_0
    d0 = survive_treated[0].mean(axis=0) - beta_0
    d1 = survive_treated[1].mean(axis=0) - float(np.mean(survive_never[1]))
    beta_s = d0
    beta_zs = d1 - d0

    horizon = tau
    masses = np.zeros((2, horizon + 1))
    for z in (0, 1):
        pi = config.pi(z)
        masses[z, 1:] = pi * (1.0 - pi) ** (np.arange(1, horizon + 1) - 1)
    residual = np.array([(1.0 - config.pi(z)) ** horizon for z in (0, 1)])
    weights = masses[1, 1 : s_bar + 1] / masses[1, 1 : s_bar + 1].sum()
    cum = masses[:, 1 : s_bar + 1].sum(axis=1)
    alpha_z = cum[0] - cum[1] if alpha_contrast == "z0_minus_z1" else cum[1] - cum[0]
    return GcompEstimates(
        s_bar=s_bar,
        tau=tau,
        beta_0=beta_0,
        beta_z=beta_z,
        beta_s=beta_s,
        beta_zs=beta_zs,
        beta_0s=float(weights @ beta_s),
        beta_z0s=float(weights @ beta_zs),
        alpha_z=float(alpha_z),
        treat_prob=masses,
        treat_residual=residual,
        weights=weights,
    )


def simulated_spells(config: DdcConfig) -> tuple[SpellData, SimPanel]:
    """Simulate, censor and export one estimation dataset."""
    panel = apply_censoring(simulate_panel(config), config)
    return panel.to_spells(config.a_range), panel


STUDY_EFFECTS = ("beta_0", "beta_z", "beta_0s", "beta_z0s")


def simulation_study(
    config: DdcConfig,
    sizes: Iterable[int],
    replications: int,
    spec: PiecewiseSpec,
    estimation: EstimationConfig,
    fit_options: FitOptions | None = None,
    merge_tail: bool = True,
) -> pd.DataFrame:
    """
    Repeated simulate -> fit -> decompose runs per sample size, scored against
    dgp_effects on the configured population. Replication r of every size uses
    seed config.seed + r. With merge_tail, trailing baseline segments without
    events are merged per replication (small samples often leave the last
    segment of a regime empty); replications that still fail are skipped,
    logged and counted out of the "replications" column.
    """
    truth = dgp_effects(config, estimation.s_bar, estimation.tau, estimation.alpha_contrast).effects()
    rows = []
    for size in sizes:
        estimates: dict[str, list[float]] = {k: [] for k in STUDY_EFFECTS}
        for r in range(replications):
            cfg = config.replace(n_agents=int(size), seed=config.seed + r)
            data, _ = simulated_spells(cfg)
            try:
                model = merge_empty_tail(data, spec) if merge_tail else spec
                result = decompose(fit(data, model, fit_options), data, estimation)
            except DecompError as exc:
                logger.warning("study replication N=%d r=%d failed: %s", size, r, exc)
                continue
            for k in STUDY_EFFECTS:
                estimates[k].append(result.estimates[k])
        for k in STUDY_EFFECTS:
            vals = np.asarray(estimates[k], dtype=float)
            if vals.size == 0:
                rows.append({"n": int(size), "effect": k, "truth": truth[k], "estimate": math.nan, "bias": math.nan, "variance": math.nan, "mse": math.nan, "replications": 0})
                continue
            bias = float(vals.mean() - truth[k])
            variance = float(vals.var(ddof=1)) if vals.size > 1 else 0.0
            rows.append(
                {
                    "n": int(size),
                    "effect": k,
                    "truth": truth[k],
                    "estimate": float(vals.mean()),
                    "bias": bias,
                    "variance": variance,
                    "mse": bias**2 + variance,
                    "replications": int(vals.size),
                }
            )
        logger.info("study N=%d done", size)
    return pd.DataFrame(rows)
