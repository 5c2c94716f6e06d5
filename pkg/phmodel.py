"""
Joint piecewise-exponential proportional-hazards model for the exit and the
treatment durations.

Exit hazard:      theta_T(t | x, z, s) = lambda_T[z, 1(s <= t), seg(t)] * exp(x'beta_T)
Treatment hazard: theta_S(t | x, z)    = lambda_S[z, seg(t)] * exp(x'beta_S)

Times are grid periods; period t covers (t-1, t]. A spell treated in period s
is exposed to the treated exit baseline over (s-1, terminal], so treatment
precedes the exit decision of its own period.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any
import logging
import math

import numpy as np
from scipy.optimize import minimize

from errors import ConvergenceError, CoverageError, IdentificationError, NumericalError, SingularInformationError
from parameters import FitOptions, PiecewiseSpec
from spells import SpellData

logger = logging.getLogger(__name__)


def cumulative_baseline(cuts: tuple[float, ...], rates: np.ndarray, u: np.ndarray | float) -> np.ndarray:
    """Integral of a piecewise-constant rate from 0 to u; the last segment is open-ended."""
    lower = np.asarray(cuts, dtype=float)
    width = np.append(np.diff(lower), np.inf)
    u = np.asarray(u, dtype=float)
    covered = np.clip(u[..., None] - lower, 0.0, width)
    return covered @ np.asarray(rates, dtype=float)


def segment_exposure(cuts: tuple[float, ...], a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Length of [a, b] falling in each segment, one row per interval (empty when b <= a)."""
    lower = np.asarray(cuts, dtype=float)
    upper = np.append(lower[1:], np.inf)
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[:, None]
    return np.clip(np.minimum(b, upper) - np.maximum(a, lower), 0.0, None)


def segment_of(cuts: tuple[float, ...], t: np.ndarray | float) -> np.ndarray:
    """Segment index k with cuts[k] < t <= cuts[k+1]."""
    return np.maximum(np.searchsorted(np.asarray(cuts), t, side="left") - 1, 0)


@dataclass(frozen=True)
class HazardParams:
    """
    log_exit[z, treated, segment], log_treat[z, segment] and the covariate
    coefficients. The flat parameter vector orders them as listed.
    """

    spec: PiecewiseSpec
    log_exit: np.ndarray
    log_treat: np.ndarray
    beta_exit: np.ndarray
    beta_treat: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector())):
            raise NumericalError("hazard parameters must be finite")

    @property
    def n_covariates(self) -> int:
        return int(self.beta_exit.shape[0])

    @property
    def exit_rates(self) -> np.ndarray:
        return np.exp(self.log_exit)

    @property
    def treat_rates(self) -> np.ndarray:
        return np.exp(self.log_treat)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.log_exit.ravel(), self.log_treat.ravel(), self.beta_exit, self.beta_treat])

    def names(self) -> list[str]:
        return parameter_names(self.spec, self.covariate_names)

    def with_vector(self, theta: np.ndarray) -> HazardParams:
        return HazardParams.from_vector(theta, self.spec, self.covariate_names)

    @classmethod
    def from_vector(cls, theta: np.ndarray, spec: PiecewiseSpec, covariate_names: tuple[str, ...] = ()) -> HazardParams:
        kt, ks, p = spec.n_exit_segments, spec.n_treat_segments, len(covariate_names)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (4 * kt + 2 * ks + 2 * p,):
            raise ValueError(f"parameter vector has length {theta.shape}, expected {4 * kt + 2 * ks + 2 * p}")
        i = 4 * kt
        j = i + 2 * ks
        return cls(
            spec=spec,
            log_exit=theta[:i].reshape(2, 2, kt),
            log_treat=theta[i:j].reshape(2, ks),
            beta_exit=theta[j : j + p],
            beta_treat=theta[j + p :],
            covariate_names=tuple(covariate_names),
        )

    @classmethod
    def new(cls, spec: PiecewiseSpec, covariate_names: tuple[str, ...] = (), exit_rate: float = 0.01, treat_rate: float = 0.01) -> HazardParams:
        """Constant baselines and zero coefficients."""
        p = len(covariate_names)
        return cls(
            spec=spec,
            log_exit=np.full((2, 2, spec.n_exit_segments), math.log(exit_rate)),
            log_treat=np.full((2, spec.n_treat_segments), math.log(treat_rate)),
            beta_exit=np.zeros(p),
            beta_treat=np.zeros(p),
            covariate_names=tuple(covariate_names),
        )


def parameter_names(spec: PiecewiseSpec, covariate_names: tuple[str, ...]) -> list[str]:
    names = [f"logT[z={z},tr={tr},seg={k}]" for z in (0, 1) for tr in (0, 1) for k in range(spec.n_exit_segments)]
    names += [f"logS[z={z},seg={k}]" for z in (0, 1) for k in range(spec.n_treat_segments)]
    names += [f"bT[{c}]" for c in covariate_names]
    names += [f"bS[{c}]" for c in covariate_names]
    return names


@dataclass(frozen=True)
class _Design:
    """Per-spell exposures and event cells of the likelihood, computed once per dataset."""

    z: np.ndarray
    x: np.ndarray
    exit_exposure: np.ndarray  # (n, 2, K_T): untreated / treated
    treat_exposure: np.ndarray  # (n, K_S)
    exit_cell: np.ndarray  # (n,) flat index into log_exit or -1
    treat_cell: np.ndarray  # (n,) flat index into log_treat or -1

    @classmethod
    def new(cls, data: SpellData, spec: PiecewiseSpec) -> _Design:
        if not data.discretized:
            raise CoverageError("the hazard model is fitted on a discretized dataset; call discretize() first")
        terminal = data.terminal
        if data.n and float(terminal.max()) > spec.upper:
            i = int(np.argmax(terminal))
            raise CoverageError(f"record {data.ids[i]!r} ends at {terminal[i]:g}, beyond the model horizon {spec.upper:g}")
        treated = data.treated
        switch = np.where(treated, np.nan_to_num(data.treat) - 1.0, terminal)
        zeros = np.zeros(data.n)
        untreated = segment_exposure(spec.exit_cuts, zeros, np.minimum(switch, terminal))
        post = segment_exposure(spec.exit_cuts, switch, np.where(treated, terminal, switch))
        treat_end = np.where(treated, np.nan_to_num(data.treat), terminal)
        kt, ks = spec.n_exit_segments, spec.n_treat_segments

        exit_cell = np.full(data.n, -1, dtype=np.int64)
        ex = data.exited
        exit_cell[ex] = (data.z[ex] * 2 + treated[ex]) * kt + segment_of(spec.exit_cuts, terminal[ex])
        treat_cell = np.full(data.n, -1, dtype=np.int64)
        treat_cell[treated] = data.z[treated] * ks + segment_of(spec.treat_cuts, data.treat[treated])
        return cls(
            z=data.z.astype(np.int64),
            x=data.x.astype(float),
            exit_exposure=np.stack([untreated, post], axis=1),
            treat_exposure=segment_exposure(spec.treat_cuts, zeros, treat_end),
            exit_cell=exit_cell,
            treat_cell=treat_cell,
        )

    def event_counts(self, spec: PiecewiseSpec) -> tuple[np.ndarray, np.ndarray]:
        kt, ks = spec.n_exit_segments, spec.n_treat_segments
        exits = np.bincount(self.exit_cell[self.exit_cell >= 0], minlength=4 * kt)
        treats = np.bincount(self.treat_cell[self.treat_cell >= 0], minlength=2 * ks)
        return exits, treats


def _loglik_and_grad(theta: np.ndarray, design: _Design, spec: PiecewiseSpec, p: int) -> tuple[float, np.ndarray]:
    kt, ks = spec.n_exit_segments, spec.n_treat_segments
    i, j = 4 * kt, 4 * kt + 2 * ks
    log_exit = theta[:i].reshape(2, 2, kt)
    log_treat = theta[i:j].reshape(2, ks)
    b_exit, b_treat = theta[j : j + p], theta[j + p :]

    rel_exit = np.exp(design.x @ b_exit)
    rel_treat = np.exp(design.x @ b_treat)
    rate_exit = np.exp(log_exit)[design.z]  # (n, 2, K_T)
    rate_treat = np.exp(log_treat)[design.z]  # (n, K_S)

    # per-spell integrated hazard contributions by cell
    contrib_exit = design.exit_exposure * rate_exit * rel_exit[:, None, None]
    contrib_treat = design.treat_exposure * rate_treat * rel_treat[:, None]
    cum_exit = contrib_exit.sum(axis=(1, 2))
    cum_treat = contrib_treat.sum(axis=1)

    exited = design.exit_cell >= 0
    treated = design.treat_cell >= 0
    ll = (
        theta[:i][design.exit_cell[exited]].sum()
        + (design.x[exited] @ b_exit).sum()
        - cum_exit.sum()
        + theta[i:j][design.treat_cell[treated]].sum()
        + (design.x[treated] @ b_treat).sum()
        - cum_treat.sum()
    )

    grad = np.zeros_like(theta)
    g_exit = np.bincount(design.exit_cell[exited], minlength=i).astype(float)
    g_treat = np.bincount(design.treat_cell[treated], minlength=2 * ks).astype(float)
    for z in (0, 1):
        m = design.z == z
        g_exit[z * 2 * kt : (z + 1) * 2 * kt] -= contrib_exit[m].sum(axis=0).ravel()
        g_treat[z * ks : (z + 1) * ks] -= contrib_treat[m].sum(axis=0)
    grad[:i] = g_exit
    grad[i:j] = g_treat
    if p:
        grad[j : j + p] = design.x[exited].sum(axis=0) - cum_exit @ design.x
        grad[j + p :] = design.x[treated].sum(axis=0) - cum_treat @ design.x
    return float(ll), grad


def log_likelihood(params: HazardParams, data: SpellData, gradient: bool = False) -> float | tuple[float, np.ndarray]:
    """
    Joint log-likelihood of treatment and exit durations.

    Args:
        params: Parameter point (its spec defines the segments)
        data: Discretized spells whose covariates match params.covariate_names
        gradient: Also return the analytic gradient with respect to params.vector()

    Returns:
        The log-likelihood, or (log-likelihood, gradient)
    """
    if data.n_covariates != params.n_covariates:
        raise ValueError(f"dataset has {data.n_covariates} covariates, parameters expect {params.n_covariates}")
    design = _Design.new(data, params.spec)
    ll, grad = _loglik_and_grad(params.vector(), design, params.spec, params.n_covariates)
    return (ll, grad) if gradient else ll


@dataclass(frozen=True)
class FitResult:
    """
    Maximum-likelihood estimates with the inverse observed information as
    covariance. Rows and columns of pinned (unidentified) parameters are zero.
    """

    params: HazardParams
    covariance: np.ndarray
    log_likelihood: float
    n_iter: int
    grad_norm: float
    converged: bool
    n_obs: int
    unidentified: tuple[str, ...] = ()
    message: str = ""
    trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def summary(self) -> list[tuple[str, float, float]]:
        return list(zip(self.params.names(), self.params.vector(), self.std_errors))

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.params.spec.to_dict(),
            "covariate_names": list(self.params.covariate_names),
            "parameter_names": self.params.names(),
            "theta": self.params.vector().tolist(),
            "covariance": self.covariance.tolist(),
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "unidentified": list(self.unidentified),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FitResult:
        spec = PiecewiseSpec.from_dict(data["spec"])
        params = HazardParams.from_vector(np.asarray(data["theta"], dtype=float), spec, tuple(data["covariate_names"]))
        return cls(
            params=params,
            covariance=np.asarray(data["covariance"], dtype=float),
            log_likelihood=float(data["log_likelihood"]),
            n_iter=int(data["n_iter"]),
            grad_norm=float(data["grad_norm"]),
            converged=bool(data["converged"]),
            n_obs=int(data["n_obs"]),
            unidentified=tuple(data.get("unidentified", ())),
            message=data.get("message", ""),
        )


def _starting_values(design: _Design, spec: PiecewiseSpec, p: int) -> np.ndarray:
    """Log occurrence/exposure rate per baseline cell, zero coefficients."""
    kt, ks = spec.n_exit_segments, spec.n_treat_segments
    exits, treats = design.event_counts(spec)
    exp_exit = np.zeros(4 * kt)
    exp_treat = np.zeros(2 * ks)
    for z in (0, 1):
        m = design.z == z
        exp_exit[z * 2 * kt : (z + 1) * 2 * kt] = design.exit_exposure[m].sum(axis=0).ravel()
        exp_treat[z * ks : (z + 1) * ks] = design.treat_exposure[m].sum(axis=0)
    with np.errstate(divide="ignore"):
        start_exit = np.log(np.maximum(exits, 0.5) / np.maximum(exp_exit, 1e-12))
        start_treat = np.log(np.maximum(treats, 0.5) / np.maximum(exp_treat, 1e-12))
    return np.concatenate([start_exit, start_treat, np.zeros(2 * p)])


def _check_identification(design: _Design, spec: PiecewiseSpec, names: list[str], p: int) -> np.ndarray:
    """
    Raise for baseline cells without events; return a mask of free
    parameters in which coefficients on all-zero covariate columns are pinned.
    """
    exits, treats = design.event_counts(spec)
    counts = np.concatenate([exits, treats])
    missing = [names[k] for k in np.flatnonzero(counts == 0)]
    if missing:
        raise IdentificationError("no events to identify baseline parameter(s); merge segments or drop the cell", missing)
    free = np.ones(len(names), dtype=bool)
    if p:
        zero_cols = ~np.any(design.x != 0, axis=0)
        base = counts.size
        free[base : base + p] = ~zero_cols
        free[base + p :] = ~zero_cols
    return free


def merge_empty_tail(data: SpellData, spec: PiecewiseSpec) -> PiecewiseSpec:
    """
    Drop trailing cutpoints, so the last segment absorbs the one after it,
    until every cell of the last exit and treatment segment holds an event.
    Empty cells before the tail are left for fit() to report.
    """
    exit_cuts, treat_cuts = list(spec.exit_cuts), list(spec.treat_cuts)
    while True:
        current = PiecewiseSpec(exit_cuts=tuple(exit_cuts), treat_cuts=tuple(treat_cuts), horizon=spec.horizon)
        exits, treats = _Design.new(data, current).event_counts(current)
        drop_exit = len(exit_cuts) > 1 and bool(np.any(exits.reshape(4, -1)[:, -1] == 0))
        drop_treat = len(treat_cuts) > 1 and bool(np.any(treats.reshape(2, -1)[:, -1] == 0))
        if not (drop_exit or drop_treat):
            if current != spec:
                logger.info("merged empty tail segments: exit cuts %s, treatment cuts %s", current.exit_cuts, current.treat_cuts)
            return current
        if drop_exit:
            exit_cuts.pop()
        if drop_treat:
            treat_cuts.pop()


def numerical_hessian(grad_fn, theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    k = theta.size
    hess = np.empty((k, k))
    for j in range(k):
        h = max(rel_step, rel_step * abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        hess[:, j] = (grad_fn(up) - grad_fn(down)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def _covariance(information: np.ndarray, names: list[str]) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(information)
    scale = max(float(np.abs(eigval).max()), 1.0)
    if eigval[0] <= 1e-8 * scale:
        loading = np.abs(eigvec[:, 0])
        involved = [names[k] for k in np.flatnonzero(loading >= 0.1 * loading.max())]
        raise SingularInformationError("observed information is singular; near-collinear parameters", involved)
    cov = eigvec @ np.diag(1.0 / eigval) @ eigvec.T
    return 0.5 * (cov + cov.T)


def _converged(grad_norm: float, trace: list[float], n: int, options: FitOptions) -> bool:
    """
    Gradient infinity-norm of the mean log-likelihood below gtol, or a last
    relative objective change of at most ftol (mean scale, as L-BFGS-B measures it).
    """
    if grad_norm < options.gtol:
        return True
    if len(trace) < 2 or not all(math.isfinite(v) for v in trace[-2:]):
        return False
    a, b = trace[-2], trace[-1]
    return abs(b - a) / max(abs(a), abs(b), float(n)) <= options.ftol


def fit(data: SpellData, spec: PiecewiseSpec, options: FitOptions | None = None) -> FitResult:
    """
    Maximize the joint likelihood with L-BFGS-B over log-baselines and
    coefficients. The objective is the negative mean log-likelihood; the
    covariance inverts the observed information of the full-sample likelihood.
    """
    options = options or FitOptions()
    design = _Design.new(data, spec)
    p = data.n_covariates
    names = parameter_names(spec, data.covariate_names)
    free = _check_identification(design, spec, names, p)
    pinned = [names[k] for k in np.flatnonzero(~free)]
    if pinned:
        logger.warning("covariate column(s) with no variation, coefficients pinned at 0: %s", ", ".join(pinned))

    theta0 = _starting_values(design, spec, p)
    n = max(data.n, 1)
    trace: list[float] = []

    def full(free_theta: np.ndarray) -> np.ndarray:
        theta = theta0.copy()
        theta[free] = free_theta
        return theta

    def objective(free_theta: np.ndarray) -> tuple[float, np.ndarray]:
        ll, grad = _loglik_and_grad(full(free_theta), design, spec, p)
        if not np.isfinite(ll):
            return math.inf, np.zeros(int(free.sum()))
        return -ll / n, -grad[free] / n

    def record(xk: np.ndarray) -> None:
        trace.append(-objective(xk)[0] * n)

    def run(start: np.ndarray):
        return minimize(
            objective,
            start,
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={"maxiter": options.max_iter, "gtol": options.gtol, "ftol": options.ftol},
        )

    def gradient_norm(free_theta: np.ndarray) -> float:
        grad = _loglik_and_grad(full(free_theta), design, spec, p)[1]
        return float(np.abs(grad[free]).max() / n) if free.any() else 0.0

    res = run(theta0[free])
    iterations = int(res.nit)
    if not _converged(gradient_norm(res.x), trace, n, options) and iterations < options.max_iter:
        # a fresh quasi-Newton memory clears most line-search stalls
        logger.info("optimizer stopped with %r; restarting from the last iterate", res.message)
        res = run(res.x)
        iterations += int(res.nit)
    theta = full(res.x)
    ll, _ = _loglik_and_grad(theta, design, spec, p)
    grad_norm = gradient_norm(res.x)
    if not _converged(grad_norm, trace, n, options):
        best = HazardParams.from_vector(theta, spec, data.covariate_names)
        raise ConvergenceError(
            f"likelihood maximization did not converge after {iterations} iterations (gradient norm {grad_norm:.2e}): {res.message}", best=best, trace=trace
        )
    logger.info("fit converged in %d iterations, log-likelihood %.4f, gradient norm %.2e", iterations, ll, grad_norm)

    free_names = [nm for nm, f in zip(names, free) if f]

    def free_grad(ft: np.ndarray) -> np.ndarray:
        return -_loglik_and_grad(full(ft), design, spec, p)[1][free]

    information = numerical_hessian(free_grad, res.x, options.hessian_step)
    cov_free = _covariance(information, free_names)
    cov = np.zeros((theta.size, theta.size))
    cov[np.ix_(free, free)] = cov_free

    return FitResult(
        params=HazardParams.from_vector(theta, spec, data.covariate_names),
        covariance=cov,
        log_likelihood=ll,
        n_iter=iterations,
        grad_norm=grad_norm,
        converged=True,
        n_obs=data.n,
        unidentified=tuple(pinned),
        message=str(res.message),
        trace=tuple(trace),
    )


def _relative_risk(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != beta.shape[0]:
        raise ValueError(f"covariate vector has {x.shape[1]} entries, model has {beta.shape[0]}")
    return np.exp(x @ beta)


def _check_interval(spec: PiecewiseSpec, lo: float, hi: float) -> None:
    if lo < 0 or hi < lo:
        raise CoverageError(f"invalid interval [{lo}, {hi}]")
    if hi > spec.upper:
        raise CoverageError(f"interval end {hi:g} is beyond the model horizon {spec.upper:g}")


def predict_survival(params: HazardParams, x: np.ndarray, z: int, s: int | None, lo: float, hi: float) -> np.ndarray | float:
    """
    exp(-integral of theta_T over [lo, hi]) under the treatment path "treated in
    period s" (None for never treated). One value per row of x; a float for a
    single covariate vector.
    """
    _check_interval(params.spec, lo, hi)
    rel = _relative_risk(x, params.beta_exit)
    cuts = params.spec.exit_cuts
    rates0, rates1 = params.exit_rates[z, 0], params.exit_rates[z, 1]
    if s is None:
        cum = cumulative_baseline(cuts, rates0, hi) - cumulative_baseline(cuts, rates0, lo)
    else:
        sw = s - 1.0
        cum = (
            cumulative_baseline(cuts, rates0, min(hi, sw))
            - cumulative_baseline(cuts, rates0, min(lo, sw))
            + cumulative_baseline(cuts, rates1, max(hi, sw))
            - cumulative_baseline(cuts, rates1, max(lo, sw))
        )
    out = np.exp(-rel * float(cum))
    return float(out[0]) if np.ndim(x) == 1 else out


def predict_treatment_density(params: HazardParams, x: np.ndarray, z: int, s: int, kind: str = "density") -> np.ndarray | float:
    """
    Treatment sub-density at s: theta_S(s) * exp(-integral_0^s theta_S).
    kind="mass" gives the probability of treatment inside period s instead,
    exp(-Lambda_S(s-1)) - exp(-Lambda_S(s)), which sums with the never-treated
    mass to one.
    """
    _check_interval(params.spec, 0.0, float(s))
    rel = _relative_risk(x, params.beta_treat)
    cuts = params.spec.treat_cuts
    rates = params.treat_rates[z]
    if kind == "density":
        out = rates[int(segment_of(cuts, s))] * rel * np.exp(-rel * float(cumulative_baseline(cuts, rates, s)))
    elif kind == "mass":
        out = np.exp(-rel * float(cumulative_baseline(cuts, rates, s - 1.0))) - np.exp(-rel * float(cumulative_baseline(cuts, rates, s)))
    else:
        raise ValueError(f"kind must be 'density' or 'mass', got {kind!r}")
    return float(out[0]) if np.ndim(x) == 1 else out


def never_treated_probability(params: HazardParams, x: np.ndarray, z: int, horizon: float) -> np.ndarray | float:
    rel = _relative_risk(x, params.beta_treat)
    out = np.exp(-rel * float(cumulative_baseline(params.spec.treat_cuts, params.treat_rates[z], horizon)))
    return float(out[0]) if np.ndim(x) == 1 else out
