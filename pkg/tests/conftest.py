from pathlib import Path

import numpy as np
import pytest

from parameters import PiecewiseSpec, TimeGrid
from phmodel import FitResult, HazardParams
from spells import SpellData, write_spells


@pytest.fixture
def km_spells() -> SpellData:
    """Four untreated spells: exit 1, censored 2, exit 3, censored 4."""
    return SpellData.new(z=[0, 0, 0, 0], treat=[None] * 4, exit=[1, None, 3, None], censor=[None, 2, None, 4], discretized=True)


@pytest.fixture
def gcomp_spells() -> SpellData:
    """
    Two regimes of four spells each on a three-period grid.
    z=0: exit 1 | censored 3 | treated 1, exit 2 | treated 2, censored 3
    z=1: treated 1, censored 3 | exit 2 | treated 1, exit 1 | censored 3
    Nobody in z=1 is treated in period 2.
    """
    return SpellData.new(
        z=[0, 0, 0, 0, 1, 1, 1, 1],
        treat=[None, None, 1, 2, 1, None, 1, None],
        exit=[1, None, 2, None, None, 2, 1, None],
        censor=[None, 3, None, 3, 3, None, None, 3],
        discretized=True,
    )


@pytest.fixture
def small_grid() -> TimeGrid:
    return TimeGrid(unit=1.0, horizon=3)


def _ph_block(z: int, shift: int) -> dict[str, list]:
    # untreated exit | untreated exit | untreated censored | treated 2, exit | treated 3, censored | treated 1, exit 1
    return {
        "z": [z] * 6,
        "treat": [None, None, None, 2, 3, 1],
        "exit": [3 + shift, 5 + shift, None, 4 + shift, None, 1],
        "censor": [None, None, 6 + shift, None, 7 + shift, None],
        "x": [1, 0, 1, 0, 1, 1],
    }


@pytest.fixture
def ph_spells() -> SpellData:
    """Twelve spells with events in every (regime, treated) exit cell and every treatment cell."""
    a, b = _ph_block(0, 0), _ph_block(1, 1)
    return SpellData.new(
        z=a["z"] + b["z"],
        treat=a["treat"] + b["treat"],
        exit=a["exit"] + b["exit"],
        censor=a["censor"] + b["censor"],
        x=np.array(a["x"] + b["x"], dtype=float).reshape(-1, 1),
        covariate_names=["x0"],
        discretized=True,
    )


@pytest.fixture
def one_segment() -> PiecewiseSpec:
    return PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0,))


def constant_fit(exit_rates: np.ndarray, treat_rates: np.ndarray, spec: PiecewiseSpec | None = None, variance: float = 1e-4) -> FitResult:
    """FitResult with constant baselines, no covariates and a diagonal covariance."""
    spec = spec or PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0,))
    params = HazardParams(
        spec=spec,
        log_exit=np.log(np.asarray(exit_rates, dtype=float)).reshape(2, 2, spec.n_exit_segments),
        log_treat=np.log(np.asarray(treat_rates, dtype=float)).reshape(2, spec.n_treat_segments),
        beta_exit=np.zeros(0),
        beta_treat=np.zeros(0),
    )
    k = params.vector().size
    return FitResult(params=params, covariance=np.eye(k) * variance, log_likelihood=0.0, n_iter=0, grad_norm=0.0, converged=True, n_obs=0)


@pytest.fixture
def make_fit():
    return constant_fit


@pytest.fixture
def spell_file(tmp_path: Path, gcomp_spells: SpellData) -> Path:
    path = tmp_path / "spells.csv"
    write_spells(gcomp_spells, path)
    return path


class GeometricBlocks:
    """Constant per-period survival: p[z] untreated, q[z] once treated."""

    def __init__(self, p: tuple[float, float], q: tuple[float, float], horizon: int = 10):
        self.p, self.q, self.horizon = p, q, horizon

    def untreated(self, z: int, lo: int, hi: int) -> float:
        return self.p[z] ** max(hi - max(lo, 1) + 1, 0)

    def treated(self, z: int, s: int, lo: int, hi: int) -> float:
        return self.q[z] ** max(hi - max(lo, s) + 1, 0)


@pytest.fixture
def geometric():
    return GeometricBlocks
