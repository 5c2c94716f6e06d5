import math

import numpy as np
import pytest

from errors import ConvergenceError, CoverageError, IdentificationError, NumericalError, SingularInformationError
from parameters import FitOptions, PiecewiseSpec
from phmodel import (
    _converged,
    cumulative_baseline,
    fit,
    FitResult,
    HazardParams,
    log_likelihood,
    merge_empty_tail,
    never_treated_probability,
    predict_survival,
    predict_treatment_density,
    segment_exposure,
    segment_of,
)
from spells import SpellData


def _params(spec: PiecewiseSpec, exit_rates, treat_rates, beta_exit=(), beta_treat=(), names=()) -> HazardParams:
    return HazardParams(
        spec=spec,
        log_exit=np.log(np.asarray(exit_rates, dtype=float)).reshape(2, 2, spec.n_exit_segments),
        log_treat=np.log(np.asarray(treat_rates, dtype=float)).reshape(2, spec.n_treat_segments),
        beta_exit=np.asarray(beta_exit, dtype=float),
        beta_treat=np.asarray(beta_treat, dtype=float),
        covariate_names=tuple(names),
    )


def test_cumulative_baseline():
    cuts = (0.0, 10.0)
    assert float(cumulative_baseline(cuts, np.array([0.1, 0.2]), 15.0)) == pytest.approx(2.0)
    assert float(cumulative_baseline(cuts, np.array([0.1, 0.2]), 5.0)) == pytest.approx(0.5)
    assert float(cumulative_baseline(cuts, np.array([0.1, 0.2]), 0.0)) == 0.0


def test_segment_of_uses_left_open_segments():
    assert segment_of((0.0, 10.0, 20.0), np.array([0.0, 1.0, 10.0, 11.0, 25.0])).tolist() == [0, 0, 0, 1, 2]


def test_segment_exposure():
    out = segment_exposure((0.0, 10.0), np.array([0.0, 8.0, 5.0]), np.array([12.0, 15.0, 5.0]))
    assert out.tolist() == [[10.0, 2.0], [2.0, 5.0], [0.0, 0.0]]


def test_params_vector_layout():
    spec = PiecewiseSpec(exit_cuts=(0.0, 5.0), treat_cuts=(0.0,))
    params = HazardParams.new(spec, ("x0",))
    names = params.names()
    assert len(names) == params.vector().size == 4 * 2 + 2 * 1 + 2
    assert names[0] == "logT[z=0,tr=0,seg=0]"
    assert names[-1] == "bS[x0]"
    assert params.with_vector(params.vector()).vector().tolist() == params.vector().tolist()


def test_params_reject_non_finite(one_segment):
    with pytest.raises(NumericalError):
        _params(one_segment, [0.1, 0.1, 0.1, 0.0], [0.1, 0.1])


def test_analytic_gradient_matches_finite_differences(ph_spells):
    spec = PiecewiseSpec(exit_cuts=(0.0, 3.0), treat_cuts=(0.0, 2.0))
    rng = np.random.default_rng(3)
    base = HazardParams.new(spec, ph_spells.covariate_names, exit_rate=0.1, treat_rate=0.2)
    params = base.with_vector(base.vector() + 0.3 * rng.standard_normal(base.vector().size))
    _, grad = log_likelihood(params, ph_spells, gradient=True)
    theta = params.vector()
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += 1e-6
        down[j] -= 1e-6
        numeric[j] = (log_likelihood(params.with_vector(up), ph_spells) - log_likelihood(params.with_vector(down), ph_spells)) / 2e-6
    assert grad == pytest.approx(numeric, rel=1e-5, abs=1e-6)


def test_log_likelihood_covariate_mismatch(ph_spells, one_segment):
    with pytest.raises(ValueError):
        log_likelihood(HazardParams.new(one_segment), ph_spells)


def test_fit_matches_occurrence_exposure_rates(ph_spells, one_segment):
    result = fit(ph_spells.without_covariates(), one_segment)
    # events / exposure per cell: exit (z, treated) then treatment by z
    expected_exit = np.log([2 / 17, 2 / 9, 2 / 20, 2 / 11])
    expected_treat = np.log([3 / 20, 3 / 23])
    assert result.params.log_exit.ravel() == pytest.approx(expected_exit, abs=1e-6)
    assert result.params.log_treat.ravel() == pytest.approx(expected_treat, abs=1e-6)
    assert result.std_errors == pytest.approx([1 / math.sqrt(2)] * 4 + [1 / math.sqrt(3)] * 2, rel=1e-4)
    assert result.converged
    assert result.n_obs == 12


def test_fit_with_covariate_improves_likelihood(ph_spells, one_segment):
    restricted = fit(ph_spells.without_covariates(), one_segment)
    full = fit(ph_spells, one_segment)
    assert full.log_likelihood >= restricted.log_likelihood - 1e-8
    assert np.all(np.linalg.eigvalsh(full.covariance) > 0)


def test_fit_pins_constant_zero_covariate(ph_spells, one_segment):
    data = SpellData.new(
        z=ph_spells.z,
        treat=[None if math.isnan(v) else v for v in ph_spells.treat],
        exit=[None if math.isnan(v) else v for v in ph_spells.exit],
        censor=[None if math.isnan(v) else v for v in ph_spells.censor],
        x=np.column_stack([ph_spells.x[:, 0], np.zeros(ph_spells.n)]),
        discretized=True,
    )
    result = fit(data, one_segment)
    assert result.unidentified == ("bT[x1]", "bS[x1]")
    assert result.std_errors[-1] == 0.0
    assert result.params.beta_treat[1] == 0.0


def test_fit_duplicate_covariate_is_singular(ph_spells, one_segment):
    data = SpellData.new(
        z=ph_spells.z,
        treat=[None if math.isnan(v) else v for v in ph_spells.treat],
        exit=[None if math.isnan(v) else v for v in ph_spells.exit],
        censor=[None if math.isnan(v) else v for v in ph_spells.censor],
        x=np.column_stack([ph_spells.x[:, 0], ph_spells.x[:, 0]]),
        discretized=True,
    )
    with pytest.raises(SingularInformationError) as err:
        fit(data, one_segment)
    assert any(name.startswith(("bT", "bS")) for name in err.value.parameters)


def test_fit_reports_cells_without_events(ph_spells):
    with pytest.raises(IdentificationError) as err:
        fit(ph_spells, PiecewiseSpec())
    assert "logT[z=0,tr=0,seg=5]" in err.value.parameters


def test_fit_rejects_data_beyond_model_horizon(ph_spells):
    with pytest.raises(CoverageError):
        fit(ph_spells, PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0,), horizon=5.0))


def test_fit_result_serializes(ph_spells, one_segment):
    result = fit(ph_spells, one_segment)
    restored = FitResult.from_dict(result.to_dict())
    assert restored.params.vector() == pytest.approx(result.params.vector())
    assert restored.params.covariate_names == ("x0",)


def test_predict_survival_never_treated(one_segment):
    params = _params(one_segment, [0.05, 0.2, 0.1, 0.3], [0.1, 0.1])
    assert predict_survival(params, np.zeros(0), 0, None, 0.0, 15.0) == pytest.approx(math.exp(-0.75))
    assert predict_survival(params, np.zeros(0), 1, None, 5.0, 15.0) == pytest.approx(math.exp(-1.0))


def test_predict_survival_switches_baseline_at_treatment(one_segment):
    params = _params(one_segment, [0.05, 0.2, 0.1, 0.3], [0.1, 0.1])
    # treated in period 5: untreated rate on [0, 4], treated rate on (4, 15]
    assert predict_survival(params, np.zeros(0), 0, 5, 0.0, 15.0) == pytest.approx(math.exp(-(4 * 0.05 + 11 * 0.2)))
    assert predict_survival(params, np.zeros(0), 0, 5, 6.0, 15.0) == pytest.approx(math.exp(-9 * 0.2))


def test_predict_survival_covariates(one_segment):
    params = _params(one_segment, [0.05, 0.2, 0.1, 0.3], [0.1, 0.1], beta_exit=[0.5], beta_treat=[0.0], names=["x0"])
    out = predict_survival(params, np.array([[1.0], [0.0]]), 0, None, 0.0, 10.0)
    assert out.tolist() == pytest.approx([math.exp(-math.exp(0.5) * 0.5), math.exp(-0.5)])


def test_predict_survival_beyond_horizon():
    spec = PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0,), horizon=20.0)
    params = HazardParams.new(spec)
    with pytest.raises(CoverageError):
        predict_survival(params, np.zeros(0), 0, None, 0.0, 25.0)


def test_treatment_masses_sum_to_one():
    spec = PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0, 10.0))
    params = _params(spec, [0.1] * 4, [0.05, 0.2, 0.03, 0.1], beta_exit=[0.0], beta_treat=[0.3], names=["x0"])
    x = np.array([[0.0], [1.0]])
    for z in (0, 1):
        total = sum(predict_treatment_density(params, x, z, s, kind="mass") for s in range(1, 21))
        total = total + never_treated_probability(params, x, z, 20.0)
        assert total.tolist() == pytest.approx([1.0, 1.0])


def test_treatment_density_closed_form():
    spec = PiecewiseSpec(exit_cuts=(0.0,), treat_cuts=(0.0, 10.0))
    params = _params(spec, [0.1] * 4, [0.05, 0.2, 0.03, 0.1])
    # s=12: rate 0.2, cumulative 10 * 0.05 + 2 * 0.2
    assert predict_treatment_density(params, np.zeros(0), 0, 12) == pytest.approx(0.2 * math.exp(-0.9))
    with pytest.raises(ValueError):
        predict_treatment_density(params, np.zeros(0), 0, 12, kind="hazard")


def _random_spells(rng: np.random.Generator, n: int, p: int) -> SpellData:
    terminal = rng.integers(1, 61, size=n)
    exited = rng.random(n) < 0.7
    treated = rng.random(n) < 0.5
    treat = [int(rng.integers(1, t + 1)) if tr else None for t, tr in zip(terminal, treated)]
    return SpellData.new(
        z=rng.integers(0, 2, size=n),
        treat=treat,
        exit=[t if e else None for t, e in zip(terminal, exited)],
        censor=[None if e else t for t, e in zip(terminal, exited)],
        x=rng.integers(0, 2, size=(n, p)).astype(float) if p else None,
        discretized=True,
    )


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences_on_random_models(seed):
    rng = np.random.default_rng(100 + seed)
    n_segments, p = 1 + seed % 6, seed % 9
    spec = PiecewiseSpec.new(60.0 / n_segments, n_segments)
    data = _random_spells(rng, 80, p)
    base = HazardParams.new(spec, data.covariate_names, exit_rate=0.05, treat_rate=0.03)
    params = base.with_vector(base.vector() + 0.3 * rng.standard_normal(base.vector().size))
    _, grad = log_likelihood(params, data, gradient=True)
    theta = params.vector()
    numeric = np.empty_like(theta)
    h = 1e-5
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        numeric[j] = (log_likelihood(params.with_vector(up), data) - log_likelihood(params.with_vector(down), data)) / (2 * h)
    assert np.max(np.abs(grad - numeric) / np.maximum(np.abs(numeric), 1.0)) < 1e-6


def test_log_likelihood_ignores_spell_order(ph_spells):
    params = HazardParams.new(PiecewiseSpec(exit_cuts=(0.0, 3.0), treat_cuts=(0.0, 2.0)), ("x0",), exit_rate=0.1, treat_rate=0.2)
    shuffled = ph_spells.subset(np.random.default_rng(5).permutation(ph_spells.n))
    assert log_likelihood(params, shuffled) == pytest.approx(log_likelihood(params, ph_spells), rel=1e-12)


def test_fit_raises_when_iterations_run_out(ph_spells, one_segment):
    with pytest.raises(ConvergenceError) as err:
        fit(ph_spells, one_segment, FitOptions(max_iter=1))
    assert err.value.best is not None
    assert len(err.value.trace) <= 1


def test_loose_gradient_alone_is_not_convergence():
    options = FitOptions()
    assert not _converged(5e-4, [-100.0, -90.0], 12, options)
    assert _converged(5e-7, [], 12, options)
    assert _converged(5e-4, [-100.0, -100.0 + 1e-9], 12, options)


def test_merge_empty_tail_drops_segments_without_events(ph_spells, one_segment):
    spec = PiecewiseSpec(exit_cuts=(0.0, 8.0, 16.0), treat_cuts=(0.0, 5.0, 10.0))
    # every exit is at or before period 6 and every treatment at or before 3
    merged = merge_empty_tail(ph_spells, spec)
    assert merged == one_segment
    assert fit(ph_spells, merged).converged
    with pytest.raises(IdentificationError):
        fit(ph_spells, spec)
    assert merge_empty_tail(ph_spells, one_segment) == one_segment


def test_predict_survival_matches_fine_grid_quadrature():
    spec = PiecewiseSpec(exit_cuts=(0.0, 10.0, 20.0), treat_cuts=(0.0,))
    rates = [0.02, 0.05, 0.03, 0.08, 0.04, 0.06, 0.01, 0.09, 0.07, 0.03, 0.05, 0.02]
    params = _params(spec, rates, [0.1, 0.1], beta_exit=[0.4], beta_treat=[0.0], names=["x0"])
    lo, hi, s, z = 2.5, 27.5, 13, 1
    h = 1e-3
    mid = lo + h * (np.arange(round((hi - lo) / h)) + 0.5)
    treated = (mid > s - 1).astype(int)
    hazard = params.exit_rates[z][treated, segment_of(spec.exit_cuts, mid)] * math.exp(0.4)
    expected = math.exp(-hazard.sum() * h)
    assert predict_survival(params, np.array([1.0]), z, s, lo, hi) == pytest.approx(expected, abs=1e-10)


def test_predict_survival_is_monotone_in_interval_end():
    spec = PiecewiseSpec(exit_cuts=(0.0, 10.0, 20.0), treat_cuts=(0.0,))
    params = _params(spec, [0.02, 0.05, 0.03, 0.08, 0.04, 0.06, 0.01, 0.09, 0.07, 0.03, 0.05, 0.02], [0.1, 0.1])
    for s in (None, 1, 15):
        values = [predict_survival(params, np.zeros(0), 0, s, 3.0, hi) for hi in np.arange(3.0, 40.0, 0.5)]
        assert values[0] == 1.0
        assert np.all(np.diff(values) <= 0)
