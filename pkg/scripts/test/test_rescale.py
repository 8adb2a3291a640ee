import itertools

import numpy as np
import pytest

from design import DesignConfig, draw_sample
from harness import estimate_area_means
from inference import FitResult, PseudoPosteriorDraws, draw_pseudo_posterior, fit_pseudo_mle_fixed
from model import ModelSpec, unit_scores
from popgen import AreaFrame, PopulationConfig, generate_aux_frame, simulate_responses
from rescale import (adjust_pseudo_posterior, design_effect_matrices, estimate_H, estimate_J,
                     numerical_information, rescale_draws, to_fixed_parameterization)
from sae_errors import ParameterLayoutError, SingletonStratumError
from seeds import random_stream


def random_pd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d)


def scalar_draws(values):
    spec = ModelSpec(n_areas=1, family='bernoulli-logit', covariate_columns=(),
                     parameterization='fixed-intercepts')
    return PseudoPosteriorDraws(draws=np.asarray(values, dtype=float)[:, None], spec=spec)


def fixed_draws(rng, d_areas=3, K=500):
    spec = ModelSpec(n_areas=d_areas, family='gaussian', parameterization='fixed-intercepts')
    return PseudoPosteriorDraws(draws=rng.normal(size=(K, spec.layout.size)), spec=spec)


def test_to_fixed_parameterization():
    spec = ModelSpec(n_areas=2, family='gaussian')
    draws = PseudoPosteriorDraws(draws=np.array([[1.0, 0.3, 0.2, -0.2, 0.1, -0.4],
                                                 [1.0, 0.3, 0.0, 0.0, 0.1, -0.4]]), spec=spec)
    fixed = to_fixed_parameterization(draws)
    assert fixed.parameterization == 'fixed-intercepts'
    np.testing.assert_allclose(fixed.draws[0], [1.2, 0.8, 0.3, -0.4])
    np.testing.assert_allclose(fixed.draws[1, :2], [1.0, 1.0])
    with pytest.raises(ParameterLayoutError):
        to_fixed_parameterization(fixed)


def test_to_fixed_parameterization_mean_is_linear():
    rng = np.random.default_rng(0)
    spec = ModelSpec(n_areas=3, family='bernoulli-logit')
    draws = PseudoPosteriorDraws(draws=rng.normal(size=(300, spec.layout.size)), spec=spec)
    fixed = to_fixed_parameterization(draws)
    expected = draws.draws[:, 0].mean() + draws.draws[:, spec.layout.u].mean(axis=0)
    np.testing.assert_allclose(fixed.mean()[:3], expected, rtol=0, atol=1e-12)


def test_cholesky_factors_reproduce_targets():
    rng = np.random.default_rng(1)
    H, J = random_pd(rng, 4), random_pd(rng, 4)
    mats = design_effect_matrices(H, J)
    H_inv = np.linalg.inv(H)
    assert mats.positive_definite
    np.testing.assert_allclose(mats.R1.T @ mats.R1, H_inv @ J @ H_inv, atol=1e-8)
    np.testing.assert_allclose(mats.R2.T @ mats.R2, H_inv, atol=1e-8)
    assert np.allclose(np.tril(mats.R1, -1), 0.0) and np.allclose(np.tril(mats.R2, -1), 0.0)


def test_equal_information_leaves_draws_unchanged():
    rng = np.random.default_rng(2)
    draws = fixed_draws(rng)
    H = random_pd(rng, draws.draws.shape[1])
    mats = design_effect_matrices(H, H.copy())
    np.testing.assert_allclose(mats.adjustment, np.eye(mats.dim), atol=1e-10)
    out = rescale_draws(draws, mats)
    np.testing.assert_allclose(out.draws, draws.draws, atol=1e-10)
    assert out.provenance == 'weighted-rescaled'


def test_scalar_spread_doubles():
    mats = design_effect_matrices(np.array([[1.0]]), np.array([[4.0]]))
    out = rescale_draws(scalar_draws([0.0, 1.0, 2.0]), mats)
    assert list(out.draws[:, 0]) == [-1.0, 1.0, 3.0]


def test_mean_preserved_and_scale_invariance():
    rng = np.random.default_rng(3)
    draws = fixed_draws(rng)
    d = draws.draws.shape[1]
    H, J = random_pd(rng, d), random_pd(rng, d)
    out = rescale_draws(draws, design_effect_matrices(H, J))
    np.testing.assert_allclose(out.mean(), draws.mean(), rtol=0, atol=1e-12)
    A = design_effect_matrices(H, J).adjustment
    A_scaled = design_effect_matrices(7.5 * H, 7.5 * J).adjustment
    np.testing.assert_allclose(A_scaled, A, atol=1e-10)


def test_rescale_around_supplied_center():
    mats = design_effect_matrices(np.array([[1.0]]), np.array([[4.0]]))
    out = rescale_draws(scalar_draws([0.0, 1.0, 2.0]), mats, center=np.array([0.0]))
    assert list(out.draws[:, 0]) == [0.0, 2.0, 4.0]


def test_indefinite_information_passes_draws_through():
    mats = design_effect_matrices(np.diag([1.0, -1.0]), np.eye(2))
    assert not mats.positive_definite
    spec = ModelSpec(n_areas=2, family='bernoulli-logit', covariate_columns=(),
                     parameterization='fixed-intercepts')
    draws = PseudoPosteriorDraws(draws=np.arange(6.0).reshape(3, 2), spec=spec)
    out = rescale_draws(draws, mats)
    assert np.array_equal(out.draws, draws.draws)
    assert out.provenance == 'weighted'


def test_flagged_coordinates_keep_identity():
    rng = np.random.default_rng(4)
    H, J = random_pd(rng, 3), random_pd(rng, 3)
    free = np.array([True, False, True])
    A = design_effect_matrices(H, J, free=free).adjustment
    assert np.array_equal(A[1], [0.0, 1.0, 0.0]) and np.array_equal(A[:, 1], [0.0, 1.0, 0.0])
    sub = design_effect_matrices(H[np.ix_(free, free)], J[np.ix_(free, free)]).adjustment
    np.testing.assert_allclose(A[np.ix_(free, free)], sub, atol=1e-14)


def test_dimension_mismatch():
    mats = design_effect_matrices(np.eye(2), np.eye(2))
    with pytest.raises(ParameterLayoutError):
        rescale_draws(scalar_draws([0.0, 1.0]), mats)
    with pytest.raises(ParameterLayoutError):
        design_effect_matrices(np.eye(2), np.eye(3))


def weighted_sample(make_sample, seed=6, m=4, per=12):
    rng = np.random.default_rng(seed)
    area = np.repeat(np.arange(1, m + 1), per)
    x = rng.normal(size=m * per)
    y = 0.5 + x + rng.normal(0, 0.4, size=m)[area - 1] + rng.normal(size=m * per)
    return make_sample(y=y, area=area, x1=x, w_raw=rng.uniform(1.0, 5.0, size=m * per))


def test_estimate_H_matches_finite_differences(make_sample):
    sample = weighted_sample(make_sample)
    spec = ModelSpec(n_areas=4, family='gaussian', parameterization='fixed-intercepts')
    fit = fit_pseudo_mle_fixed(sample, spec)
    H = estimate_H(fit, sample, spec)
    numeric = numerical_information(fit.mode, sample, spec)
    assert np.allclose(H, H.T)
    assert np.linalg.norm(numeric - H) / np.linalg.norm(H) < 1e-4
    assert np.all(np.linalg.eigvalsh(H) > 0)


def test_estimate_J_shape_and_errors(make_sample):
    sample = weighted_sample(make_sample)
    spec = ModelSpec(n_areas=4, family='gaussian', parameterization='fixed-intercepts')
    fit = fit_pseudo_mle_fixed(sample, spec)
    J = estimate_J(fit, sample, spec, B=50, rng=random_stream(1, 'resample', 0))
    assert J.shape == (spec.layout.size, spec.layout.size)
    assert np.allclose(J, J.T)
    assert np.min(np.linalg.eigvalsh(J)) > -1e-9
    with pytest.raises(ValueError):
        estimate_J(fit, sample, spec, B=1)

    single = make_sample(y=[1.0, 2.0, 3.0, 4.0], area=[1, 1, 2, 2], psu=[1, 1, 2, 3])
    two_areas = ModelSpec(n_areas=2, family='gaussian', parameterization='fixed-intercepts')
    fit_single = FitResult(mode=np.array([2.0, 3.0, 0.0, 0.0]), spec=two_areas,
                           curvature=np.eye(4), converged=True, iterations=0)
    with pytest.raises(SingletonStratumError) as err:
        estimate_J(fit_single, single, two_areas, B=10, rng=np.random.default_rng(0))
    assert err.value.stratum == 1


def test_estimate_J_matches_linearization_variance(make_sample):
    rng = np.random.default_rng(7)
    n = 8
    y = rng.normal(1.0, 1.0, size=n)
    sample = make_sample(y=y, area=np.ones(n, dtype=int), w_raw=rng.uniform(1.0, 3.0, size=n))
    spec = ModelSpec(n_areas=1, family='gaussian', covariate_columns=(),
                     parameterization='fixed-intercepts')
    fit = FitResult(mode=np.array([1.0, 0.0]), spec=spec, curvature=np.eye(2), converged=True,
                    iterations=0)
    z = sample.table['w_norm'].to_numpy() * unit_scores(fit.mode, sample, spec)[:, 0]
    target = n / (n - 1) * np.sum((z - z.mean()) ** 2)
    J = estimate_J(fit, sample, spec, B=4000, rng=random_stream(7, 'resample', 0))
    assert J[0, 0] / target == pytest.approx(1.0, abs=0.1)


def test_adjust_pseudo_posterior_pipeline(make_sample):
    sample = weighted_sample(make_sample, seed=9)
    spec = ModelSpec(n_areas=4, family='gaussian')
    draws = draw_pseudo_posterior(sample, spec, 300, random_stream(9, 'draws', 0))
    rescaled, mats, fit = adjust_pseudo_posterior(sample, spec, draws, B=40,
                                                  rng=random_stream(9, 'resample', 0))
    fixed = to_fixed_parameterization(draws)
    assert rescaled.provenance == 'weighted-rescaled'
    assert rescaled.spec.parameterization == 'fixed-intercepts'
    assert rescaled.draws.shape == fixed.draws.shape
    np.testing.assert_allclose(rescaled.mean(), fixed.mean(), rtol=0, atol=1e-10)
    assert mats.positive_definite and mats.dim == spec.as_fixed().layout.size
    assert fit.converged and not fit.flagged


def test_matrices_csv_dump(tmp_path):
    rng = np.random.default_rng(5)
    mats = design_effect_matrices(random_pd(rng, 2), random_pd(rng, 2), names=['a', 'b'])
    mats.to_csv(str(tmp_path), prefix='rep_0000')
    for label in ('H', 'J', 'adjustment'):
        assert (tmp_path / f'rep_0000_{label}.csv').exists()


def test_rescaling_transports_covariance():
    rng = np.random.default_rng(11)
    draws = fixed_draws(rng, K=400)
    d = draws.draws.shape[1]
    mats = design_effect_matrices(random_pd(rng, d), random_pd(rng, d))
    out = rescale_draws(draws, mats)
    C = np.cov(draws.draws, rowvar=False)
    A = mats.adjustment
    np.testing.assert_allclose(np.cov(out.draws, rowvar=False), A.T @ C @ A, rtol=0, atol=1e-10)


def test_estimate_J_matches_half_sample_enumeration(make_sample):
    # 4 UPs dans une strate: 2 gardées par réplicat, multiplicateur 2 sur celles-ci
    y = np.array([0.2, 1.7, -0.4, 2.5])
    sample = make_sample(y=y, area=np.ones(4, dtype=int), w_raw=[2.0, 1.0, 3.0, 2.0])
    spec = ModelSpec(n_areas=1, family='gaussian', covariate_columns=(),
                     parameterization='fixed-intercepts')
    fit = FitResult(mode=np.array([1.0, 0.0]), spec=spec, curvature=np.eye(2), converged=True,
                    iterations=0)
    wG = sample.table['w_norm'].to_numpy()[:, None] * unit_scores(fit.mode, sample, spec)
    totals = np.array([2.0 * wG[list(kept)].sum(axis=0) for kept in itertools.combinations(range(4), 2)])
    centered = totals - totals.mean(axis=0)
    exact = centered.T @ centered / totals.shape[0]

    B = 4000
    J = estimate_J(fit, sample, spec, B=B, rng=random_stream(13, 'resample', 0))
    for a in range(2):
        for b in range(2):
            products = centered[:, a] * centered[:, b]
            se = np.sqrt(products.var() / B)
            assert abs(J[a, b] - exact[a, b]) <= 4.0 * se + 1e-12


def test_estimate_J_is_stable_when_B_doubles():
    pop_cfg = PopulationConfig(seed=17)
    frame = generate_aux_frame(pop_cfg, random_stream(pop_cfg.seed, 'aux'))
    pop = simulate_responses(frame, pop_cfg, random_stream(pop_cfg.seed, 'responses', 0))
    sample = draw_sample(pop, DesignConfig('PPS2', n_per_area=30), random_stream(17, 'sample', 0))
    spec = ModelSpec(n_areas=pop.m, family='gaussian', parameterization='fixed-intercepts')
    fit = fit_pseudo_mle_fixed(sample, spec)
    J = estimate_J(fit, sample, spec, B=400, rng=random_stream(17, 'resample', 0))
    J_doubled = estimate_J(fit, sample, spec, B=800, rng=random_stream(17, 'resample', 0))
    assert np.linalg.norm(J_doubled - J) / np.linalg.norm(J) < 0.2


def test_equal_weight_srs_intervals_barely_move():
    pop_cfg = PopulationConfig(m=4, clusters_per_area=20, cluster_size=10, seed=19)
    frame = generate_aux_frame(pop_cfg, random_stream(pop_cfg.seed, 'aux'))
    pop = simulate_responses(frame, pop_cfg, random_stream(pop_cfg.seed, 'responses', 0))
    sample = draw_sample(pop, DesignConfig('SRS', n_per_area=100), random_stream(19, 'sample', 0))
    assert np.all(sample.table['w_norm'].to_numpy() == 1.0)
    table, failures, _, _ = estimate_area_means(
        sample, AreaFrame.from_population(pop), ModelSpec(n_areas=4, family='gaussian'),
        methods=('wt', 'wtrscl'), seed=19, K=1000, B=400)
    assert not failures
    length = {method: (rows['hi90'] - rows['lo90']).to_numpy()
              for method, rows in table.frame.groupby('method')}
    ratio = np.mean(length['wtrscl'] / length['wt'])
    assert ratio == pytest.approx(1.0, abs=0.1)
