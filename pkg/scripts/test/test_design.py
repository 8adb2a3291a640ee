import numpy as np
import pandas as pd
import pytest

from design import (SAMPLE_COLUMNS, DesignConfig, DrawnSample, census_sample, draw_midzuno,
                    draw_midzuno_pips, draw_sample, horvitz_thompson_total, inclusion_probabilities,
                    midzuno_inclusion_probs, midzuno_sample_distribution, normalize_weights, pps_sizes)
from sae_errors import DesignError, EmptySampleError, InvalidConfigError
from seeds import random_stream

SIZES = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])


def test_midzuno_probabilities_sum_to_n():
    pi = midzuno_inclusion_probs(SIZES, 3)
    assert pi.sum() == pytest.approx(3.0, abs=1e-12)
    assert np.all((pi > 0) & (pi <= 1))


def test_midzuno_matches_enumeration():
    dist = midzuno_sample_distribution(SIZES, 2)
    assert len(dist) == 15
    assert sum(p for _, p in dist) == pytest.approx(1.0, abs=1e-12)
    enumerated = np.zeros(SIZES.size)
    for combo, p in dist:
        enumerated[list(combo)] += p
    np.testing.assert_allclose(enumerated, midzuno_inclusion_probs(SIZES, 2), rtol=0, atol=1e-12)


def test_horvitz_thompson_unbiased_over_design():
    y = np.array([3.0, -1.0, 4.0, 1.5, 9.0, 2.6])
    pi = midzuno_inclusion_probs(SIZES, 2)
    expectation = sum(p * horvitz_thompson_total(y[list(s)], pi[list(s)])
                      for s, p in midzuno_sample_distribution(SIZES, 2))
    assert expectation == pytest.approx(y.sum(), abs=1e-10)


def test_draw_midzuno_frequencies():
    rng = np.random.default_rng(2)
    counts = np.zeros(SIZES.size)
    reps = 20000
    for _ in range(reps):
        idx = draw_midzuno(SIZES, 2, rng)
        assert idx.size == 2 and idx[0] < idx[1]
        counts[idx] += 1
    np.testing.assert_allclose(counts / reps, midzuno_inclusion_probs(SIZES, 2), atol=0.015)


def test_draw_midzuno_four_units_long_run():
    sizes = np.array([1.0, 2.0, 3.0, 6.0])
    rng = np.random.default_rng(21)
    counts = np.zeros(4)
    reps = 200000
    for _ in range(reps):
        counts[draw_midzuno(sizes, 2, rng)] += 1
    np.testing.assert_allclose(counts / reps, midzuno_inclusion_probs(sizes, 2), atol=0.005)


def test_dominant_unit_is_almost_always_drawn():
    sizes = np.array([97.0, 1.0, 1.0, 1.0])
    rng = np.random.default_rng(22)
    reps = 20000
    hits = sum(0 in draw_midzuno(sizes, 2, rng) for _ in range(reps))
    assert hits / reps >= 0.97


def test_midzuno_census_and_infeasible():
    assert np.array_equal(midzuno_inclusion_probs(SIZES, 6), np.ones(6))
    with pytest.raises(DesignError):
        midzuno_inclusion_probs([1.0, 2.0], 3)
    with pytest.raises(DesignError):
        midzuno_inclusion_probs([1.0, 0.0, 2.0], 1)


def test_pps_sizes_shift():
    assert list(pps_sizes([-2.0, 0.0, 3.0])) == [1.0, 3.0, 6.0]


def test_inclusion_probabilities_cap_repeatedly():
    np.testing.assert_allclose(inclusion_probabilities(SIZES, 2), 2.0 * SIZES / SIZES.sum(), atol=1e-15)
    pi = inclusion_probabilities([20.0, 10.0, 1.0, 1.0, 1.0, 1.0], 3)
    np.testing.assert_allclose(pi, [1.0, 1.0, 0.25, 0.25, 0.25, 0.25], atol=1e-15)
    assert pi.sum() == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(DesignError):
        inclusion_probabilities([1.0, 2.0], 3)


def test_pips_draw_hits_target_probabilities():
    pi = inclusion_probabilities(SIZES, 2)
    rng = np.random.default_rng(23)
    counts = np.zeros(SIZES.size)
    reps = 100000
    for _ in range(reps):
        idx = draw_midzuno_pips(pi, rng)
        assert idx.size == 2
        counts[idx] += 1
    np.testing.assert_allclose(counts / reps, pi, atol=0.0075)


def test_pips_draw_keeps_certainty_units():
    pi = inclusion_probabilities([10.0, 1.0, 1.0, 1.0, 1.0], 2)
    rng = np.random.default_rng(24)
    counts = np.zeros(5)
    reps = 20000
    for _ in range(reps):
        idx = draw_midzuno_pips(pi, rng)
        assert idx.size == 2 and idx[0] == 0
        counts[idx] += 1
    np.testing.assert_allclose(counts / reps, pi, atol=0.015)
    assert list(draw_midzuno_pips(np.ones(3), rng)) == [0, 1, 2]
    with pytest.raises(DesignError):
        draw_midzuno_pips([0.5, 1.5], rng)


def test_design_config_pps2_split():
    cfg = DesignConfig('pps2', n_per_area=30)
    assert cfg.design == 'PPS2'
    assert (cfg.clusters_per_area_sampled, cfg.units_per_cluster_sampled) == (6, 5)
    with pytest.raises(InvalidConfigError):
        DesignConfig('PPS2', n_per_area=30, clusters_per_area_sampled=4, units_per_cluster_sampled=5)
    with pytest.raises(InvalidConfigError):
        DesignConfig('stratified')
    assert DesignConfig('PPS1').midzuno == 'sen'
    with pytest.raises(InvalidConfigError):
        DesignConfig('PPS1', midzuno='brewer')


def test_srs_sample(gaussian_population):
    _, pop = gaussian_population
    sample = draw_sample(pop, DesignConfig('SRS', n_per_area=10), random_stream(5, 'sample', 0))
    table = sample.table
    assert sample.n == 40
    assert list(table.groupby('area').size()) == [10, 10, 10, 10]
    np.testing.assert_allclose(table['pi'], 10 / 80)
    assert np.all(table['w_norm'].to_numpy() == 1.0)
    assert np.array_equal(table['psu_id'], table['unit_id'])
    assert np.array_equal(table['stratum_id'], table['area'])
    assert sample.psu_population == {1: 80, 2: 80, 3: 80, 4: 80}


def test_pps1_sample_weights(gaussian_population):
    _, pop = gaussian_population
    sample = draw_sample(pop, DesignConfig('PPS1', n_per_area=10), random_stream(5, 'sample', 1))
    table = sample.table
    assert table['w_norm'].sum() == pytest.approx(40.0, abs=1e-9)
    np.testing.assert_allclose(table['w_raw'], 1.0 / table['pi'])
    for area, rows in table.groupby('area'):
        units = np.flatnonzero(pop.area == area)
        pi = midzuno_inclusion_probs(pps_sizes(pop.x2[units]), 10)
        expected = pi[np.searchsorted(pop.unit_id[units], rows['unit_id'].to_numpy())]
        np.testing.assert_allclose(rows['pi'], expected, rtol=1e-12)


def test_pps2_sample_structure(gaussian_population):
    _, pop = gaussian_population
    cfg = DesignConfig('PPS2', n_per_area=10)
    sample = draw_sample(pop, cfg, random_stream(5, 'sample', 2))
    table = sample.table
    assert sample.n == 40
    keys = pop.cluster_key[table['unit_id'].to_numpy() - 1]
    assert np.array_equal(table['psu_id'].to_numpy(), keys + 1)
    for _, rows in table.groupby('area'):
        assert rows['psu_id'].nunique() == 2
        assert list(rows.groupby('psu_id').size()) == [5, 5]
    assert np.all(table['pi'] <= table['pi_psu'] + 1e-15)
    assert sample.psu_population == {1: 8, 2: 8, 3: 8, 4: 8}


def test_pips_samples_carry_exact_probabilities(gaussian_population):
    _, pop = gaussian_population
    sample = draw_sample(pop, DesignConfig('PPS1', n_per_area=10, midzuno='pips'), random_stream(5, 'sample', 3))
    table = sample.table
    assert sample.n == 40
    for area, rows in table.groupby('area'):
        units = np.flatnonzero(pop.area == area)
        pi = inclusion_probabilities(pps_sizes(pop.x2[units]), 10)
        expected = pi[np.searchsorted(pop.unit_id[units], rows['unit_id'].to_numpy())]
        np.testing.assert_allclose(rows['pi'], expected, rtol=0, atol=1e-15)
    sample = draw_sample(pop, DesignConfig('PPS2', n_per_area=10, midzuno='pips'), random_stream(5, 'sample', 4))
    for _, rows in sample.table.groupby('area'):
        assert rows['psu_id'].nunique() == 2 and len(rows) == 10
    assert sample.table['w_norm'].sum() == pytest.approx(40.0, abs=1e-9)


def test_sample_draws_are_reproducible(gaussian_population):
    _, pop = gaussian_population
    cfg = DesignConfig('PPS2', n_per_area=10)
    a = draw_sample(pop, cfg, random_stream(9, 'sample', 4))
    b = draw_sample(pop, cfg, random_stream(9, 'sample', 4))
    pd.testing.assert_frame_equal(a.table, b.table)


def test_census_sample(gaussian_population):
    _, pop = gaussian_population
    sample = census_sample(pop)
    assert sample.n == pop.N
    assert np.all(sample.table['pi'] == 1.0)
    assert np.all(sample.table['w_norm'] == 1.0)


def test_normalize_weights():
    table = pd.DataFrame({c: [1, 1, 1] for c in SAMPLE_COLUMNS})
    table['w_raw'] = [1.0, 2.0, 5.0]
    sample = normalize_weights(DrawnSample(table=table))
    np.testing.assert_allclose(sample.table['w_norm'], [3 / 8, 6 / 8, 15 / 8])
    with pytest.raises(EmptySampleError):
        normalize_weights(DrawnSample(table=pd.DataFrame(columns=SAMPLE_COLUMNS)))
    table['w_raw'] = [1.0, -1.0, 2.0]
    with pytest.raises(DesignError):
        normalize_weights(DrawnSample(table=table))


def test_sample_csv_round_trip(gaussian_population, tmp_path):
    _, pop = gaussian_population
    sample = draw_sample(pop, DesignConfig('PPS1', n_per_area=10), random_stream(5, 'sample', 3))
    path = tmp_path / 'sample.csv'
    sample.to_csv(str(path))
    loaded = DrawnSample.from_frame(pd.read_csv(path, float_precision='round_trip'))
    pd.testing.assert_frame_equal(loaded.table[SAMPLE_COLUMNS], sample.table[SAMPLE_COLUMNS],
                                  check_dtype=False)
