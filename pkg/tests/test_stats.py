import numpy as np
import pytest
from scipy import stats as sps

from stochquant.fields import SpatialGrid, WaveFunction, polar_decompose
from stochquant.schrodinger import analytic_state, free_particle, harmonic
from stochquant.stats import (ensemble_stats, expectation_compare, fisher_bound, fit_scaling,
                              ks_band, ks_distance, ks_two_sample, marginal_density,
                              momentum_from, operator_average, uncertainty_product)
from stochquant.stochastic import sample_positions, stream_signs


@pytest.fixture(scope="module")
def grid():
    return SpatialGrid(16.0, 256)


@pytest.fixture(scope="module")
def ground(grid):
    return polar_decompose(analytic_state("sho-ground", {}, 0.0, grid))


def ground_samples(grid, fields, n, seed=0):
    q = sample_positions(fields.omega, grid, n, seed)
    s = stream_signs(seed, np.arange(n), 0)[None, :]
    return momentum_from(q, s, fields, 1.0)


def test_ks_hand_example():
    d = ks_distance([0.1, 0.5, 0.9], lambda x: np.clip(x, 0, 1), min_samples=3)
    assert d == pytest.approx(0.7 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        ks_distance([0.1, 0.5, 0.9], lambda x: x)
    with pytest.raises(ValueError):
        ks_distance([], lambda x: x)


def test_ks_matches_scipy_and_band():
    x = np.random.default_rng(1).normal(size=10000)
    d = ks_distance(x, sps.norm.cdf)
    assert d == pytest.approx(sps.kstest(x, "norm").statistic, abs=1e-14)
    assert d < ks_band(x.size, 0.99)


def test_ks_against_grid_density(grid, ground):
    q = sample_positions(ground.omega, grid, 10000, 3)
    assert ks_distance(q[0], ground.omega, grid) < ks_band(10000, 0.99)
    with pytest.raises(ValueError):
        ks_distance(q[0], ground.omega)


def test_two_sample_identical_is_zero():
    a = np.full(50, 0.25)
    assert ks_two_sample(a, a) == 0.0


def test_histogram_normalized(grid, ground):
    q = sample_positions(ground.omega, grid, 5000, 2)
    st = ensemble_stats(q[0], grid, ground.omega)
    assert np.sum(st.histogram * np.diff(st.edges)) == pytest.approx(1.0)
    assert 0 <= st.ks <= 1


def test_marginal_density():
    g = SpatialGrid((4.0, 4.0), (16, 16))
    om = np.full(g.shape, 1 / 16.0)
    assert np.allclose(marginal_density(om, 0, g), 0.25)


def test_ground_state_momentum(grid, ground):
    ms = ground_samples(grid, ground, 100000)
    assert ms.excluded == 0
    err = ms.p.std() / np.sqrt(ms.n)
    assert abs(ms.p.mean()) < 4 * err
    # (hbar^2 / 4) E[(d ln Omega)^2] = 1/2
    assert ms.p.var() == pytest.approx(0.5, rel=0.02)


def test_momentum_sign_symmetry(grid, ground):
    q = sample_positions(ground.omega, grid, 20000, 9)
    s = stream_signs(9, np.arange(20000), 0)[None, :]
    a = momentum_from(q, s, ground, 1.0).p[0]
    b = momentum_from(q, -s, ground, 1.0).p[0]
    assert ks_two_sample(a, b) < 1.63 * np.sqrt(2 / 20000)


def test_plane_wave_momentum_exact():
    g = SpatialGrid(10 * np.pi, 256)
    f = polar_decompose(WaveFunction(np.exp(2j * g.axis(0)), g).normalized())
    q = np.linspace(-10, 10, 200)[None, :]
    s = np.where(np.arange(200) % 2, 1.0, -1.0)[None, :]
    assert np.allclose(momentum_from(q, s, f, 1.0).p, 2.0, atol=1e-10)


def test_uncertainty_ground_state(grid, ground):
    ms = ground_samples(grid, ground, 100000, 4)
    res = uncertainty_product(ms.q[0], ms.p[0])
    assert res.product == pytest.approx(0.5, rel=0.02)
    assert res.satisfies_bound()
    fb = fisher_bound(ground)
    # Fisher information of a unit Gaussian with variance 1/2 is 2
    assert fb.fisher == pytest.approx(2.0, rel=1e-10)
    assert fb.bound == pytest.approx(0.5, rel=1e-10)


def test_uncertainty_degenerate():
    res = uncertainty_product(np.ones(100), np.linspace(0, 1, 100))
    assert res.degenerate and not res.satisfies_bound()
    with pytest.raises(ValueError):
        uncertainty_product([1.0], [2.0])


def test_expectations(grid, ground):
    ms = ground_samples(grid, ground, 50000, 6)
    psi = analytic_state("sho-ground", {}, 0.0, grid)
    res = expectation_compare(ms, psi, "H", harmonic())
    assert res.operator == pytest.approx(0.5, abs=1e-12)
    assert abs(res.z) < 3
    with pytest.raises(ValueError):
        expectation_compare(ms, psi, "q3")
    with pytest.raises(ValueError):
        expectation_compare(ms, psi, "H")


def test_coherent_state_mean_momentum(grid):
    psi = analytic_state("sho-coherent", {"p0": 1.0}, 0.0, grid)
    f = polar_decompose(psi)
    ms = ground_samples(grid, f, 50000, 8)
    res = expectation_compare(ms, psi, "p")
    assert res.operator == pytest.approx(1.0, abs=1e-10)
    assert abs(res.z) < 3
    assert operator_average(psi, "p2") == pytest.approx(1.5, abs=1e-10)


def test_plane_wave_expectation_exact():
    g = SpatialGrid(10 * np.pi, 256)
    psi = WaveFunction(np.exp(2j * g.axis(0)), g).normalized()
    f = polar_decompose(psi)
    q = np.linspace(-10, 10, 100)[None, :]
    ms = momentum_from(q, np.ones_like(q), f, 1.0)
    res = expectation_compare(ms, psi, "p", free_particle())
    assert res.model == pytest.approx(2.0, abs=1e-10)
    assert res.z == 0.0


def test_fit_scaling():
    x = np.logspace(-4, -1, 6)
    assert fit_scaling(x, x).exponent == pytest.approx(1.0, abs=1e-12)
    noisy = np.sqrt(x) * (1 + 0.01 * np.random.default_rng(0).standard_normal(x.size))
    assert fit_scaling(x, noisy).exponent == pytest.approx(0.5, abs=0.05)
    flat = fit_scaling(x, np.full(x.size, 3.0))
    assert flat.exponent == pytest.approx(0.0, abs=1e-12)
    assert flat.prefactor == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_scaling([1, 2, 3], [1, 0, 2])
    with pytest.raises(ValueError):
        fit_scaling([1, 2], [1, 2])
