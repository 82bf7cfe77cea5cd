import numpy as np
import pytest

from stochquant import schrodinger as sch
from stochquant.fields import HARD_WALL, SpatialGrid, WaveFunction
from stochquant.schrodinger import (CRANK_NICOLSON, SPLIT_STEP, PropagationError,
                                    PropagatorConfig, analytic_state, apply_hamiltonian, box,
                                    energy, free_particle, harmonic, l2_distance, product_state,
                                    product_system, propagate, quartic)


def moments(psi):
    q = psi.grid.axis(0)
    rho = psi.density
    mean = psi.grid.integrate(q * rho)
    return mean, psi.grid.integrate((q - mean) ** 2 * rho)


@pytest.fixture(scope="module")
def sho_grid():
    return SpatialGrid(20.0, 256)


def test_config_validation():
    with pytest.raises(ValueError):
        PropagatorConfig(method="euler")
    with pytest.raises(ValueError):
        PropagatorConfig(dt_solver=0.0)
    with pytest.raises(ValueError):
        PropagatorConfig(steps=1.5)
    cfg = PropagatorConfig(dt_solver=1e-3)
    assert cfg.accuracy_bound_ok(SpatialGrid(10.0, 128), harmonic())
    assert not PropagatorConfig(dt_solver=1.0).accuracy_bound_ok(SpatialGrid(10.0, 128),
                                                                  harmonic())


def test_ground_state_is_stationary(sho_grid):
    psi = analytic_state("sho-ground", {}, 0.0, sho_grid)
    hpsi = apply_hamiltonian(psi.values, sho_grid, harmonic())
    assert np.max(np.abs(hpsi - 0.5 * psi.values)) < 1e-10
    assert energy(psi, harmonic()) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("method,dt", [(SPLIT_STEP, 1e-3), (CRANK_NICOLSON, 1e-3)])
def test_coherent_state_follows_classical_orbit(sho_grid, method, dt):
    psi0 = analytic_state("sho-coherent", {"q0": 1.0}, 0.0, sho_grid)
    steps = int(round(2 * np.pi / dt))
    cfg = PropagatorConfig(method, dt, steps, record_every=steps // 8)
    frames = propagate(psi0, harmonic(), cfg)
    for fr in frames:
        mean, var = moments(fr)
        assert mean == pytest.approx(np.cos(fr.time), abs=1e-4)
        assert var == pytest.approx(0.5, abs=1e-5)
        exact = analytic_state("sho-coherent", {"q0": 1.0}, fr.time, sho_grid)
        assert l2_distance(fr, exact) < 1e-4


def test_free_gaussian_spreads():
    g = SpatialGrid(40.0, 512)
    psi0 = analytic_state("free-gaussian", {"sigma0": 1.0}, 0.0, g)
    cfg = PropagatorConfig(SPLIT_STEP, 1e-3, 2000, record_every=2000)
    last = propagate(psi0, free_particle(), cfg)[-1]
    # width grows as sigma0 * sqrt(1 + (t / (2 m sigma0^2))^2): sqrt(2) at t = 2
    assert np.sqrt(moments(last)[1]) == pytest.approx(np.sqrt(2.0), abs=1e-8)
    assert l2_distance(last, analytic_state("free-gaussian", {"sigma0": 1.0}, 2.0, g)) < 1e-10


def test_box_eigenstates():
    g = SpatialGrid(1.0, 128, HARD_WALL, 0.0)
    for n in (1, 2, 3):
        psi = analytic_state("box-eigenstate", {"n": n}, 0.0, g)
        e = energy(psi, box())
        assert e == pytest.approx((np.pi * n) ** 2 / 2, rel=1e-10)
        frames = propagate(psi, box(), PropagatorConfig(CRANK_NICOLSON, 1e-4, 200,
                                                         record_every=200))
        exact = analytic_state("box-eigenstate", {"n": n}, frames[-1].time, g)
        assert l2_distance(frames[-1], exact) < 1e-5
        assert np.max(np.abs(frames[-1].density - psi.density)) < 1e-8


def test_unitarity_and_energy(sho_grid):
    psi = analytic_state("sho-coherent", {"q0": 1.5, "p0": -0.5}, 0.0, sho_grid)
    e0 = energy(psi, quartic())
    for method in (SPLIT_STEP, CRANK_NICOLSON):
        frames = propagate(psi, quartic(), PropagatorConfig(method, 1e-3, 500, record_every=100))
        for fr in frames:
            assert fr.norm() == pytest.approx(1.0, abs=1e-12)
            assert energy(fr, quartic()) == pytest.approx(e0, rel=1e-4)


def test_product_stays_product():
    g1 = SpatialGrid(12.0, 64)
    a = analytic_state("sho-coherent", {"q0": 1.0}, 0.0, g1)
    b = analytic_state("sho-ground", {}, 0.0, g1)
    sys2 = product_system(harmonic(), harmonic())
    # split-step factorizes exactly over the two axes
    cfg = PropagatorConfig(SPLIT_STEP, 1e-3, 300, record_every=300)
    joint = propagate(product_state(a, b), sys2, cfg)[-1]
    fa = propagate(a, harmonic(), cfg)[-1]
    fb = propagate(b, harmonic(), cfg)[-1]
    assert l2_distance(joint, product_state(fa, fb)) < 1e-12
    s = np.linalg.svd(np.asarray(joint.values), compute_uv=False)
    assert s[1] / s[0] < 1e-12
    # the Cayley step of a sum is not the product of Cayley steps: O(dt^3) per step
    cn = propagate(product_state(a, b), sys2, PropagatorConfig(CRANK_NICOLSON, 1e-3, 300,
                                                              record_every=300))[-1]
    assert l2_distance(cn, joint) < 1e-6


def test_non_separable_uses_iterative_solver():
    sys2 = product_system(harmonic(), harmonic())
    coupled = sch.ClassicalSystem(sys2.masses, lambda q: sys2.V(q) + 0.1 * q[0] * q[1])
    a = analytic_state("sho-ground", {}, 0.0, SpatialGrid(8.0, 32))
    psi = product_state(a, a)
    cn = propagate(psi, coupled, PropagatorConfig(CRANK_NICOLSON, 1e-2, 20, record_every=20))
    ss = propagate(psi, coupled, PropagatorConfig(SPLIT_STEP, 1e-2, 20, record_every=20))
    assert l2_distance(cn[-1], ss[-1]) < 1e-4


def test_norm_drift_raises(sho_grid, monkeypatch):
    psi = analytic_state("sho-ground", {}, 0.0, sho_grid)
    monkeypatch.setattr(sch, "make_stepper", lambda grid, system, cfg: (lambda v: 1.01 * v))
    with pytest.raises(PropagationError, match="norm drifted"):
        propagate(psi, harmonic(), PropagatorConfig(SPLIT_STEP, 1e-3, 10))


def test_rejects_unnormalized_start(sho_grid):
    with pytest.raises(ValueError):
        propagate(WaveFunction(np.ones(256), sho_grid), harmonic(), PropagatorConfig())
