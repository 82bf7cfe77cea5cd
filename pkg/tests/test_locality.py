import dataclasses

import numpy as np
import pytest

from stochquant.fields import SpatialGrid, WaveFunction
from stochquant.locality import (OUT_OF_SCOPE, ProductScenario, check_decomposition,
                                 check_transition_separability, interaction_defect,
                                 is_product_state, marginal_invariance_test)
from stochquant.schrodinger import (SPLIT_STEP, ClassicalSystem, PropagatorConfig,
                                    analytic_state, free_particle, harmonic, product_system,
                                    quartic)
from stochquant.stochastic import FieldFrames, ModelParams, evolve_ensemble

G1 = SpatialGrid(16.0, 64)
# split-step factorizes exactly over independent axes; Crank-Nicolson does not
CFG = PropagatorConfig(SPLIT_STEP, 1e-3, 0)


def sho_pair(psi2=None, system2=None):
    a = analytic_state("sho-coherent", {"q0": 1.0}, 0.0, G1)
    b = psi2 if psi2 is not None else analytic_state("sho-ground", {}, 0.0, G1)
    return ProductScenario(harmonic(), system2 or harmonic(), a, b)


def test_two_ground_states_have_no_theta():
    g = analytic_state("sho-ground", {}, 0.0, G1)
    rep = check_decomposition(ProductScenario(harmonic(), harmonic(), g, g), 0.1, CFG,
                              n_sigma=1000)
    assert rep.theta_defect < 1e-6
    assert rep.passed()


def test_coherent_times_free_gaussian_is_additive():
    sc = ProductScenario(harmonic(), free_particle(),
                         analytic_state("sho-coherent", {"q0": 1.0}, 0.0, G1),
                         analytic_state("free-gaussian", {}, 0.0, G1))
    rep = check_decomposition(sc, 0.2, CFG, n_sigma=1000)
    for name in ("product_defect", "theta_defect", "info_defect", "grad_s_defect",
                 "dt_s_defect", "sigma_defect"):
        assert getattr(rep, name) < 1e-6, name
    assert 0 < rep.mask_fraction <= 1


def test_interaction_detected_and_rejected():
    grid = SpatialGrid((16.0, 16.0), (64, 64))
    sep = product_system(harmonic(), quartic())
    assert interaction_defect(sep, grid) < 1e-12
    coupled = ClassicalSystem(sep.masses, lambda q: sep.V(q) + 0.3 * q[0] * q[1])
    # the defect is relative to max |V|, about 1300 for the quartic on this grid
    assert interaction_defect(coupled, grid) > 1e-6

    @dataclasses.dataclass(frozen=True)
    class Coupled(ProductScenario):
        @property
        def system(self):
            return coupled

    sc = sho_pair()
    bad = Coupled(sc.system1, sc.system2, sc.psi1, sc.psi2)
    with pytest.raises(ValueError, match="interacting"):
        check_decomposition(bad, 0.1, CFG)


def test_transition_separability():
    rep = check_transition_separability(1.0, 10 ** 6, 0)
    assert abs(rep.correlation) < 0.004
    assert all(abs(m - 0.5) < 0.005 for m in rep.means)
    assert rep.mutual_info < 3 * rep.mi_floor
    assert rep.sigma_defect < 1e-12
    assert rep.passed()


def test_static_second_particle():
    rep = check_transition_separability(1.0, 10000, 1, static_second=True)
    assert rep.correlation == 0.0 and rep.mutual_info == 0.0
    assert rep.sigma_defect == 0.0
    assert len(rep.means) == 1


@pytest.fixture(scope="module")
def marginal_run():
    params = ModelParams(dt=1e-3)
    return marginal_invariance_test(sho_pair(), quartic(), params, CFG, 400, [0.1, 0.2],
                                    seeds=(5, 5))


def test_marginal_invariance(marginal_run):
    rep = marginal_run
    assert rep.in_scope and rep.passed()
    assert all(k < rep.band for k in rep.ks_two_sample)
    assert rep.times == pytest.approx((0.1, 0.2))


def test_unchanged_potential_gives_identical_paths():
    rep = marginal_invariance_test(sho_pair(), harmonic(), ModelParams(), CFG, 200, [0.1],
                                   seeds=(2, 2))
    assert rep.max_path_gap == (0.0,)
    assert rep.ks_two_sample == (0.0,)


def test_two_particle_run_matches_single_particle(marginal_run):
    # particle 1 of the joint run against the 1D run with the same streams
    sc = sho_pair()
    frames = FieldFrames(sc.psi1, harmonic(), PropagatorConfig(SPLIT_STEP, 1e-3, 200))
    one = evolve_ensemble(frames, harmonic(), ModelParams(), 400, 5, [0.1, 0.2],
                          initial=marginal_run.details["initial"][0:1])
    gap = np.abs(one.positions[:, 0] - marginal_run.details["positions"][:, 0])
    assert gap.max() < 1e-6


def test_mismatched_seeds_rejected():
    with pytest.raises(ValueError, match="seeds"):
        marginal_invariance_test(sho_pair(), quartic(), ModelParams(), CFG, 100, [0.1],
                                 seeds=(1, 2))


def test_entangled_state_out_of_scope():
    grid = SpatialGrid((16.0, 16.0), (64, 64))
    a = np.asarray(analytic_state("sho-coherent", {"q0": 1.5}, 0.0, G1).values)
    b = np.asarray(analytic_state("sho-coherent", {"q0": -1.5}, 0.0, G1).values)
    cat = WaveFunction(np.outer(a, b) + np.outer(b, a), grid).normalized()
    assert not is_product_state(cat)
    sc = dataclasses.replace(sho_pair(), joint_state=cat)
    rep = marginal_invariance_test(sc, quartic(), ModelParams(), CFG, 100, [0.1])
    assert rep.status == OUT_OF_SCOPE
    assert not rep.in_scope and rep.passed()
