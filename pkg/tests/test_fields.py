import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochquant.fields import (HARD_WALL, PERIODIC, SpatialGrid, VortexError, WaveFunction,
                               cell_cdf, check_normalized, divergence, gradient, laplacian,
                               node_mask, polar_decompose, synthesize_wavefunction)
from stochquant.schrodinger import analytic_state


def plane_wave(grid, k):
    return WaveFunction(np.exp(1j * k * grid.axis(0)), grid).normalized()


@pytest.fixture
def ring():
    return SpatialGrid(2 * np.pi, 64, PERIODIC)


def test_grid_validation():
    with pytest.raises(ValueError):
        SpatialGrid(1.0, 8)
    with pytest.raises(ValueError):
        SpatialGrid(-1.0, 32)
    with pytest.raises(ValueError):
        SpatialGrid(1.0, 32, "open")
    g = SpatialGrid(10.0, 100)
    assert not g.spectral_ok
    assert g.spacing == (0.1,)


def test_grid_axes():
    g = SpatialGrid(1.0, 16, HARD_WALL, 0.0)
    x = g.axis(0)
    assert x[0] == pytest.approx(0.5 / 16)
    assert x[-1] == pytest.approx(1 - 0.5 / 16)
    p = SpatialGrid(2.0, 16)
    assert p.axis(0)[0] == -1.0


def test_gradient_of_sine_is_cosine(ring):
    x = ring.axis(0)
    assert np.max(np.abs(gradient(np.sin(x), ring)[0] - np.cos(x))) < 1e-10


def test_laplacian_of_constant(ring):
    assert np.max(np.abs(laplacian(np.full(64, 3.0), ring))) < 1e-12
    assert np.max(np.abs(laplacian(np.full(64, 3.0), ring, method="fd4"))) < 1e-9
    # hard walls extend fields oddly (zero outside), so only the interior is flat
    wall = SpatialGrid(1.0, 64, HARD_WALL)
    assert np.max(np.abs(laplacian(np.full(64, 3.0), wall)[2:-2])) < 1e-9


def test_fd4_order_on_hard_wall():
    errs = []
    for n in (64, 128):
        g = SpatialGrid(1.0, n, HARD_WALL, 0.0)
        x = g.axis(0)
        d = gradient(np.sin(3 * x), g, method="fd4")[0]
        inner = slice(4, -4)
        errs.append(np.max(np.abs(d[inner] - 3 * np.cos(3 * x[inner]))))
    assert errs[0] / errs[1] > 12


def test_spectral_gradient_of_exponential(ring):
    x = ring.axis(0)
    for k in (1, 3, 7):
        f = np.exp(1j * k * x)
        assert np.max(np.abs(gradient(f, ring)[0] - 1j * k * f)) < 1e-11


def test_divergence_2d():
    g = SpatialGrid((2 * np.pi, 2 * np.pi), (32, 32))
    x, y = g.mesh()
    vec = np.stack([np.sin(x), np.cos(y)])
    assert np.max(np.abs(divergence(vec, g) - (np.cos(x) - np.sin(y)))) < 1e-10


def test_plane_wave_decomposition():
    g = SpatialGrid(10 * np.pi, 256)
    f = polar_decompose(plane_wave(g, 2.0), 1.0)
    L = g.extent[0]
    assert np.max(np.abs(f.omega - 1 / L)) < 1e-14
    assert np.max(np.abs(f.grad_s - 2.0)) < 1e-10
    assert np.max(np.abs(divergence(f.grad_s, g))) < 1e-9


def test_ground_state_decomposition():
    g = SpatialGrid(20.0, 512)
    f = polar_decompose(analytic_state("sho-ground", {}, 0.0, g), 1.0)
    q = g.axis(0)
    assert np.max(np.abs(f.omega - np.exp(-q * q) / np.sqrt(np.pi))) < 1e-14
    assert np.max(np.abs(f.grad_s)) < 1e-10
    assert f.norm() == pytest.approx(1.0, abs=1e-10)


def test_real_positive_field_has_no_phase_gradient():
    g = SpatialGrid(8.0, 128)
    q = g.axis(0)
    psi = WaveFunction(np.exp(-q ** 2) * (2 + np.cos(q)), g).normalized()
    assert np.max(np.abs(polar_decompose(psi).grad_s)) == 0.0


def test_rejects_unnormalized_and_zero():
    g = SpatialGrid(8.0, 64)
    with pytest.raises(ValueError, match="normalized"):
        polar_decompose(WaveFunction(np.ones(64), g))
    with pytest.raises(ValueError):
        polar_decompose(WaveFunction(np.zeros(64), g))
    with pytest.raises(ValueError):
        check_normalized(WaveFunction(np.zeros(64), g))


def test_node_flags():
    g = SpatialGrid(1.0, 64, HARD_WALL, 0.0)
    f = polar_decompose(analytic_state("box-eigenstate", {"n": 2}, 0.0, g))
    assert f.valid.all()
    om = np.array([1.0, 1e-13, 0.5, 0.0])
    assert node_mask(om).tolist() == [True, False, True, False]


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-2.0, 2.0), st.floats(0.3, 3.0))
def test_global_phase_invariance(phi, p0, hbar):
    g = SpatialGrid(20.0, 256)
    psi = analytic_state("sho-coherent", {"q0": 0.5, "p0": p0, "hbar": hbar}, 0.0, g)
    rot = psi.with_values(np.asarray(psi.values) * np.exp(1j * phi))
    a, b = polar_decompose(psi, hbar), polar_decompose(rot, hbar)
    assert np.allclose(a.omega, b.omega, rtol=1e-14, atol=0)
    # roundoff in psi'/psi grows like 1/|psi| toward the node threshold
    assert np.max(np.abs(a.grad_s - b.grad_s)) < 1e-8 * hbar * max(1.0, np.abs(a.grad_s).max())


def test_round_trip_coherent_state():
    g = SpatialGrid(25.6, 512)
    psi = analytic_state("sho-coherent", {"q0": 1.0, "p0": 0.7}, 0.4, g)
    f = polar_decompose(psi)
    back = polar_decompose(synthesize_wavefunction(f))
    mask = f.valid
    assert np.max(np.abs(back.omega - f.omega)) < 1e-12
    assert np.max(np.abs((back.grad_s - f.grad_s)[:, mask])) < 1e-8


def test_synthesized_plane_wave_up_to_global_phase():
    g = SpatialGrid(10 * np.pi, 256)
    psi = plane_wave(g, 2.0)
    out = synthesize_wavefunction(polar_decompose(psi), reference_point=0.0)
    overlap = np.sum(np.conj(psi.values) * out.values) * g.cell_volume
    assert abs(overlap) == pytest.approx(1.0, abs=1e-10)


def test_round_trip_2d_product():
    # momenta are multiples of 2 pi / L so the phase is periodic on the box
    L = 16.0
    g1 = SpatialGrid(L, 128)
    a = analytic_state("sho-coherent", {"q0": 1.0, "p0": 4 * np.pi / L}, 0.0, g1)
    b = analytic_state("free-gaussian", {"p0": -2 * np.pi / L}, 0.0, g1)
    g = SpatialGrid((L, L), (128, 128))
    psi = WaveFunction(np.outer(a.values, b.values), g)
    f = polar_decompose(psi)
    back = polar_decompose(synthesize_wavefunction(f))
    exact = np.stack([np.full(g.shape, 4 * np.pi / L), np.full(g.shape, -2 * np.pi / L)])
    # the round trip should add no error beyond that of the decomposition itself
    for thr in (1e-2, 1e-4, 1e-6):
        mask = f.valid & (f.omega > thr * f.omega.max())
        before = np.max(np.abs((f.grad_s - exact)[:, mask]))
        after = np.max(np.abs((back.grad_s - exact)[:, mask]))
        assert after <= before + 1e-12
    bulk = f.omega > 1e-2 * f.omega.max()
    assert np.max(np.abs((back.grad_s - exact)[:, bulk])) < 1e-7


def test_vortex_rejected():
    g = SpatialGrid((8.0, 8.0), (64, 64))
    x, y = g.mesh()
    # unit-charge vortex at the origin inside a Gaussian envelope
    psi = WaveFunction((x + 1j * y) * np.exp(-(x * x + y * y) / 2), g).normalized()
    with pytest.raises(VortexError):
        synthesize_wavefunction(polar_decompose(psi))


def test_cell_cdf_ends():
    g = SpatialGrid(4.0, 16)
    edges, cdf = cell_cdf(g, np.ones(16))
    assert edges.size == 17
    assert cdf[0] == 0.0 and cdf[-1] == 1.0
    assert np.allclose(np.diff(cdf), 1 / 16)
