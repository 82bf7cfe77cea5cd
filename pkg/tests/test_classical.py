import numpy as np
import pytest

from stochquant.classical import classical_velocity_field, integrate_hamilton
from stochquant.schrodinger import free_particle, harmonic, product_system, quartic


def test_oscillator_follows_cosine():
    tr = integrate_hamilton([1.0], [0.0], harmonic(), 1e-3, 2 * np.pi)
    assert tr.times[-1] == pytest.approx(2 * np.pi, abs=1e-12)
    assert np.max(np.abs(tr.q[:, 0] - np.cos(tr.times))) < 1e-6
    assert np.max(np.abs(tr.p[:, 0] + np.sin(tr.times))) < 1e-6


def test_free_motion_is_exact():
    tr = integrate_hamilton([0.5], [2.0], free_particle(mass=2.0), 0.1, 3.0)
    assert np.max(np.abs(tr.q[:, 0] - (0.5 + tr.times))) < 1e-13
    assert np.all(tr.p[:, 0] == 2.0)


def test_energy_conserved():
    tr = integrate_hamilton([1.2], [-0.3], quartic(), 1e-3, 20.0, record_every=100)
    e = tr.energies(quartic())
    assert np.max(np.abs(e - e[0])) < 1e-5 * e[0]


def test_time_reversal():
    fwd = integrate_hamilton([0.7], [0.4], quartic(), 1e-3, 5.0)
    back = integrate_hamilton(fwd.q[-1], -fwd.p[-1], quartic(), 1e-3, 5.0)
    assert np.abs(back.q[-1, 0] - 0.7) < 1e-8
    assert np.abs(back.p[-1, 0] + 0.4) < 1e-8


def test_negative_dt_runs_backwards():
    tr = integrate_hamilton([1.0], [0.0], harmonic(), -1e-3, np.pi / 2)
    assert tr.times[-1] == pytest.approx(-np.pi / 2)
    assert tr.q[-1, 0] == pytest.approx(0.0, abs=1e-6)
    assert tr.p[-1, 0] == pytest.approx(1.0, abs=1e-6)


def test_ensemble_and_two_particles():
    q0 = np.array([[1.0, 0.0, -2.0]])
    tr = integrate_hamilton(q0, np.zeros_like(q0), harmonic(), 1e-3, np.pi)
    assert tr.q.shape == (tr.times.size, 1, 3)
    assert np.allclose(tr.q[-1, 0], -q0[0], atol=1e-6)
    sys2 = product_system(harmonic(), free_particle())
    two = integrate_hamilton([1.0, 0.0], [0.0, 1.0], sys2, 1e-3, np.pi)
    assert two.q[-1] == pytest.approx([-1.0, np.pi], abs=1e-6)


def test_bad_input():
    with pytest.raises(ValueError):
        integrate_hamilton([1.0], [0.0], harmonic(), 0.0, 1.0)
    with pytest.raises(ValueError):
        integrate_hamilton([1.0, 2.0], [0.0], harmonic(), 1e-3, 1.0)


def test_velocity_field():
    grad = np.array([[0.0, 1.0, -3.0]])
    assert classical_velocity_field(harmonic(mass=2.0), grad).tolist() == [[0.0, 0.5, -1.5]]
    with pytest.raises(ValueError):
        classical_velocity_field(harmonic(), np.zeros((2, 3)))
