"""Classical Hamiltonian reference dynamics (the small-action limit)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schrodinger import ClassicalSystem


@dataclass(frozen=True)
class ClassicalTrajectory:
    """Phase-space path; ``q`` and ``p`` have shape ``(n_times, dims, ...)``."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def energies(self, system: ClassicalSystem) -> np.ndarray:
        return np.array([system.hamiltonian(q, p) for q, p in zip(self.q, self.p)])


def integrate_hamilton(q0, p0, system: ClassicalSystem, dt: float, T: float,
                       record_every: int = 1) -> ClassicalTrajectory:
    """Velocity-Verlet integration of Hamilton's equations for
    ``H = p^2/2m + V(q)``.

    ``q0`` and ``p0`` have a leading axis of length ``system.dims`` and may
    carry extra trailing axes to integrate a whole ensemble at once.  A
    negative ``dt`` integrates backwards in time.
    """
    if dt == 0 or not np.isfinite(dt):
        raise ValueError("dt must be finite and nonzero")
    if not T > 0:
        raise ValueError("T must be positive")
    q = np.atleast_1d(np.array(q0, dtype=float))
    p = np.atleast_1d(np.array(p0, dtype=float))
    if q.shape[0] != system.dims or p.shape != q.shape:
        raise ValueError("q0 and p0 need matching shapes with a leading axis of length dims")
    m = system.mass_array(q.ndim)
    direction = np.sign(dt)
    steps = int(np.ceil(T / abs(dt) - 1e-9))

    f = system.forces(q)
    t = 0.0
    times, qs, ps = [0.0], [q.copy()], [p.copy()]
    for k in range(1, steps + 1):
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"non-finite force at step {k - 1}")
        # last step is shortened so the run ends exactly at T
        h = dt if k < steps else direction * (T - (steps - 1) * abs(dt))
        p = p + 0.5 * h * f
        q = q + h * p / m
        f = system.forces(q)
        p = p + 0.5 * h * f
        t += h
        if k % record_every == 0 or k == steps:
            times.append(t)
            qs.append(q.copy())
            ps.append(p.copy())
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("non-finite force at the final step")
    return ClassicalTrajectory(np.array(times), np.array(qs), np.array(ps))


def classical_velocity_field(system: ClassicalSystem, grad_field) -> np.ndarray:
    """``dH/dp`` at ``p = grad_field`` for ``H = p^2/2m + V``."""
    g = np.asarray(grad_field, dtype=float)
    if g.shape[0] != system.dims:
        raise ValueError("gradient field needs a leading axis of length dims")
    return g / system.mass_array(g.ndim)
