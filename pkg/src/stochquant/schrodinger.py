"""
Schrodinger field generator: benchmark systems, two independent
propagators and closed-form reference states.

Both propagators share the spectral kinetic operator (Fourier on periodic
grids, a sine basis via odd extension on hard-wall grids), so they
differ only in how they advance time: Strang splitting versus the
Crank-Nicolson (Cayley) rational step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .fields import SpatialGrid, WaveFunction, check_normalized

SPLIT_STEP = "split-step"
CRANK_NICOLSON = "crank-nicolson"
NORM_ABORT = 1e-4


class PropagationError(RuntimeError):
    """Raised when a propagation becomes unstable."""


@dataclass(frozen=True)
class ClassicalSystem:
    """Masses and potential of a (possibly two-particle) classical system.

    ``potential`` maps positions with a leading axis of length ``dims`` to
    energies.  ``terms`` holds one single-axis potential per axis when the
    potential is a sum of independent parts; the Crank-Nicolson solver and
    the locality checks rely on it.
    """

    masses: tuple
    potential: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    params: dict = field(default_factory=dict)
    force: Optional[Callable[[np.ndarray], np.ndarray]] = None
    terms: Optional[tuple] = None

    def __post_init__(self):
        masses = tuple(float(m) for m in np.atleast_1d(self.masses))
        if any(not m > 0 for m in masses):
            raise ValueError("masses must be positive")
        object.__setattr__(self, "masses", masses)

    @property
    def dims(self) -> int:
        return len(self.masses)

    @property
    def separable(self) -> bool:
        return self.dims == 1 or self.terms is not None

    def axis_term(self, i: int) -> "ClassicalSystem":
        """Single-axis potential of a separable system."""
        if self.dims == 1:
            return self
        if self.terms is None:
            raise ValueError(f"{self.name} potential is not separable")
        return self.terms[i]

    def mass_array(self, ndim: int) -> np.ndarray:
        return np.array(self.masses).reshape((-1,) + (1,) * (ndim - 1))

    def V(self, q) -> np.ndarray:
        return np.asarray(self.potential(np.asarray(q, dtype=float)), dtype=float)

    def potential_on(self, grid: SpatialGrid) -> np.ndarray:
        if grid.dims != self.dims:
            raise ValueError(f"{self.dims}D system on a {grid.dims}D grid")
        v = np.broadcast_to(self.V(grid.mesh()), grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("potential is not finite on the grid")
        return np.array(v)

    def forces(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.force is not None:
            return np.asarray(self.force(q), dtype=float)
        out = np.empty_like(q)
        h = 1e-5
        for i in range(self.dims):
            dq = np.zeros_like(q)
            dq[i] = h
            out[i] = -(self.V(q + dq) - self.V(q - dq)) / (2 * h)
        return out

    def hamiltonian(self, q, p) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        m = self.mass_array(p.ndim)
        return np.sum(p * p / (2 * m), axis=0) + self.V(q)


def free_particle(mass: float = 1.0) -> ClassicalSystem:
    return ClassicalSystem((mass,), lambda q: np.zeros(np.shape(q)[1:]), "free",
                           {"mass": mass}, force=lambda q: np.zeros_like(q))


def harmonic(omega: float = 1.0, mass: float = 1.0, center: float = 0.0) -> ClassicalSystem:
    k = mass * omega ** 2
    return ClassicalSystem(
        (mass,), lambda q: 0.5 * k * (q[0] - center) ** 2, "harmonic",
        {"omega": omega, "mass": mass, "center": center},
        force=lambda q: -k * (q - center))


def quartic(g: float = 1.0, mass: float = 1.0) -> ClassicalSystem:
    return ClassicalSystem((mass,), lambda q: g * q[0] ** 4, "quartic",
                           {"g": g, "mass": mass}, force=lambda q: -4 * g * q ** 3)


def box(mass: float = 1.0) -> ClassicalSystem:
    """Particle in a box; the walls come from a hard-wall grid."""
    sys = free_particle(mass)
    return ClassicalSystem(sys.masses, sys.potential, "box", {"mass": mass}, sys.force)


def product_system(first: ClassicalSystem, second: ClassicalSystem) -> ClassicalSystem:
    """Two non-interacting 1D particles, ``V(q1, q2) = V1(q1) + V2(q2)``."""
    if first.dims != 1 or second.dims != 1:
        raise ValueError("product systems combine two 1D systems")

    def potential(q):
        return first.V(q[:1]) + second.V(q[1:2])

    def force(q):
        return np.concatenate([first.forces(q[:1]), second.forces(q[1:2])])

    return ClassicalSystem(first.masses + second.masses, potential,
                           f"{first.name}+{second.name}",
                           {"first": dict(first.params, kind=first.name),
                            "second": dict(second.params, kind=second.name)},
                           force=force, terms=(first, second))


# ---------------------------------------------------------------------------
# spectral kinetic operator


def _kinetic_multiplier(grid, axis, mass, hbar):
    k = grid.wavenumbers(axis)
    return hbar ** 2 * k ** 2 / (2 * mass)


def _odd_extend(v, grid):
    if grid.periodic:
        return v
    for ax in range(v.ndim):
        v = np.concatenate([v, -np.flip(v, axis=ax)], axis=ax)
    return v


def _crop(v, grid):
    if grid.periodic:
        return v
    return v[tuple(slice(0, n) for n in grid.shape)]


def _kinetic_apply(v, grid, masses, hbar, phase_dt=None):
    """Apply ``T`` (or ``exp(-i T dt / hbar)`` when ``phase_dt`` is set)."""
    if not grid.spectral_ok:
        raise ValueError("spectral kinetic operator needs power-of-two n_points")
    ext = _odd_extend(np.asarray(v, dtype=complex), grid)
    spec = np.fft.fftn(ext)
    total = 0.0
    for i in range(grid.dims):
        shape = [1] * grid.dims
        shape[i] = -1
        total = total + _kinetic_multiplier(grid, i, masses[i], hbar).reshape(shape)
    if phase_dt is None:
        spec = spec * total
    else:
        spec = spec * np.exp(-1j * total * phase_dt / hbar)
    return _crop(np.fft.ifftn(spec), grid)


def apply_hamiltonian(v, grid: SpatialGrid, system: ClassicalSystem,
                      hbar: float = 1.0) -> np.ndarray:
    """``H psi`` with the spectral kinetic term."""
    return _kinetic_apply(v, grid, system.masses, hbar) + system.potential_on(grid) * v


def _axis_grid(grid, i):
    return SpatialGrid(grid.extent[i], grid.n_points[i], grid.boundary, grid.lower[i])


def kinetic_matrix(grid: SpatialGrid, mass: float, hbar: float = 1.0) -> np.ndarray:
    """Dense 1D spectral kinetic matrix (real symmetric)."""
    n = grid.n_points[0]
    eye = np.eye(n)
    cols = np.stack([_kinetic_apply(eye[:, j], grid, (mass,), hbar) for j in range(n)],
                    axis=1).real
    return 0.5 * (cols + cols.T)


# ---------------------------------------------------------------------------
# propagators


@dataclass(frozen=True)
class PropagatorConfig:
    method: str = SPLIT_STEP
    dt_solver: float = 1e-3
    steps: int = 1000
    hbar: float = 1.0
    record_every: int = 1

    def __post_init__(self):
        if self.method not in (SPLIT_STEP, CRANK_NICOLSON):
            raise ValueError(f"unknown propagator {self.method!r}")
        if not self.dt_solver > 0:
            raise ValueError("dt_solver must be positive")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")

    def accuracy_bound_ok(self, grid: SpatialGrid, system: ClassicalSystem) -> bool:
        """``dt < dq^2 m / hbar`` on every axis (Crank-Nicolson accuracy)."""
        return all(self.dt_solver < h * h * m / self.hbar
                   for h, m in zip(grid.spacing, system.masses))


class SplitStepper:
    """Strang splitting: half potential kick, exact kinetic drift, half kick."""

    def __init__(self, grid, system, dt, hbar=1.0):
        self.grid, self.system, self.dt, self.hbar = grid, system, dt, hbar
        self.half_kick = np.exp(-0.5j * dt * system.potential_on(grid) / hbar)

    def __call__(self, v):
        v = v * self.half_kick
        v = _kinetic_apply(v, self.grid, self.system.masses, self.hbar, phase_dt=self.dt)
        return v * self.half_kick


def _cayley(energies, dt, hbar):
    z = 0.5j * dt * energies / hbar
    return (1 - z) / (1 + z)


class CrankNicolsonStepper:
    """``(1 + i dt H / 2 hbar) psi' = (1 - i dt H / 2 hbar) psi``.

    For separable potentials the linear system is solved exactly in the
    eigenbasis of the per-axis Hamiltonians; otherwise by GMRES with the
    spectral Hamiltonian as a matrix-free operator.
    """

    def __init__(self, grid, system, dt, hbar=1.0, rtol=1e-13):
        self.grid, self.system, self.dt, self.hbar, self.rtol = grid, system, dt, hbar, rtol
        self.dense = system.separable
        if not self.dense:
            return
        self.bases = []
        self.factors = []
        for i in range(grid.dims):
            g1 = _axis_grid(grid, i)
            term = system.axis_term(i)
            h1 = kinetic_matrix(g1, system.masses[i], hbar)
            h1[np.diag_indices_from(h1)] += term.potential_on(g1)
            e, u = np.linalg.eigh(h1)
            self.bases.append(u)
            self.factors.append(e)
        if grid.dims == 1:
            u = self.bases[0]
            self.matrix = (u * _cayley(self.factors[0], dt, hbar)) @ u.T
        else:
            e1, e2 = self.factors
            self.cayley2 = _cayley(e1[:, None] + e2[None, :], dt, hbar)

    def __call__(self, v):
        if self.dense:
            if self.grid.dims == 1:
                return self.matrix @ v
            u1, u2 = self.bases
            c = u1.T @ v @ u2
            return u1 @ (c * self.cayley2) @ u2.T
        shape = v.shape
        half = 0.5j * self.dt / self.hbar

        def h(x):
            return apply_hamiltonian(x.reshape(shape), self.grid, self.system, self.hbar).ravel()

        a = LinearOperator((v.size, v.size), matvec=lambda x: x + half * h(x), dtype=complex)
        rhs = v.ravel() - half * h(v.ravel())
        sol, info = gmres(a, rhs, x0=v.ravel(), rtol=self.rtol, atol=0.0, restart=60,
                          maxiter=200)
        if info != 0:
            raise PropagationError(f"GMRES did not converge (info={info})")
        return sol.reshape(shape)


def make_stepper(grid, system, cfg: PropagatorConfig):
    if cfg.method == SPLIT_STEP:
        return SplitStepper(grid, system, cfg.dt_solver, cfg.hbar)
    return CrankNicolsonStepper(grid, system, cfg.dt_solver, cfg.hbar)


def iter_propagate(psi: WaveFunction, system: ClassicalSystem,
                   cfg: PropagatorConfig) -> Iterator[WaveFunction]:
    """Yield the initial state and every ``record_every``-th solver frame."""
    norm0 = check_normalized(psi, tol=1e-8)
    grid = psi.grid
    step = make_stepper(grid, system, cfg)
    v = np.array(psi.values)
    yield psi
    for k in range(1, cfg.steps + 1):
        v = step(v)
        t = psi.time + k * cfg.dt_solver
        nrm = grid.integrate(np.abs(v) ** 2)
        if not np.isfinite(nrm) or abs(nrm - norm0) > NORM_ABORT:
            raise PropagationError(
                f"{cfg.method}: norm drifted to {nrm:.6e} at step {k} (t={t:.4g}); "
                f"dt_solver={cfg.dt_solver} is too coarse for this grid")
        if k % cfg.record_every == 0 or k == cfg.steps:
            yield WaveFunction(v, grid, t)


def propagate(psi: WaveFunction, system: ClassicalSystem,
              cfg: PropagatorConfig) -> List[WaveFunction]:
    return list(iter_propagate(psi, system, cfg))


def l2_distance(a: WaveFunction, b: WaveFunction) -> float:
    return float(np.sqrt(a.grid.integrate(np.abs(np.asarray(a.values) - b.values) ** 2)))


def energy(psi: WaveFunction, system: ClassicalSystem, hbar: float = 1.0) -> float:
    v = np.asarray(psi.values)
    return psi.grid.integrate((np.conj(v) * apply_hamiltonian(v, psi.grid, system, hbar)).real)


# ---------------------------------------------------------------------------
# closed-form states

ANALYTIC_KINDS = ("sho-ground", "sho-coherent", "free-gaussian", "box-eigenstate")


def analytic_state(kind: str, params: Optional[dict], t: float,
                   grid: SpatialGrid) -> WaveFunction:
    """Exact 1D reference state at time ``t`` sampled on ``grid``.

    ``params`` may set ``mass``, ``hbar`` and, per kind, ``omega``, ``q0``,
    ``p0``, ``sigma0``, ``n`` (box level), ``L`` and ``lower`` (box walls,
    defaulting to the grid's).
    """
    if kind not in ANALYTIC_KINDS:
        raise ValueError(f"unknown analytic state {kind!r}; expected one of {ANALYTIC_KINDS}")
    if grid.dims != 1:
        raise ValueError("analytic states are 1D; combine them with product_state")
    p = dict(params or {})
    m = float(p.get("mass", 1.0))
    hbar = float(p.get("hbar", 1.0))
    q = grid.axis(0)

    if kind in ("sho-ground", "sho-coherent"):
        w = float(p.get("omega", 1.0))
        q0 = float(p.get("q0", 0.0)) if kind == "sho-coherent" else 0.0
        p0 = float(p.get("p0", 0.0)) if kind == "sho-coherent" else 0.0
        qc = q0 * np.cos(w * t) + p0 / (m * w) * np.sin(w * t)
        pc = p0 * np.cos(w * t) - m * w * q0 * np.sin(w * t)
        amp = (m * w / (np.pi * hbar)) ** 0.25
        v = amp * np.exp(-m * w * (q - qc) ** 2 / (2 * hbar)
                         + 1j * pc * (q - qc / 2) / hbar - 0.5j * w * t)
    elif kind == "free-gaussian":
        s0 = float(p.get("sigma0", 1.0))
        q0 = float(p.get("q0", 0.0))
        p0 = float(p.get("p0", 0.0))
        if not s0 > 0:
            raise ValueError("sigma0 must be positive")
        a = 1 + 1j * hbar * t / (2 * m * s0 ** 2)
        v = ((2 * np.pi * s0 ** 2) ** -0.25 / np.sqrt(a)
             * np.exp(-(q - q0 - p0 * t / m) ** 2 / (4 * s0 ** 2 * a)
                      + 1j * p0 * (q - q0) / hbar - 0.5j * p0 ** 2 * t / (m * hbar)))
    else:
        n = int(p.get("n", 1))
        if n < 1:
            raise ValueError("box level n must be >= 1")
        L = float(p.get("L", grid.extent[0]))
        lo = float(p.get("lower", grid.lower[0]))
        e_n = (hbar * np.pi * n / L) ** 2 / (2 * m)
        inside = (q >= lo) & (q <= lo + L)
        v = np.where(inside, np.sqrt(2 / L) * np.sin(n * np.pi * (q - lo) / L), 0.0)
        v = v * np.exp(-1j * e_n * t / hbar)
    return WaveFunction(v, grid, t).normalized()


def product_state(first: WaveFunction, second: WaveFunction,
                  grid: Optional[SpatialGrid] = None) -> WaveFunction:
    """Tensor product of two 1D states on the combined 2D grid."""
    if grid is None:
        g1, g2 = first.grid, second.grid
        if g1.boundary != g2.boundary:
            raise ValueError("factor grids must share a boundary type")
        grid = SpatialGrid(g1.extent + g2.extent, g1.n_points + g2.n_points,
                           g1.boundary, g1.lower + g2.lower)
    return WaveFunction(np.outer(first.values, second.values), grid, first.time)
