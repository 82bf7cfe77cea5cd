"""
Two-particle, non-interacting checks of additivity and independence.

A :class:`ProductScenario` pairs two 1D systems and two 1D states on a
tensor-product grid.  The checks here confirm that the joint fields split
into per-particle parts, that per-particle deviation draws factorize, and
that particle 1's position law ignores what is done to particle 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .fields import SpatialGrid, WaveFunction, divergence, polar_decompose
from .schrodinger import (ClassicalSystem, PropagatorConfig, iter_propagate, product_state,
                          product_system)
from .stats import KS_COEFF, ks_band_two_sample, ks_distance, ks_two_sample
from .stochastic import FieldFrames, ModelParams, evolve_ensemble, sample_positions

OUT_OF_SCOPE = "out of scope: conditional structure"


@dataclass(frozen=True)
class ProductScenario:
    """Two 1D subsystems on the tensor-product grid.

    The combined potential is ``V1(q1) + V2(q2)`` by construction, and the
    initial state is ``psi1 (x) psi2`` unless ``joint_state`` overrides it
    (used only to exercise the out-of-scope guard).
    """

    system1: ClassicalSystem
    system2: ClassicalSystem
    psi1: WaveFunction
    psi2: WaveFunction
    joint_state: Optional[WaveFunction] = None

    def __post_init__(self):
        for s in (self.system1, self.system2):
            if s.dims != 1:
                raise ValueError("each subsystem must be one-dimensional")
        for p in (self.psi1, self.psi2):
            if p.grid.dims != 1:
                raise ValueError("each factor state must be one-dimensional")
        if self.psi1.grid.boundary != self.psi2.grid.boundary:
            raise ValueError("factor grids must share a boundary type")

    @property
    def grid(self) -> SpatialGrid:
        g1, g2 = self.psi1.grid, self.psi2.grid
        return SpatialGrid(g1.extent + g2.extent, g1.n_points + g2.n_points, g1.boundary,
                           g1.lower + g2.lower)

    @property
    def system(self) -> ClassicalSystem:
        return product_system(self.system1, self.system2)

    @property
    def initial(self) -> WaveFunction:
        if self.joint_state is not None:
            return self.joint_state
        return product_state(self.psi1, self.psi2, self.grid)

    def with_system2(self, system2: ClassicalSystem) -> "ProductScenario":
        return ProductScenario(self.system1, system2, self.psi1, self.psi2, self.joint_state)


def interaction_defect(system: ClassicalSystem, grid: SpatialGrid) -> float:
    """Largest mixed second difference of ``V`` on the grid.

    Zero (to roundoff) exactly when ``V(q1, q2) = V1(q1) + V2(q2)``.
    """
    v = system.potential_on(grid)
    mixed = v[1:, 1:] - v[1:, :-1] - v[:-1, 1:] + v[:-1, :-1]
    scale = max(1.0, float(np.abs(v).max()))
    return float(np.abs(mixed).max() / scale)


def is_product_state(psi: WaveFunction, tol: float = 1e-8) -> bool:
    """Rank-one test via singular values of the 2D amplitude matrix."""
    sv = np.linalg.svd(np.asarray(psi.values), compute_uv=False)
    return bool(sv[1] <= tol * sv[0]) if sv.size > 1 else True


# ---------------------------------------------------------------------------
# field additivity


@dataclass(frozen=True)
class DecompositionReport:
    time: float
    product_defect: float
    theta_defect: float
    info_defect: float
    grad_s_defect: float
    dt_s_defect: float
    sigma_defect: float
    mask_fraction: float

    def passed(self, tol: float = 1e-6) -> bool:
        return all(v < tol for v in (self.product_defect, self.theta_defect, self.info_defect,
                                     self.grad_s_defect, self.dt_s_defect, self.sigma_defect))


def _run_to(psi, system, cfg, t):
    steps = int(round(t / cfg.dt_solver))
    c = PropagatorConfig(cfg.method, cfg.dt_solver, steps + 1, cfg.hbar, record_every=1)
    frames = list(iter_propagate(psi, system, c))
    return frames[steps], frames[steps + 1]


def _theta(fields, mass):
    # local stencil: grad S is zeroed at node cells and a spectral
    # derivative would spread that jump over the whole grid
    return divergence(fields.grad_s / mass, fields.grid, method="fd4")


def check_decomposition(scenario: ProductScenario, t: float, cfg: PropagatorConfig,
                        mask_rel: float = 1e-6, n_sigma: int = 10000,
                        seed: int = 0) -> DecompositionReport:
    """Additivity of the joint fields against the single-particle runs at ``t``.

    The joint state is propagated on the 2D grid and each factor on its
    own 1D grid.  Defects are maxima over nodes where the joint density
    exceeds ``mask_rel`` times its peak: the product structure of the
    amplitude, ``theta``, the information change over one solver step,
    ``grad S`` and ``dS/dt``.  ``sigma_defect`` compares the production
    term of summed per-particle deviation draws with the sum of the
    per-particle production terms.
    """
    if interaction_defect(scenario.system, scenario.grid) > 1e-12:
        raise ValueError("interacting potential: subsystems must not couple")
    hbar = cfg.hbar
    j0, j1 = _run_to(scenario.initial, scenario.system, cfg, t)
    a0, a1 = _run_to(scenario.psi1, scenario.system1, cfg, t)
    b0, b1 = _run_to(scenario.psi2, scenario.system2, cfg, t)

    fj = polar_decompose(j0, hbar, system=scenario.system)
    fj1 = polar_decompose(j1, hbar)
    fa = polar_decompose(a0, hbar, system=scenario.system1)
    fa1 = polar_decompose(a1, hbar)
    fb = polar_decompose(b0, hbar, system=scenario.system2)
    fb1 = polar_decompose(b1, hbar)

    mask = fj.omega > mask_rel * fj.omega.max()
    mask &= fj1.omega > mask_rel * fj1.omega.max()

    def gap(x):
        return float(np.abs(np.where(mask, x, 0.0)).max())

    prod = np.outer(a0.values, b0.values)
    product_defect = gap(np.asarray(j0.values) - prod)

    m1, m2 = scenario.system1.masses[0], scenario.system2.masses[0]
    th12 = _theta(fj, np.array([m1, m2]).reshape(2, 1, 1))
    th1 = _theta(fa, m1)
    th2 = _theta(fb, m2)
    theta_defect = gap(th12 - th1[:, None] - th2[None, :])

    with np.errstate(divide="ignore"):
        di12 = -(np.log(fj1.omega) - np.log(fj.omega))
        di1 = -(np.log(fa1.omega) - np.log(fa.omega))
        di2 = -(np.log(fb1.omega) - np.log(fb.omega))
    info_defect = gap(di12 - di1[:, None] - di2[None, :])

    grad_s_defect = max(gap(fj.grad_s[0] - fa.grad_s[0][:, None]),
                        gap(fj.grad_s[1] - fb.grad_s[0][None, :]))
    dt_s_defect = gap(fj.dt_s - fa.dt_s[:, None] - fb.dt_s[None, :])

    sep = check_transition_separability(hbar, n_sigma, seed)
    return DecompositionReport(float(j0.time), product_defect, theta_defect, info_defect,
                               grad_s_defect, dt_s_defect, sep.sigma_defect,
                               float(mask.mean()))


# ---------------------------------------------------------------------------
# deviation separability


@dataclass(frozen=True)
class SeparabilityReport:
    n: int
    lambda_mag: float
    correlation: float
    corr_band: float
    means: tuple
    mean_rel_err: tuple
    ks: tuple
    ks_band: float
    mutual_info: float
    mi_floor: float
    sigma_defect: float

    def passed(self, mean_tol: float = 0.01) -> bool:
        return (abs(self.correlation) < self.corr_band
                and all(e < mean_tol for e in self.mean_rel_err)
                and all(k < self.ks_band for k in self.ks))


def _mutual_info(a, b, bins=10):
    ra = np.argsort(np.argsort(a)) * bins // a.size
    rb = np.argsort(np.argsort(b)) * bins // b.size
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ra, rb), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def check_transition_separability(lambda_mag: float, n: int, seed: int,
                                  static_second: bool = False) -> SeparabilityReport:
    """Draw per-particle deviations independently and test the joint law.

    Each particle gets its own generator spawned from ``seed``.  With
    ``static_second`` particle 2 contributes nothing (its deviation is 0),
    so the joint law is trivially the marginal of particle 1.
    """
    from .stochastic import sample_deviation

    gens = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    d1 = sample_deviation(lambda_mag, gens[0], n)
    if static_second:
        d2_val = np.zeros(n)
    else:
        d2_val = sample_deviation(lambda_mag, gens[1], n).value
    d1_val = d1.value
    mean_exp = 0.5 * lambda_mag

    def cdf(x):
        return 1.0 - np.exp(-x / mean_exp)

    ks = [ks_distance(np.abs(d1_val), cdf)]
    means = [float(np.mean(np.abs(d1_val)))]
    if static_second:
        corr = 0.0
        mi = 0.0
    else:
        ks.append(ks_distance(np.abs(d2_val), cdf))
        means.append(float(np.mean(np.abs(d2_val))))
        corr = float(np.corrcoef(d1_val, d2_val)[0, 1])
        mi = _mutual_info(d1_val, d2_val)
    joint = (2.0 / lambda_mag) * (d1_val + d2_val)
    parts = (2.0 / lambda_mag) * d1_val + (2.0 / lambda_mag) * d2_val
    sigma_defect = float(np.abs(joint - parts).max() / max(1.0, np.abs(joint).max()))
    return SeparabilityReport(
        n=n, lambda_mag=lambda_mag, correlation=corr, corr_band=4.0 / np.sqrt(n),
        means=tuple(means), mean_rel_err=tuple(abs(m / mean_exp - 1) for m in means),
        ks=tuple(ks), ks_band=KS_COEFF[0.99] / np.sqrt(n), mutual_info=mi,
        mi_floor=(10 - 1) ** 2 / (2.0 * n), sigma_defect=sigma_defect)


# ---------------------------------------------------------------------------
# marginal invariance


@dataclass(frozen=True)
class MarginalReport:
    status: str
    times: tuple = ()
    ks_two_sample: tuple = ()
    ks_vs_density: tuple = ()
    band: float = float("nan")
    density_band: float = float("nan")
    max_path_gap: tuple = ()
    n: int = 0
    details: Dict = field(default_factory=dict)

    @property
    def in_scope(self) -> bool:
        return self.status != OUT_OF_SCOPE

    def passed(self) -> bool:
        if not self.in_scope:
            return True
        return all(k < self.band for k in self.ks_two_sample)


def marginal_invariance_test(scenario: ProductScenario, alt_system2: ClassicalSystem,
                             params: ModelParams, cfg: PropagatorConfig, n: int,
                             checkpoints: Sequence[float], seeds=(0, 0),
                             workers: int = 1) -> MarginalReport:
    """Particle-1 position law with particle 2's potential swapped.

    Two ensembles share particle-1 sign streams (same master seed) and
    differ only in ``V2``.  At each checkpoint the two particle-1 samples
    are compared by two-sample KS against the 99% band, each is also
    compared with the particle-1 marginal of the respective joint density,
    and the largest trajectory-by-trajectory particle-1 gap is reported.
    """
    if seeds[0] != seeds[1]:
        raise ValueError("marginal invariance needs identical master seeds for both runs")
    init = scenario.initial
    if not is_product_state(init):
        return MarginalReport(OUT_OF_SCOPE)
    seed = int(seeds[0])
    times = sorted(checkpoints)
    steps = int(round(times[-1] / cfg.dt_solver))
    c = PropagatorConfig(cfg.method, cfg.dt_solver, steps, cfg.hbar, record_every=1)

    q0 = sample_positions(np.asarray(init.density), scenario.grid, n, seed)
    runs = []
    finals = []
    for sc in (scenario, scenario.with_system2(alt_system2)):
        if interaction_defect(sc.system, sc.grid) > 1e-12:
            raise ValueError("interacting potential: subsystems must not couple")
        frames = FieldFrames(init, sc.system, c, hbar_eff=params.lambda_mag)
        runs.append(evolve_ensemble(frames, sc.system, params, n, seed, times, initial=q0,
                                    workers=workers))
        finals.append(frames.last)

    grid = scenario.grid
    ks2, gaps = [], []
    for k in range(len(times)):
        x_a = runs[0].positions[k, 0]
        x_b = runs[1].positions[k, 0]
        ks2.append(ks_two_sample(x_a, x_b))
        gaps.append(float(np.abs(x_a - x_b).max()))
    # each run against its own particle-1 marginal at the last checkpoint
    ksd = []
    for ens, f in zip(runs, finals):
        marg = np.asarray(f.omega).sum(axis=1) * grid.spacing[1]
        ksd.append(ks_distance(ens.positions[-1, 0], marg, scenario.psi1.grid))
    return MarginalReport(
        status="ok", times=tuple(float(t) for t in runs[0].times), ks_two_sample=tuple(ks2),
        ks_vs_density=tuple(ksd), band=ks_band_two_sample(n, n, 0.99),
        density_band=KS_COEFF[0.99] / np.sqrt(n), max_path_gap=tuple(gaps), n=n,
        details={"node_events": [r.node_events for r in runs],
                 "initial": q0, "positions": runs[0].positions})
