"""
Estimators and verdict helpers for trajectory ensembles.

Every comparison reports a statistic together with the sampling error it
should be judged against, so that callers can phrase verdicts as z-scores
or confidence bands rather than bare booleans.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import stats as sps

from .fields import PolarFields, SpatialGrid, WaveFunction, cell_cdf, fold_to_cells, gradient
from .schrodinger import ClassicalSystem, _kinetic_apply
from .stochastic import _Stencil, TrajectoryEnsemble

# asymptotic Kolmogorov quantiles
KS_COEFF = {0.95: 1.36, 0.99: 1.63}

OBSERVABLES = ("p", "p2", "H")


def ks_band(n: int, level: float = 0.95) -> float:
    """One-sample KS acceptance radius ``c(level) / sqrt(n)``."""
    return KS_COEFF[level] / np.sqrt(n)


def ks_band_two_sample(n: int, m: Optional[int] = None, level: float = 0.99) -> float:
    """Two-sample KS acceptance radius ``c(level) * sqrt((n + m) / (n m))``."""
    m = n if m is None else m
    return KS_COEFF[level] * np.sqrt((n + m) / (n * m))


def _sup_gap(x_sorted, cdf_at_x):
    n = x_sorted.size
    upper = np.arange(1, n + 1) / n - cdf_at_x
    lower = cdf_at_x - np.arange(n) / n
    return float(max(upper.max(), lower.max(), 0.0))


def ks_distance(samples, reference: Union[np.ndarray, Callable], grid: Optional[SpatialGrid] = None,
                axis: int = 0, min_samples: int = 10) -> float:
    """Sup-norm gap between the empirical CDF of ``samples`` and a reference.

    Parameters
    ----------
    samples : array_like
        1D sample set with at least 10 entries.
    reference : ndarray or callable
        Either a density on ``grid`` (read as constant over each node's
        cell) or a vectorised CDF.
    grid : SpatialGrid, optional
        Required when ``reference`` is a grid density.  For 2D grids pass
        the marginal density along ``axis``.
    min_samples : int
        Smallest accepted sample size; below 10 the statistic is only good
        for hand-checkable examples.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample set")
    if x.size < min_samples:
        raise ValueError(f"KS distance needs at least {min_samples} samples, got {x.size}")
    if callable(reference):
        x = np.sort(x)
        return _sup_gap(x, np.asarray(reference(x), dtype=float))
    if grid is None:
        raise ValueError("a grid density reference needs its grid")
    edges, cdf = cell_cdf(grid, reference, axis=axis)
    x = np.sort(fold_to_cells(grid, x, axis))
    return _sup_gap(x, np.interp(x, edges, cdf))


def ks_two_sample(a, b) -> float:
    """Two-sample KS statistic."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    return float(sps.ks_2samp(a, b, method="asymp").statistic)


def marginal_density(omega, axis: int = 0, grid: Optional[SpatialGrid] = None):
    """Marginal of a 2D grid density along ``axis`` (1D input is returned as is)."""
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 1:
        return omega
    other = 1 - axis
    h = 1.0 if grid is None else grid.spacing[other]
    return omega.sum(axis=other) * h


@dataclass(frozen=True)
class EnsembleStats:
    """Histogram (bin width = grid spacing), moments and KS of a 1D sample."""

    histogram: np.ndarray
    edges: np.ndarray
    mean: float
    variance: float
    ks: Optional[float]
    n: int


def ensemble_stats(samples, grid: SpatialGrid, reference=None, axis: int = 0) -> EnsembleStats:
    x = fold_to_cells(grid, np.asarray(samples, dtype=float).ravel(), axis)
    h = grid.spacing[axis]
    edges = grid.lower[axis] + (np.arange(grid.n_points[axis] + 1) + grid.offset - 0.5) * h
    counts, _ = np.histogram(x, bins=edges)
    hist = counts / (x.size * h)
    ks = None if reference is None else ks_distance(x, reference, grid, axis)
    return EnsembleStats(hist, edges, float(x.mean()), float(x.var()), ks, int(x.size))


# ---------------------------------------------------------------------------
# momentum samples


@dataclass(frozen=True)
class MomentumSamples:
    """Actual momenta ``p`` at the kept positions ``q``; ``(dims, n_kept)``."""

    p: np.ndarray
    q: np.ndarray
    signs: np.ndarray
    excluded: int

    @property
    def n(self) -> int:
        return self.p.shape[1]


def momentum_from(q, signs, fields: PolarFields, lambda_mag: float) -> MomentumSamples:
    """``p = grad S + sign (|lambda|/2) grad ln Omega`` at each configuration.

    Configurations whose interpolation stencil touches a node cell are
    dropped and counted in ``excluded``.
    """
    grid = fields.grid
    q = np.asarray(q, dtype=float).reshape(grid.dims, -1)
    signs = np.broadcast_to(np.asarray(signs, dtype=float), q.shape)
    st = _Stencil(grid, q)
    vals = st.apply(fields._stack)
    keep = ~st.touches(~fields.valid.ravel())
    d = grid.dims
    p = vals[:d] + signs * (0.5 * lambda_mag) * vals[d:]
    return MomentumSamples(p[:, keep], q[:, keep], np.array(signs[:, keep]),
                           int(np.count_nonzero(~keep)))


def momentum_samples(ensemble: TrajectoryEnsemble, fields: PolarFields,
                     params=None, system: Optional[ClassicalSystem] = None) -> MomentumSamples:
    """Momentum samples of an ensemble at the checkpoint matching ``fields.time``.

    ``params`` defaults to the ensemble's own model parameters; ``system``
    is accepted for symmetry with the other estimators and is unused
    because the momentum relation does not involve the potential.
    """
    params = ensemble.params if params is None else params
    q, s = ensemble.at(fields.time)
    return momentum_from(q, s, fields, params.lambda_mag)


# ---------------------------------------------------------------------------
# uncertainty


@dataclass(frozen=True)
class UncertaintyResult:
    """``sigma_q * sigma_p`` with its delta-method standard error.

    ``rel_err`` is the standard error divided by the product; ``degenerate``
    marks a zero-variance input, for which no verdict should be drawn.
    """

    product: float
    stat_err: float
    rel_err: float
    sigma_q: float
    sigma_p: float
    n: int
    degenerate: bool

    def satisfies_bound(self, hbar: float = 1.0, k: float = 3.0) -> bool:
        return (not self.degenerate) and self.product >= 0.5 * hbar * (1 - k * self.rel_err)


def uncertainty_product(q, p) -> UncertaintyResult:
    """Product of sample standard deviations of ``q`` and ``p`` (1D arrays)."""
    q = np.asarray(q, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    if q.size != p.size or q.size < 2:
        raise ValueError("need matched q and p samples (n >= 2)")
    n = q.size
    dq = q - q.mean()
    dp = p - p.mean()
    vq = float(np.mean(dq * dq))
    vp = float(np.mean(dp * dp))
    scale = max(np.abs(q).max(), 1e-300) ** 2, max(np.abs(p).max(), 1e-300) ** 2
    degenerate = vq <= 1e-24 * scale[0] or vp <= 1e-24 * scale[1]
    product = float(np.sqrt(vq * vp))
    if degenerate:
        return UncertaintyResult(product, float("nan"), float("nan"), np.sqrt(vq),
                                 np.sqrt(vp), n, True)
    influence = 0.5 * product * ((dq * dq - vq) / vq + (dp * dp - vp) / vp)
    err = float(np.std(influence) / np.sqrt(n))
    return UncertaintyResult(product, err, err / product, float(np.sqrt(vq)),
                             float(np.sqrt(vp)), n, False)


@dataclass(frozen=True)
class FisherBound:
    """Grid quantities behind the uncertainty bound.

    ``fisher`` is ``int (d Omega)^2 / Omega``; the osmotic part of the
    momentum alone has spread ``(hbar/2) sqrt(fisher)`` and Cramer-Rao gives
    ``sigma_q >= 1/sqrt(fisher)``, so ``sigma_q * sigma_p >= hbar/2``.
    ``bound`` is ``sigma_q(grid) * sigma_p_min`` which is itself
    ``>= hbar/2`` and is the tighter, state-specific floor.
    """

    fisher: float
    sigma_q: float
    sigma_p_min: float
    bound: float


def fisher_bound(fields: PolarFields, axis: int = 0) -> FisherBound:
    grid = fields.grid
    om = np.asarray(fields.omega)
    gl = np.where(fields.valid, fields.grad_log_omega[axis], 0.0)
    fisher = grid.integrate(om * gl * gl)
    x = grid.mesh()[axis]
    mean = grid.integrate(om * x)
    sigma_q = float(np.sqrt(grid.integrate(om * (x - mean) ** 2)))
    sp_min = 0.5 * fields.hbar_eff * np.sqrt(fisher)
    return FisherBound(float(fisher), sigma_q, float(sp_min), float(sigma_q * sp_min))


# ---------------------------------------------------------------------------
# expectation values


@dataclass(frozen=True)
class ExpectationResult:
    observable: str
    model: float
    operator: float
    stderr: float
    z: float
    n: int


def operator_average(psi: WaveFunction, observable: str,
                     system: Optional[ClassicalSystem] = None, hbar: float = 1.0,
                     axis: int = 0) -> float:
    """Grid quadrature of ``<psi| O |psi>`` for ``O`` in ``p``, ``p2``, ``H``."""
    if observable not in OBSERVABLES:
        raise ValueError(f"unsupported observable {observable!r}; expected one of {OBSERVABLES}")
    grid = psi.grid
    v = np.asarray(psi.values)
    if observable == "p":
        dv = gradient(v, grid)[axis]
        return grid.integrate((np.conj(v) * (-1j * hbar) * dv).real)
    if observable == "p2":
        # kinetic operator with m = 1/2 along one axis is p^2
        masses = [np.inf] * grid.dims
        masses[axis] = 0.5
        return grid.integrate((np.conj(v) * _kinetic_apply(v, grid, masses, hbar)).real)
    if system is None:
        raise ValueError("H needs the classical system")
    hv = _kinetic_apply(v, grid, system.masses, hbar) + system.potential_on(grid) * v
    return grid.integrate((np.conj(v) * hv).real)


def model_values(samples: MomentumSamples, observable: str,
                 system: Optional[ClassicalSystem] = None, axis: int = 0) -> np.ndarray:
    """Per-sample values whose mean is the model average of ``observable``."""
    if observable not in OBSERVABLES:
        raise ValueError(f"unsupported observable {observable!r}; expected one of {OBSERVABLES}")
    if observable == "p":
        return samples.p[axis]
    if observable == "p2":
        return samples.p[axis] ** 2
    if system is None:
        raise ValueError("H needs the classical system")
    return system.hamiltonian(samples.q, samples.p)


def expectation_compare(samples: MomentumSamples, psi: WaveFunction, observable: str,
                        system: Optional[ClassicalSystem] = None, hbar: float = 1.0,
                        axis: int = 0) -> ExpectationResult:
    """Model average from samples against the operator average, as a z-score.

    With zero sample spread the z-score is 0 when the two agree to
    roundoff and infinite otherwise.
    """
    vals = np.asarray(model_values(samples, observable, system, axis), dtype=float)
    n = vals.size
    if n < 2:
        raise ValueError("need at least two samples")
    model = float(vals.mean())
    op = operator_average(psi, observable, system, hbar, axis)
    err = float(vals.std(ddof=1) / np.sqrt(n))
    gap = model - op
    if err > 1e-12 * max(1.0, abs(op)):
        z = gap / err
    else:
        z = 0.0 if abs(gap) <= 1e-8 * max(1.0, abs(op)) else float(np.copysign(np.inf, gap))
    return ExpectationResult(observable, model, op, err, float(z), n)


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    stderr: float
    prefactor: float


def fit_scaling(xs, ys) -> ScalingFit:
    """Least-squares power law ``y = a x^b`` in log-log space."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size or x.size < 3:
        raise ValueError("need at least three (x, y) points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive values")
    res = sps.linregress(np.log(x), np.log(y))
    return ScalingFit(float(res.slope), float(res.stderr), float(np.exp(res.intercept)))
