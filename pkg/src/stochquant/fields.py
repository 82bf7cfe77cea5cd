"""
Grids, complex fields and their polar (density/phase-gradient) decomposition.

Positions and vector fields use a leading axis of length ``grid.dims``; a
scalar field on a 2D grid has shape ``(n0, n1)`` and its gradient has shape
``(2, n0, n1)``.

Periodic grids put nodes at ``lower + j*dq``.  Hard-wall grids are cell
centred, ``lower + (j + 1/2)*dq``, so the walls sit half a cell outside the
first and last node and odd reflection across a wall is exact for Dirichlet
data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_simpson
from scipy.ndimage import distance_transform_edt
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

PERIODIC = "periodic"
HARD_WALL = "hard-wall"
NODE_EPS = 1e-12
NORM_TOL = 1e-10


class VortexError(ValueError):
    """The phase gradient is not integrable (nonzero circulation)."""


def _as_tuple(value, dims=None, cast=float):
    if np.ndim(value) == 0:
        value = [value] * (dims or 1)
    return tuple(cast(v) for v in value)


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform 1D/2D grid over configuration space.

    Parameters
    ----------
    extent : float or sequence of float
        Length of the domain along each axis.
    n_points : int or sequence of int
        Number of nodes along each axis (at least 16).
    boundary : {"periodic", "hard-wall"}
    lower : float or sequence of float, optional
        Lower domain edge per axis; defaults to ``-extent/2``.
    """

    extent: Sequence[float]
    n_points: Sequence[int]
    boundary: str = PERIODIC
    lower: Optional[Sequence[float]] = None

    def __post_init__(self):
        n = _as_tuple(self.n_points, cast=int)
        ext = _as_tuple(self.extent, len(n))
        if len(ext) != len(n):
            raise ValueError("extent and n_points must have the same length")
        if len(n) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if any(not np.isfinite(e) or e <= 0 for e in ext):
            raise ValueError("extents must be finite and positive")
        if any(k < 16 for k in n):
            raise ValueError("n_points must be >= 16 along every axis")
        if self.boundary not in (PERIODIC, HARD_WALL):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        low = self.lower
        low = tuple(-e / 2 for e in ext) if low is None else _as_tuple(low, len(n))
        object.__setattr__(self, "n_points", n)
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "lower", low)

    @property
    def dims(self) -> int:
        return len(self.n_points)

    @property
    def shape(self) -> tuple:
        return tuple(self.n_points)

    @property
    def spacing(self) -> tuple:
        return tuple(e / k for e, k in zip(self.extent, self.n_points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def offset(self) -> float:
        """Node offset from ``lower`` in units of ``dq``."""
        return 0.0 if self.periodic else 0.5

    @property
    def upper(self) -> tuple:
        return tuple(lo + e for lo, e in zip(self.lower, self.extent))

    @property
    def spectral_ok(self) -> bool:
        return all(_is_pow2(k) for k in self.n_points)

    def axis(self, i: int = 0) -> np.ndarray:
        h = self.spacing[i]
        return self.lower[i] + (np.arange(self.n_points[i]) + self.offset) * h

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape ``(dims, *shape)``."""
        return np.stack(np.meshgrid(*[self.axis(i) for i in range(self.dims)],
                                    indexing="ij"))

    def wavenumbers(self, i: int = 0) -> np.ndarray:
        """Angular wavenumbers of the (odd-extended, for hard walls) FFT axis."""
        n, h = self.n_points[i], self.spacing[i]
        if not self.periodic:
            n = 2 * n
        return 2 * np.pi * np.fft.fftfreq(n, d=h)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_volume)

    def nearest_index(self, point) -> tuple:
        point = _as_tuple(point, self.dims)
        idx = []
        for i, x in enumerate(point):
            j = int(round((x - self.lower[i]) / self.spacing[i] - self.offset))
            idx.append(min(max(j, 0), self.n_points[i] - 1))
        return tuple(idx)

    def wrap(self, q: np.ndarray) -> np.ndarray:
        """Map positions (leading axis ``dims``) back into the domain."""
        q = np.array(q, dtype=float, copy=True)
        for i in range(self.dims):
            lo, hi = self.lower[i], self.upper[i]
            if self.periodic:
                q[i] = lo + np.mod(q[i] - lo, hi - lo)
            else:
                # reflect off the walls (repeat for far excursions)
                for _ in range(4):
                    q[i] = np.where(q[i] < lo, 2 * lo - q[i], q[i])
                    q[i] = np.where(q[i] > hi, 2 * hi - q[i], q[i])
                q[i] = np.clip(q[i], lo, hi)
        return q


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WaveFunction:
    values: np.ndarray
    grid: SpatialGrid
    time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return self.grid.integrate(self.density)

    def normalized(self) -> "WaveFunction":
        nrm = self.norm()
        if not nrm > 0:
            raise ValueError("cannot normalize an all-zero wave function")
        return WaveFunction(self.values / np.sqrt(nrm), self.grid, self.time)

    def with_values(self, values, time=None) -> "WaveFunction":
        return WaveFunction(values, self.grid, self.time if time is None else time)


@dataclass(frozen=True)
class PolarFields:
    """Density and phase-gradient fields of a wave function.

    ``grad_log_omega`` (the log-density gradient) and ``valid`` (nodes with
    ``omega >= NODE_EPS * max(omega)``) are carried alongside the primary
    fields because the osmotic term needs them at every trajectory step.
    """

    omega: np.ndarray
    grad_s: np.ndarray
    grad_log_omega: np.ndarray
    valid: np.ndarray
    grid: SpatialGrid
    hbar_eff: float = 1.0
    time: float = 0.0
    dt_s: Optional[np.ndarray] = None
    _stack: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("omega", "grad_s", "grad_log_omega", "valid", "dt_s"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val))
        stack = np.concatenate([self.grad_s, self.grad_log_omega]).reshape(
            2 * self.grid.dims, -1)
        object.__setattr__(self, "_stack", _frozen(stack))

    @property
    def flagged(self) -> np.ndarray:
        return ~self.valid

    def norm(self) -> float:
        return self.grid.integrate(self.omega)


# ---------------------------------------------------------------------------
# differential operators


def _default_method(grid):
    return "spectral" if grid.periodic else "fd4"


def _spectral_derivative(f, grid, axis, order):
    if not grid.spectral_ok:
        raise ValueError("spectral operators need power-of-two n_points")
    f = np.asarray(f)
    n = f.shape[axis]
    if not grid.periodic:
        f = np.concatenate([f, -np.flip(f, axis=axis)], axis=axis)
    k = grid.wavenumbers(axis)
    mult = (1j * k) ** order
    if order % 2 == 1:
        mult[len(k) // 2] = 0.0  # Nyquist mode has no odd derivative
    shape = [1] * f.ndim
    shape[axis] = -1
    out = np.fft.ifft(np.fft.fft(f, axis=axis) * mult.reshape(shape), axis=axis)
    if not grid.periodic:
        out = np.take(out, np.arange(n), axis=axis)
    if not np.iscomplexobj(f):
        out = out.real
    return out


def _padded(f, grid, axis, width=2):
    pad = [(0, 0)] * f.ndim
    pad[axis] = (width, width)
    if grid.periodic:
        return np.pad(f, pad, mode="wrap")
    g = np.pad(f, pad, mode="symmetric")
    lo = [slice(None)] * f.ndim
    hi = [slice(None)] * f.ndim
    lo[axis] = slice(0, width)
    hi[axis] = slice(-width, None)
    g[tuple(lo)] *= -1
    g[tuple(hi)] *= -1
    return g


def _shift(g, axis, s, n, width=2):
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(width + s, width + s + n)
    return g[tuple(sl)]


def _fd4_derivative(f, grid, axis, order):
    f = np.asarray(f)
    n = f.shape[axis]
    h = grid.spacing[axis]
    g = _padded(f, grid, axis)
    m2, m1, p1, p2 = (_shift(g, axis, s, n) for s in (-2, -1, 1, 2))
    if order == 1:
        return (m2 - 8 * m1 + 8 * p1 - p2) / (12 * h)
    return (-m2 + 16 * m1 - 30 * f + 16 * p1 - p2) / (12 * h * h)


def _derivative(f, grid, axis, order, method):
    method = method or _default_method(grid)
    if method == "spectral":
        return _spectral_derivative(f, grid, axis, order)
    if method == "fd4":
        return _fd4_derivative(f, grid, axis, order)
    raise ValueError(f"unknown differentiation method {method!r}")


def gradient(f, grid: SpatialGrid, method: Optional[str] = None) -> np.ndarray:
    """Gradient of a scalar field; returns shape ``(dims, *grid.shape)``.

    ``method`` is ``"spectral"`` (default on periodic grids) or ``"fd4"``
    (fourth-order central differences, default on hard-wall grids).
    """
    return np.stack([_derivative(f, grid, i, 1, method) for i in range(grid.dims)])


def laplacian(f, grid: SpatialGrid, method: Optional[str] = None) -> np.ndarray:
    return sum(_derivative(f, grid, i, 2, method) for i in range(grid.dims))


def divergence(vec, grid: SpatialGrid, method: Optional[str] = None) -> np.ndarray:
    return sum(_derivative(vec[i], grid, i, 1, method) for i in range(grid.dims))


def node_mask(omega, eps: float = NODE_EPS) -> np.ndarray:
    """True where the density is above the node threshold."""
    return omega >= eps * np.max(omega)


# ---------------------------------------------------------------------------
# polar decomposition


def check_normalized(psi: WaveFunction, tol: float = NORM_TOL) -> float:
    nrm = psi.norm()
    if not nrm > 0:
        raise ValueError("wave function is identically zero")
    if abs(nrm - 1.0) > tol:
        raise ValueError(f"wave function not normalized (norm = {nrm:.3e})")
    return nrm


def polar_decompose(psi: WaveFunction, hbar_eff: float = 1.0, *,
                    system=None, neighbors=None, method: Optional[str] = None,
                    eps: float = NODE_EPS) -> PolarFields:
    """Split ``psi`` into density and phase-gradient fields.

    The phase gradient is read from the probability current,
    ``hbar * Im(psi' / psi)``, so the phase is never unwrapped.  The time
    derivative of the phase is filled in when either ``neighbors`` (the
    frames one solver step before and after) or ``system`` (for the
    Schrodinger identity ``dS/dt = -Re(H psi / psi)``) is given.
    """
    if not hbar_eff > 0:
        raise ValueError("hbar_eff must be positive")
    check_normalized(psi)
    grid = psi.grid
    v = np.asarray(psi.values)
    omega = np.abs(v) ** 2
    valid = node_mask(omega, eps)
    if not np.any(np.imag(v)):
        # real input: keep the derivative real so the phase gradient is exactly zero
        dpsi = gradient(np.real(v), grid, method)
    else:
        dpsi = gradient(v, grid, method)
    safe = np.where(valid, v, 1.0)
    ratio = np.where(valid, dpsi / safe, 0.0)
    grad_s = hbar_eff * ratio.imag
    grad_log = 2.0 * ratio.real

    dt_s = None
    if neighbors is not None:
        prev, nxt = neighbors
        span = nxt.time - prev.time
        if not span > 0:
            raise ValueError("neighbor frames must be ordered in time")
        dphase = np.angle(np.asarray(nxt.values) * np.conj(prev.values))
        dt_s = np.where(valid, hbar_eff * dphase / span, 0.0)
    elif system is not None:
        from .schrodinger import apply_hamiltonian

        hpsi = apply_hamiltonian(v, grid, system, hbar_eff)
        dt_s = np.where(valid, -(hpsi / safe).real, 0.0)

    return PolarFields(omega=omega, grad_s=grad_s, grad_log_omega=grad_log,
                       valid=valid, grid=grid, hbar_eff=hbar_eff, time=psi.time,
                       dt_s=dt_s)


def _fill_from_nearest(values, valid):
    """Copy each flagged entry from its nearest unflagged node."""
    if valid.all() or not valid.any():
        return values
    idx = distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def _antiderivative(f, grid, axis, ref):
    """Integral of ``f`` along ``axis`` starting from index ``ref``."""
    # local rule: a spectral antiderivative would ring across the whole domain
    out = cumulative_simpson(f, dx=grid.spacing[axis], axis=axis, initial=0.0)
    return out - np.take(out, [ref], axis=axis)


def _plaquette_curl(grad_s, grid, valid):
    hx, hy = grid.spacing
    gx, gy = grad_s
    # circulation around each cell, trapezoid on the edges
    circ = (0.5 * hx * (gx[:-1, :-1] + gx[1:, :-1])
            + 0.5 * hy * (gy[1:, :-1] + gy[1:, 1:])
            - 0.5 * hx * (gx[:-1, 1:] + gx[1:, 1:])
            - 0.5 * hy * (gy[:-1, :-1] + gy[:-1, 1:]))
    ok = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:] & valid[1:, 1:]
    return np.where(ok, circ / (hx * hy), 0.0)


def _integrate_phase_2d(gs, grid, valid, ref, omega):
    """Least-squares phase from trapezoid increments on edges between valid nodes.

    Edges are weighted by ``sqrt`` of the smaller endpoint density relative
    to the peak, so the noisy low-density fringe cannot bend the phase in
    the bulk.  Returns the phase on the full grid and the largest weighted
    edge residual; loops around excluded nodes carry any circulation into
    that residual.
    """
    shape = grid.shape
    index = np.arange(valid.size).reshape(shape)
    rel = np.sqrt(omega / omega.max())
    rows, rhs, wts = [], [], []
    for axis in (0, 1):
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        ok = valid[lo] & valid[hi]
        rows.append((index[lo][ok], index[hi][ok]))
        rhs.append(0.5 * grid.spacing[axis] * (gs[axis][lo][ok] + gs[axis][hi][ok]))
        wts.append(np.minimum(rel[lo][ok], rel[hi][ok]))
    a = np.concatenate([r[0] for r in rows])
    b = np.concatenate([r[1] for r in rows])
    w = np.concatenate(wts)
    inc = w * np.concatenate(rhs)
    n_edges = a.size
    d = sparse.csr_matrix((np.r_[-w, w],
                           (np.r_[np.arange(n_edges), np.arange(n_edges)], np.r_[a, b])),
                          shape=(n_edges, valid.size))

    # pin one node per connected piece (and every isolated or flagged node)
    adjacency = sparse.csr_matrix((np.ones(n_edges), (a, b)), shape=(valid.size, valid.size))
    _, labels = connected_components(adjacency, directed=False)
    flat_ref = int(np.ravel_multi_index(ref, shape))
    pins = {}
    for node in np.r_[flat_ref, np.flatnonzero(valid.ravel())]:
        pins.setdefault(labels[node], node)
    pin_nodes = np.r_[np.array(list(pins.values()), dtype=int), np.flatnonzero(~valid.ravel())]
    pin = sparse.csr_matrix((np.ones(pin_nodes.size), (pin_nodes, pin_nodes)),
                            shape=(valid.size, valid.size))
    s = spsolve((d.T @ d + pin).tocsc(), d.T @ inc)
    resid = np.max(np.abs(d @ s - inc)) if n_edges else 0.0

    s = s.reshape(shape)
    if not valid.all():
        # extend the phase outward linearly from the nearest valid node
        idx = distance_transform_edt(~valid, return_distances=False, return_indices=True)
        near = tuple(idx)
        mesh = grid.mesh()
        step = sum((mesh[k] - mesh[k][near]) * gs[k][near] for k in range(2))
        s = np.where(valid, s, s[near] + step)
    return s, resid


def synthesize_wavefunction(fields: PolarFields, reference_point=None,
                            curl_tol: float = 1e-6) -> WaveFunction:
    """Rebuild ``sqrt(omega) * exp(i S / hbar)`` from the polar fields.

    ``S`` is the line integral of ``grad_s`` from ``reference_point`` (the
    density maximum by default), which also fixes the irrelevant global
    phase.  Across flagged nodes the phase is continued linearly from the
    nearest valid node.  On 2D grids a phase gradient with circulation,
    either inside a cell or around an excluded node, raises
    :class:`VortexError`.
    """
    grid = fields.grid
    gs = np.asarray(fields.grad_s)
    valid = np.asarray(fields.valid)
    if reference_point is None:
        ref = np.unravel_index(np.argmax(fields.omega), grid.shape)
    else:
        ref = grid.nearest_index(reference_point)

    if grid.dims == 1:
        s = _antiderivative(_fill_from_nearest(gs[0], valid), grid, 0, ref[0])
    else:
        curl = _plaquette_curl(gs, grid, valid)
        if np.max(np.abs(curl)) > curl_tol:
            raise VortexError(f"phase gradient has curl {np.max(np.abs(curl)):.3e}; "
                              "a vortex or node crossing makes the phase multivalued")
        s, resid = _integrate_phase_2d(gs, grid, valid, ref, np.asarray(fields.omega))
        if resid > curl_tol * grid.cell_volume:
            raise VortexError(f"phase increments are inconsistent (residual {resid:.3e}); "
                              "nonzero circulation around a node")
        s = s - s[ref]
    values = np.sqrt(fields.omega) * np.exp(1j * s / fields.hbar_eff)
    return WaveFunction(values, grid, fields.time)


def cell_cdf(grid: SpatialGrid, density, axis: int = 0):
    """Cell edges and CDF of a 1D density held constant over each node's cell.

    Returns ``(edges, cdf)`` with ``len(edges) == len(density) + 1``; the CDF
    is linear between edges.  Sampling and KS references both use this, so
    they agree exactly on what the grid density means.
    """
    d = np.clip(np.asarray(density, dtype=float), 0.0, None)
    h = grid.spacing[axis]
    edges = grid.lower[axis] + (np.arange(d.size + 1) + grid.offset - 0.5) * h
    cdf = np.concatenate([[0.0], np.cumsum(d) * h])
    if not cdf[-1] > 0:
        raise ValueError("density has no mass")
    return edges, cdf / cdf[-1]


def fold_to_cells(grid: SpatialGrid, x, axis: int = 0) -> np.ndarray:
    """Map periodic positions into the cell-edge interval used by ``cell_cdf``."""
    x = np.asarray(x, dtype=float)
    if not grid.periodic:
        return x
    start = grid.lower[axis] - 0.5 * grid.spacing[axis]
    return start + np.mod(x - start, grid.extent[axis])
