"""
Sign-fluctuating trajectory dynamics.

Each trajectory has a definite configuration at all times.  Over every
microscopic step ``dt`` the sign of ``lambda`` is redrawn with equal
probability and held fixed; the configuration then moves with the actual
velocity

    m dq/dt = grad S + (lambda / 2) grad(Omega) / Omega,

so that the sign-averaged drift is the Bohmian velocity ``grad S / m`` and
the sign-dependent (osmotic) part averages out.  The deviation from
stationary action is drawn separately from its exponential law.

Random numbers come from counter-based streams: the value used by
trajectory ``i`` at step ``k`` depends only on ``(master_seed, stream, i,
k)``, which makes ensembles independent of chunking and execution order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from .fields import PolarFields, SpatialGrid, cell_cdf, divergence
from ._kernels import heun_steps
from .schrodinger import ClassicalSystem

# ---------------------------------------------------------------------------
# counter-based random streams (SplitMix64 per trajectory)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAM_SIGN = 1
STREAM_INIT = 2
STREAM_DEVIATION = 3

RNG_SCHEME = ("splitmix64 per trajectory: key = mix(seed*G + stream_tag); "
              "state_i = mix(key ^ (i*G + G)); draw_k = mix(state_i + (k+1)*G); "
              "stream_tag = 16*stream + particle; sign = +1 if top bit clear else -1; "
              "uniform = (draw >> 11 + 0.5) * 2^-53")


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_states(seed: int, stream: int, indices, particle: int = 0) -> np.ndarray:
    """Per-trajectory stream states for ``indices``."""
    with np.errstate(over="ignore"):
        tag = np.uint64(16 * stream + particle)
        key = _mix(np.uint64(seed % 2 ** 64) * _GOLDEN + tag)
        idx = np.asarray(indices, dtype=np.uint64)
        return _mix(key ^ (idx * _GOLDEN + _GOLDEN))


def stream_draws(seed: int, stream: int, indices, step, particle: int = 0) -> np.ndarray:
    """Raw 64-bit draws for trajectories ``indices`` at counter ``step``."""
    state = stream_states(seed, stream, indices, particle)
    with np.errstate(over="ignore"):
        return _mix(state + (np.asarray(step, dtype=np.uint64) + np.uint64(1)) * _GOLDEN)


def stream_signs(seed, indices, step, particle=0) -> np.ndarray:
    bits = stream_draws(seed, STREAM_SIGN, indices, step, particle) >> np.uint64(63)
    return 1.0 - 2.0 * bits.astype(float)


def stream_uniforms(seed, stream, indices, step=0, particle=0) -> np.ndarray:
    raw = stream_draws(seed, stream, indices, step, particle) >> np.uint64(11)
    return (raw.astype(float) + 0.5) * 2.0 ** -53


# ---------------------------------------------------------------------------
# model parameters and the sign process


@dataclass(frozen=True)
class ModelParams:
    """Magnitude of ``lambda`` and the time-scale hierarchy.

    ``tau_lambda >= 10 tau_xi >= 100 dt`` is enforced; by default
    ``tau_xi = 10 dt`` and ``|lambda|`` never changes (``tau_lambda = inf``).
    """

    lambda_mag: float = 1.0
    dt: float = 1e-3
    tau_xi: Optional[float] = None
    tau_lambda: float = float("inf")

    def __post_init__(self):
        if not self.lambda_mag > 0:
            raise ValueError("lambda_mag must be positive (lambda never vanishes)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.tau_xi is None:
            object.__setattr__(self, "tau_xi", 10 * self.dt)
        if not 10 * self.tau_xi >= 100 * self.dt * (1 - 1e-12):
            raise ValueError(f"time-scale hierarchy violated: tau_xi={self.tau_xi} must be "
                             f">= 10*dt={10 * self.dt} (tau_lambda >> tau_xi >> dt)")
        if not self.tau_lambda >= 10 * self.tau_xi * (1 - 1e-12):
            raise ValueError(f"time-scale hierarchy violated: tau_lambda={self.tau_lambda} "
                             f"must be >= 10*tau_xi={10 * self.tau_xi}")


@dataclass
class SignProcess:
    """Equal-probability sign of ``lambda`` for one trajectory (and particle)."""

    seed: int
    trajectory: int = 0
    particle: int = 0
    step: int = 0
    current_sign: int = 1


def step_sign(process: SignProcess) -> int:
    """Draw the sign for the next ``dt`` and advance the process."""
    s = int(stream_signs(process.seed, [process.trajectory], process.step, process.particle)[0])
    process.step += 1
    process.current_sign = s
    return s


# ---------------------------------------------------------------------------
# interpolation of grid fields at trajectory positions


def _lagrange4(t):
    return np.stack([-t * (t - 1) * (t - 2) / 6,
                     (t + 1) * (t - 1) * (t - 2) / 2,
                     -(t + 1) * t * (t - 2) / 2,
                     (t + 1) * t * (t - 1) / 6])


class _Stencil:
    """Cubic (4-point Lagrange) stencils at positions ``q`` (``(dims, N)``)."""

    def __init__(self, grid: SpatialGrid, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        self.idx = []
        self.w = []
        for i in range(grid.dims):
            n = grid.n_points[i]
            x = (q[i] - grid.lower[i]) / grid.spacing[i] - grid.offset
            base = np.floor(x).astype(int) - 1
            if grid.periodic:
                t = x - (base + 1)
                idx = np.mod(base[None, :] + np.arange(4)[:, None], n)
            else:
                base = np.clip(base, 0, n - 4)
                t = x - (base + 1)
                idx = base[None, :] + np.arange(4)[:, None]
            self.idx.append(idx)
            self.w.append(_lagrange4(t))
        if grid.dims == 1:
            self.flat = self.idx[0]
            self.weights = self.w[0]
            self.inner = self.idx[0][1:3]
        else:
            n1 = grid.n_points[1]
            ix, iy = self.idx
            self.flat = (ix[:, None, :] * n1 + iy[None, :, :]).reshape(16, -1)
            self.weights = (self.w[0][:, None, :] * self.w[1][None, :, :]).reshape(16, -1)
            self.inner = (ix[1:3, None, :] * n1 + iy[None, 1:3, :]).reshape(4, -1)

    def apply(self, stack):
        """``stack`` has shape ``(nf, n_nodes)``; returns ``(nf, N)``."""
        return np.einsum("fkn,kn->fn", stack[:, self.flat], self.weights)

    def touches(self, mask_flat):
        return np.any(mask_flat[self.inner], axis=0)


def interpolate(values, grid: SpatialGrid, q) -> np.ndarray:
    """Cubic interpolation of a grid field (or stack of fields) at ``q``."""
    values = np.asarray(values)
    lead = values.shape[: values.ndim - grid.dims]
    stack = values.reshape((-1, int(np.prod(grid.shape))))
    out = _Stencil(grid, q).apply(stack)
    return out.reshape(lead + out.shape[1:])


class _Sampled:
    """Drift and osmotic inputs of one (possibly time-blended) field snapshot."""

    def __init__(self, parts, q):
        grid = parts[0][1].grid
        st = _Stencil(grid, q)
        vals = None
        flagged = None
        for weight, f in parts:
            v = st.apply(f._stack) * weight
            vals = v if vals is None else vals + v
            fl = st.touches(~f.valid.ravel())
            flagged = fl if flagged is None else flagged | fl
        d = grid.dims
        self.grad_s = vals[:d]
        self.grad_log = vals[d:]
        self.flagged = flagged


class FieldTrack:
    """Time lookup over a forward-only stream of field frames.

    Fields between two frames are blended linearly.  Frames further apart
    than ``max_spacing`` are rejected.
    """

    def __init__(self, frames: Iterable[PolarFields], max_spacing: float, tol: float = 1e-9):
        self._it = iter(frames)
        self.max_spacing = max_spacing
        self.tol = tol
        self.prev = None
        self.cur = next(self._it, None)
        if self.cur is None:
            raise ValueError("empty frame sequence")
        self.grid = self.cur.grid

    def _advance(self):
        nxt = next(self._it, None)
        if nxt is None:
            return False
        if nxt.grid != self.grid:
            raise ValueError("frame/grid mismatch: frames live on different grids")
        gap = nxt.time - self.cur.time
        if gap > self.max_spacing * (1 + 1e-6) + self.tol:
            raise ValueError(f"frame spacing {gap:.3g} exceeds the trajectory step "
                             f"{self.max_spacing:.3g}")
        self.prev, self.cur = self.cur, nxt
        return True

    def at(self, t: float):
        while self.cur.time < t - self.tol:
            if not self._advance():
                raise ValueError(f"frames end at t={self.cur.time:.6g}, needed t={t:.6g}")
        if abs(self.cur.time - t) <= self.tol:
            return [(1.0, self.cur)]
        if self.prev is None or self.prev.time > t + self.tol:
            raise ValueError(f"no frame at or before t={t:.6g}")
        a = (t - self.prev.time) / (self.cur.time - self.prev.time)
        return [(1.0 - a, self.prev), (a, self.cur)]


# ---------------------------------------------------------------------------
# velocity and stepping


def _masses(system, ndim):
    return system.mass_array(ndim)


def _velocity(sampled, signs, lambda_mag, system, osmotic=True, memory=None):
    m = _masses(system, 2)
    drift = sampled.grad_s / m
    if not osmotic:
        return drift, 0
    osm = 0.5 * lambda_mag * sampled.grad_log / m
    events = 0
    if np.any(sampled.flagged):
        fl = sampled.flagged
        events = int(np.count_nonzero(fl))
        if memory is not None:
            osm[:, fl] = memory[:, fl]
        else:
            osm[:, fl] = 0.0
    if memory is not None:
        memory[:, ~sampled.flagged] = osm[:, ~sampled.flagged]
    return drift + signs * osm, events


def _as_points(q, dims):
    q = np.asarray(q, dtype=float)
    scalar = q.ndim <= 1 and q.size == dims
    pts = q.reshape(dims, -1)
    return pts, scalar


def actual_velocity(q, fields: PolarFields, sign, params: ModelParams,
                    system: ClassicalSystem) -> np.ndarray:
    """Velocity of a configuration at sign ``sign`` (+1 or -1).

    Cubic interpolation of the fields to ``q``; inside node cells the
    osmotic term is dropped so the result is always finite.
    """
    pts, scalar = _as_points(q, fields.grid.dims)
    v, _ = _velocity(_Sampled([(1.0, fields)], pts), np.asarray(sign, float),
                     params.lambda_mag, system)
    return v[:, 0] if scalar else v


def _blend(parts):
    """Field stack and validity of a time-blended snapshot."""
    if len(parts) == 1:
        f = parts[0][1]
        return f._stack, f.valid.ravel()
    (a, fa), (b, fb) = parts
    return a * fa._stack + b * fb._stack, fa.valid.ravel() & fb.valid.ravel()


def _heun(q, f0, f1, signs, dt, lambda_mag, system, grid, osmotic, memory,
          streams=None, step=0):
    """Heun step of every column of ``q``; returns (new q, node events).

    Signs come from ``streams`` at counter ``step`` when given, else from
    ``signs``.
    """
    q = np.array(q, dtype=float, order="C")
    if memory is None:
        memory = np.zeros_like(q)
    s0, v0 = _blend(f0)
    s1, v1 = _blend(f1)
    if streams is None:
        streams = np.zeros((q.shape[0], 0), np.uint64)
        signs = np.ascontiguousarray(np.broadcast_to(np.asarray(signs, float), q.shape))
    else:
        signs = np.zeros((q.shape[0], 0))
    events = heun_steps(q, s0, v0, s1, v1, streams, signs, step, dt, grid,
                        1.0 / np.array(system.masses, float), 0.5 * lambda_mag, osmotic, memory)
    return q, events


def step_trajectory(q, fields_t: PolarFields, fields_next: PolarFields, sign,
                    params: ModelParams, system: ClassicalSystem, osmotic: bool = True):
    """One Heun step of length ``params.dt`` with the sign frozen."""
    grid = fields_t.grid
    pts, scalar = _as_points(q, grid.dims)
    out, _ = _heun(pts, [(1.0, fields_t)], [(1.0, fields_next)], np.asarray(sign, float),
                   params.dt, params.lambda_mag, system, grid, osmotic, None)
    return out[:, 0] if scalar else out


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class StochasticTrajectory:
    times: np.ndarray
    q: np.ndarray
    signs: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Checkpointed ensemble state.

    ``positions`` is ``(n_checkpoints, dims, n)``; ``signs`` holds, per
    checkpoint, the sign in force over the step that starts there.  When
    ``paths`` were recorded they are ``(n_records, dims, n)`` at
    ``path_times``.
    """

    times: np.ndarray
    positions: np.ndarray
    signs: np.ndarray
    master_seed: int
    params: ModelParams
    node_events: int = 0
    paths: Optional[np.ndarray] = None
    path_times: Optional[np.ndarray] = None
    sign_mode: str = "per-particle"
    osmotic: bool = True

    @property
    def n(self) -> int:
        return self.positions.shape[-1]

    @property
    def dims(self) -> int:
        return self.positions.shape[1]

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 0.5 * self.params.dt:
            raise KeyError(f"no checkpoint at t={t}")
        return k

    def at(self, t: float):
        k = self.index(t)
        return self.positions[k], self.signs[k]

    def trajectory(self, i: int) -> StochasticTrajectory:
        if self.paths is None:
            return StochasticTrajectory(self.times, self.positions[:, :, i], self.signs[:, :, i])
        return StochasticTrajectory(self.path_times, self.paths[:, :, i])


def sample_positions(omega, grid: SpatialGrid, n: int, master_seed: int,
                     sampling: str = "random", indices=None) -> np.ndarray:
    """Draw ``n`` configurations from a grid density.

    ``"random"`` inverts the cell CDF with per-trajectory stream uniforms;
    in 2D the first coordinate comes from the marginal and the second from
    the conditional in that cell, which is exact for the cell-constant
    density.  ``"stratified"`` (1D only) places trajectory ``i`` at quantile
    ``(i + 1/2) / n``.
    """
    omega = np.asarray(omega, dtype=float)
    idx = np.arange(n) if indices is None else np.asarray(indices)
    if sampling == "stratified":
        if grid.dims != 1:
            raise ValueError("stratified sampling is only defined in 1D")
        u = (idx + 0.5) / n
        edges, cdf = cell_cdf(grid, omega)
        return grid.wrap(np.interp(u, cdf, edges)[None, :])
    if sampling != "random":
        raise ValueError(f"unknown sampling {sampling!r}")
    u0 = stream_uniforms(master_seed, STREAM_INIT, idx, 0, particle=0)
    if grid.dims == 1:
        edges, cdf = cell_cdf(grid, omega)
        return grid.wrap(np.interp(u0, cdf, edges)[None, :])
    edges0, cdf0 = cell_cdf(grid, omega.sum(axis=1), axis=0)
    q0 = np.interp(u0, cdf0, edges0)
    cell = np.clip(np.searchsorted(edges0, q0, side="right") - 1, 0, grid.n_points[0] - 1)
    u1 = stream_uniforms(master_seed, STREAM_INIT, idx, 0, particle=1)
    q1 = np.empty_like(q0)
    for c in np.unique(cell):
        sel = cell == c
        edges1, cdf1 = cell_cdf(grid, omega[c], axis=1)
        q1[sel] = np.interp(u1[sel], cdf1, edges1)
    return grid.wrap(np.stack([q0, q1]))


def _stream_block(seed, idx, dims, sign_mode):
    parts = [0] * dims if sign_mode == "shared" else list(range(dims))
    return np.stack([stream_states(seed, STREAM_SIGN, idx, p) for p in parts])


def _signs_for(seed, idx, step, dims, sign_mode):
    if sign_mode == "shared":
        s = stream_signs(seed, idx, step, 0)
        return np.broadcast_to(s, (dims, s.size)).copy()
    return np.stack([stream_signs(seed, idx, step, p) for p in range(dims)])


def _run_chunk(frames, system, params, q, idx, seed, steps, t0, ck_steps, osmotic,
               sign_mode, record_every):
    track = FieldTrack(frames, params.dt)
    grid = track.grid
    dims = grid.dims
    memory = np.zeros_like(q)
    ck = {k: j for j, k in enumerate(ck_steps)}
    pos = np.empty((len(ck_steps),) + q.shape)
    sgn = np.empty((len(ck_steps),) + q.shape)
    paths = [q.copy()] if record_every else None
    streams = _stream_block(seed, idx, dims, sign_mode)
    events = 0
    for k in range(steps + 1):
        if k in ck:
            pos[ck[k]] = q
            sgn[ck[k]] = _signs_for(seed, idx, k, dims, sign_mode)
        if k == steps:
            break
        f0 = track.at(t0 + k * params.dt)
        f1 = track.at(t0 + (k + 1) * params.dt)
        q, ev = _heun(q, f0, f1, None, params.dt, params.lambda_mag, system, grid,
                      osmotic, memory, streams=streams, step=k)
        events += ev
        if record_every and (k + 1) % record_every == 0:
            paths.append(q.copy())
    return pos, sgn, (np.array(paths) if record_every else None), events


def evolve_ensemble(frames: Iterable[PolarFields], system: ClassicalSystem,
                    params: ModelParams, n: int, master_seed: int,
                    checkpoints: Sequence[float], *, initial=None,
                    sampling: str = "random", osmotic: bool = True,
                    sign_mode: str = "per-particle", record_every: int = 0,
                    workers: int = 1) -> TrajectoryEnsemble:
    """Propagate ``n`` trajectories through a sequence of field frames.

    ``frames`` must start at the initial time and be spaced no wider than
    ``params.dt``; it is iterated once per worker, so pass a re-iterable
    source (a list, or a frame generator object) when ``workers > 1``.
    Initial positions are drawn from the first frame's density unless
    ``initial`` (``(dims, n)``) is given.  With ``osmotic=False`` the
    trajectories are the Bohmian ones.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if sign_mode not in ("per-particle", "shared"):
        raise ValueError(f"unknown sign_mode {sign_mode!r}")
    if iter(frames) is frames:
        frames = list(frames)
    first = next(iter(frames))
    grid = first.grid
    if first.grid.dims != system.dims:
        raise ValueError("frame/grid mismatch: system and frames differ in dimension")
    t0 = first.time
    ck_steps = sorted({int(round((c - t0) / params.dt)) for c in checkpoints})
    if not ck_steps or ck_steps[0] < 0:
        raise ValueError("checkpoints must not precede the first frame")
    steps = ck_steps[-1]

    idx_all = np.arange(n)
    if initial is None:
        q_all = sample_positions(first.omega, grid, n, master_seed, sampling)
    else:
        q_all = np.array(initial, dtype=float).reshape(grid.dims, n)

    workers = max(1, min(int(workers), n))
    chunks = np.array_split(idx_all, workers)

    def run(sel):
        return _run_chunk(frames, system, params, q_all[:, sel].copy(), sel, master_seed,
                          steps, t0, ck_steps, osmotic, sign_mode, record_every)

    if workers == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))

    pos = np.concatenate([r[0] for r in results], axis=-1)
    sgn = np.concatenate([r[1] for r in results], axis=-1)
    paths = None
    path_times = None
    if record_every:
        paths = np.concatenate([r[2] for r in results], axis=-1)
        path_times = t0 + params.dt * record_every * np.arange(paths.shape[0])
    return TrajectoryEnsemble(
        times=t0 + params.dt * np.array(ck_steps), positions=pos, signs=sgn,
        master_seed=master_seed, params=params,
        node_events=sum(r[3] for r in results), paths=paths, path_times=path_times,
        sign_mode=sign_mode, osmotic=osmotic)


# ---------------------------------------------------------------------------
# deviation from stationary action


@dataclass(frozen=True)
class DeviationSample:
    value: np.ndarray
    lambda_signed: float

    @property
    def production(self):
        """Uncertainty production ``(2 / lambda)(dS - dA)``; never negative."""
        return 2.0 * np.asarray(self.value) / self.lambda_signed


def sample_deviation(lambda_signed: float, rng: np.random.Generator,
                     size=None) -> DeviationSample:
    """Draw ``dS - dA`` from the exponential law with mean ``|lambda| / 2``.

    The draw carries the sign of ``lambda`` so that ``(dS - dA)/lambda``
    is non-negative.
    """
    if lambda_signed == 0 or not np.isfinite(lambda_signed):
        raise ValueError("lambda must be a finite, non-vanishing number")
    mag = rng.exponential(scale=0.5 * abs(lambda_signed), size=size)
    return DeviationSample(np.sign(lambda_signed) * mag, float(lambda_signed))


def compute_dA_step(q, q_next, system: ClassicalSystem, dt: float):
    """Action increment ``L dt`` with the step's own velocity and ``V`` at the midpoint."""
    q = np.asarray(q, dtype=float).reshape(system.dims, -1)
    q_next = np.asarray(q_next, dtype=float).reshape(system.dims, -1)
    v = (q_next - q) / dt
    m = system.mass_array(2)
    lag = np.sum(0.5 * m * v * v, axis=0) - system.V(0.5 * (q + q_next))
    out = lag * dt
    return out[0] if out.size == 1 else out


def compute_dS_step(q, q_next, fields_t: PolarFields, fields_next: PolarFields):
    """Chain-rule increment ``dS = dS/dt dt + grad S . dq`` at the step midpoint."""
    if fields_t.dt_s is None or fields_next.dt_s is None:
        raise ValueError("fields need dt_s (decompose with system= or neighbors=)")
    grid = fields_t.grid
    q = np.asarray(q, dtype=float).reshape(grid.dims, -1)
    q_next = np.asarray(q_next, dtype=float).reshape(grid.dims, -1)
    mid = 0.5 * (q + q_next)
    dt = fields_next.time - fields_t.time
    gs = 0.5 * (interpolate(fields_t.grad_s, grid, mid) + interpolate(fields_next.grad_s, grid, mid))
    ts = 0.5 * (interpolate(fields_t.dt_s, grid, mid) + interpolate(fields_next.dt_s, grid, mid))
    out = ts * dt + np.sum(gs * (q_next - q), axis=0)
    return out[0] if out.size == 1 else out


# ---------------------------------------------------------------------------
# information balance


def _theta(fields, system):
    return divergence(fields.grad_s / system.mass_array(fields.grid.dims + 1), fields.grid,
                      method="fd4")


def _rhs(fields, sign, lambda_mag, system):
    lam = sign * lambda_mag
    m = system.mass_array(fields.grid.dims + 1)
    p = fields.grad_s + 0.5 * lam * fields.grad_log_omega
    ham = np.sum(p * p / (2 * m), axis=0) + system.potential_on(fields.grid)
    return (2.0 / lam) * (ham + fields.dt_s) + _theta(fields, system)


def balance_mask(fields_t: PolarFields, fields_next: PolarFields) -> np.ndarray:
    """Nodes where both frames are above the node threshold, kept two
    cells clear of flagged nodes (the fourth-order stencil reach)."""
    mask = fields_t.valid & fields_next.valid
    return binary_erosion(mask, iterations=2, border_value=1)


def information_balance_residual(fields_t: PolarFields, fields_next: PolarFields, sign: int,
                                 params: ModelParams, system: ClassicalSystem) -> np.ndarray:
    """Pointwise defect of the time component of the balance law at one sign.

    Evaluated at the midpoint of the frame interval; ``NaN`` outside
    :func:`balance_mask`.
    """
    if fields_t.dt_s is None or fields_next.dt_s is None:
        raise ValueError("fields need dt_s (decompose with system= or neighbors=)")
    dt = fields_next.time - fields_t.time
    if not dt > 0:
        raise ValueError("frames must be ordered in time")
    mask = balance_mask(fields_t, fields_next)
    with np.errstate(divide="ignore", invalid="ignore"):
        dlog = (np.log(fields_next.omega) - np.log(fields_t.omega)) / dt
    rhs = 0.5 * (_rhs(fields_t, sign, params.lambda_mag, system)
                 + _rhs(fields_next, sign, params.lambda_mag, system))
    return np.where(mask, -dlog - rhs, np.nan)


def sign_averaged_balance_residual(fields_t, fields_next, params, system) -> np.ndarray:
    return 0.5 * (information_balance_residual(fields_t, fields_next, +1, params, system)
                  + information_balance_residual(fields_t, fields_next, -1, params, system))


def spatial_balance_residual(fields: PolarFields, sign: int, params: ModelParams) -> np.ndarray:
    """Defect of ``-grad ln Omega = (2/lambda)(grad S - p)`` with ``p`` the
    actual momentum; zero up to roundoff wherever the fields are valid."""
    lam = sign * params.lambda_mag
    p = fields.grad_s + 0.5 * lam * fields.grad_log_omega
    res = -fields.grad_log_omega - (2.0 / lam) * (fields.grad_s - p)
    return np.where(fields.valid, res, np.nan)


class FieldFrames:
    """Re-iterable stream of polar fields from a Schrodinger propagation.

    Each iteration restarts the propagation, so several consumers (for
    example parallel workers) can share one source without holding every
    frame in memory.  ``with_dt_s`` also fills in the phase time derivative.
    """

    def __init__(self, psi0, system: ClassicalSystem, cfg, hbar_eff: Optional[float] = None,
                 with_dt_s: bool = False):
        self.psi0 = psi0
        self.system = system
        self.cfg = cfg
        self.hbar_eff = cfg.hbar if hbar_eff is None else hbar_eff
        self.with_dt_s = with_dt_s
        self.last = None

    def __iter__(self):
        from .fields import polar_decompose
        from .schrodinger import iter_propagate

        sys_ = self.system if self.with_dt_s else None
        for w in iter_propagate(self.psi0, self.system, self.cfg):
            self.last = polar_decompose(w, self.hbar_eff, system=sys_)
            yield self.last
