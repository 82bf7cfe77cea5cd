"""Compiled inner loops for ensemble stepping (cubic interpolation plus Heun)."""
import numba
import numpy as np


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sign(state, step):
    """Sign drawn by a trajectory stream at counter ``step`` (see stochastic)."""
    z = state + (np.uint64(step) + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    z = z ^ (z >> np.uint64(31))
    return 1.0 - 2.0 * float(z >> np.uint64(63))


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sign_of(streams, signs, step, d, i):
    if streams.shape[1] > 0:
        return _sign(streams[d, i], step)
    return signs[d, i]


@numba.njit(cache=True, error_model="numpy", inline="always")
def _stencil(x, n, periodic):
    base = int(np.floor(x)) - 1
    if not periodic:
        base = min(max(base, 0), n - 4)
    t = x - (base + 1)
    w = (-t * (t - 1.0) * (t - 2.0) / 6.0,
         (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
         -(t + 1.0) * t * (t - 2.0) / 2.0,
         (t + 1.0) * t * (t - 1.0) / 6.0)
    if periodic and (base < 0 or base + 3 >= n):
        k = (base % n, (base + 1) % n, (base + 2) % n, (base + 3) % n)
    else:
        k = (base, base + 1, base + 2, base + 3)
    return k, w


@numba.njit(cache=True, error_model="numpy", inline="always")
def _wrap(x, lo, hi, periodic):
    if periodic:
        span = hi - lo
        y = x - lo
        if y < 0.0 or y >= span:
            y = y % span
        return lo + y
    for _ in range(4):
        if x < lo:
            x = 2 * lo - x
        if x > hi:
            x = 2 * hi - x
    return min(max(x, lo), hi)


@numba.njit(cache=True, error_model="numpy", inline="always")
def _osmotic(raw, flagged, osmotic, mem, i, d):
    if not osmotic:
        return 0.0
    if flagged:
        return mem[d, i]
    mem[d, i] = raw
    return raw


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sample_1d(stack, valid, x, n, periodic):
    k, w = _stencil(x, n, periodic)
    gs = w[0] * stack[0, k[0]] + w[1] * stack[0, k[1]] + w[2] * stack[0, k[2]] + w[3] * stack[0, k[3]]
    gl = w[0] * stack[1, k[0]] + w[1] * stack[1, k[1]] + w[2] * stack[1, k[2]] + w[3] * stack[1, k[3]]
    return gs, gl, not (valid[k[1]] and valid[k[2]])


@numba.njit(cache=True, error_model="numpy", nogil=True)
def heun_steps_1d(q, stack0, valid0, stack1, valid1, streams, signs, step, dt, n, lower, upper, h,
                  offset, periodic, inv_m, half_lam, osmotic, memory):
    """Advance every column of ``q`` (``(1, N)``) by one Heun step in place."""
    events = 0
    c = half_lam * inv_m
    for i in range(q.shape[1]):
        s = _sign_of(streams, signs, step, 0, i)
        x = q[0, i]
        gs, gl, fl = _sample_1d(stack0, valid0, (x - lower) / h - offset, n, periodic)
        if fl and osmotic:
            events += 1
        u = gs * inv_m + s * _osmotic(c * gl, fl, osmotic, memory, i, 0)
        xp = _wrap(x + dt * u, lower, upper, periodic)
        gs, gl, fl = _sample_1d(stack1, valid1, (xp - lower) / h - offset, n, periodic)
        if fl and osmotic:
            events += 1
        w = gs * inv_m + s * _osmotic(c * gl, fl, osmotic, memory, i, 0)
        q[0, i] = _wrap(x + 0.5 * dt * (u + w), lower, upper, periodic)
    return events


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sample_2d(stack, valid, x, y, n0, n1, periodic):
    kx, wx = _stencil(x, n0, periodic)
    ky, wy = _stencil(y, n1, periodic)
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    for a in range(4):
        row = kx[a] * n1
        for b in range(4):
            node = row + ky[b]
            wt = wx[a] * wy[b]
            a0 += wt * stack[0, node]
            a1 += wt * stack[1, node]
            a2 += wt * stack[2, node]
            a3 += wt * stack[3, node]
    fl = not (valid[kx[1] * n1 + ky[1]] and valid[kx[1] * n1 + ky[2]]
              and valid[kx[2] * n1 + ky[1]] and valid[kx[2] * n1 + ky[2]])
    return a0, a1, a2, a3, fl


@numba.njit(cache=True, error_model="numpy", nogil=True)
def heun_steps_2d(q, stack0, valid0, stack1, valid1, streams, signs, step, dt, n0, n1, lo0, lo1, hi0, hi1,
                  h0, h1, offset, periodic, inv_m0, inv_m1, half_lam, osmotic, memory):
    """Advance every column of ``q`` (``(2, N)``) by one Heun step in place."""
    events = 0
    c0 = half_lam * inv_m0
    c1 = half_lam * inv_m1
    for i in range(q.shape[1]):
        s0 = _sign_of(streams, signs, step, 0, i)
        s1 = _sign_of(streams, signs, step, 1, i)
        x = q[0, i]
        y = q[1, i]
        g0, g1, l0, l1, fl = _sample_2d(stack0, valid0, (x - lo0) / h0 - offset,
                                        (y - lo1) / h1 - offset, n0, n1, periodic)
        if fl and osmotic:
            events += 1
        u0 = g0 * inv_m0 + s0 * _osmotic(c0 * l0, fl, osmotic, memory, i, 0)
        u1 = g1 * inv_m1 + s1 * _osmotic(c1 * l1, fl, osmotic, memory, i, 1)
        xp = _wrap(x + dt * u0, lo0, hi0, periodic)
        yp = _wrap(y + dt * u1, lo1, hi1, periodic)
        g0, g1, l0, l1, fl = _sample_2d(stack1, valid1, (xp - lo0) / h0 - offset,
                                        (yp - lo1) / h1 - offset, n0, n1, periodic)
        if fl and osmotic:
            events += 1
        w0 = g0 * inv_m0 + s0 * _osmotic(c0 * l0, fl, osmotic, memory, i, 0)
        w1 = g1 * inv_m1 + s1 * _osmotic(c1 * l1, fl, osmotic, memory, i, 1)
        q[0, i] = _wrap(x + 0.5 * dt * (u0 + w0), lo0, hi0, periodic)
        q[1, i] = _wrap(y + 0.5 * dt * (u1 + w1), lo1, hi1, periodic)
    return events


def heun_steps(q, stack0, valid0, stack1, valid1, streams, signs, step, dt, grid, inv_m, half_lam,
               osmotic, memory):
    """Dispatch to the 1D or 2D loop; ``q`` and ``memory`` are updated in place.

    ``streams`` holds the per-trajectory (and per-particle) stream states;
    the sign used for the step is drawn from them at counter ``step``.
    With an empty ``streams`` the signs are taken from ``signs``.
    """
    periodic = bool(grid.periodic)
    off = float(grid.offset)
    osmotic = bool(osmotic)
    if grid.dims == 1:
        return int(heun_steps_1d(q, stack0, valid0, stack1, valid1, streams, signs, int(step), float(dt),
                                 grid.shape[0], float(grid.lower[0]), float(grid.upper[0]),
                                 float(grid.spacing[0]), off, periodic, float(inv_m[0]),
                                 float(half_lam), osmotic, memory))
    return int(heun_steps_2d(q, stack0, valid0, stack1, valid1, streams, signs, int(step), float(dt),
                             grid.shape[0], grid.shape[1], float(grid.lower[0]),
                             float(grid.lower[1]), float(grid.upper[0]), float(grid.upper[1]),
                             float(grid.spacing[0]), float(grid.spacing[1]), off, periodic,
                             float(inv_m[0]), float(inv_m[1]), float(half_lam), osmotic, memory))
