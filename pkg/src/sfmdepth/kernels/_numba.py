"""Numba-jitted kernels. Semantics mirror ``_numpy.py``."""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _bilinear_one(grid, u, v, H, W):
    if u < 0.0 or u > W - 1.0 or v < 0.0 or v > H - 1.0:
        return 0.0, False, 0.0
    uc = min(max(u, 0.0), W - 1.0)
    vc = min(max(v, 0.0), H - 1.0)
    x0 = min(int(math.floor(uc)), W - 2)
    y0 = min(int(math.floor(vc)), H - 2)
    wx = uc - x0
    wy = vc - y0
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    val = (1.0 - wy) * ((1.0 - wx) * g00 + wx * g01) + wy * ((1.0 - wx) * g10 + wx * g11)
    nmin = min(min(g00, g01), min(g10, g11))
    return val, True, nmin


@njit(cache=True, parallel=True)
def bilinear_forward(grid, u, v):
    H, W = grid.shape
    n = u.shape[0]
    out = np.zeros(n, dtype=np.float64)
    inb = np.zeros(n, dtype=np.bool_)
    nmin = np.zeros(n, dtype=np.float64)
    for i in prange(n):
        val, ok, mn = _bilinear_one(grid, u[i], v[i], H, W)
        out[i] = val
        inb[i] = ok
        nmin[i] = mn
    return out, inb, nmin


@njit(cache=True)
def bilinear_backward(grid, u, v, dout):
    H, W = grid.shape
    n = u.shape[0]
    dgrid = np.zeros((H, W), dtype=np.float64)
    du = np.zeros(n, dtype=np.float64)
    dv = np.zeros(n, dtype=np.float64)
    for i in range(n):
        ui = u[i]
        vi = v[i]
        if ui < 0.0 or ui > W - 1.0 or vi < 0.0 or vi > H - 1.0:
            continue
        uc = min(max(ui, 0.0), W - 1.0)
        vc = min(max(vi, 0.0), H - 1.0)
        x0 = min(int(math.floor(uc)), W - 2)
        y0 = min(int(math.floor(vc)), H - 2)
        wx = uc - x0
        wy = vc - y0
        g = dout[i]
        dgrid[y0, x0] += g * (1.0 - wy) * (1.0 - wx)
        dgrid[y0, x0 + 1] += g * (1.0 - wy) * wx
        dgrid[y0 + 1, x0] += g * wy * (1.0 - wx)
        dgrid[y0 + 1, x0 + 1] += g * wy * wx
        g00 = grid[y0, x0]
        g01 = grid[y0, x0 + 1]
        g10 = grid[y0 + 1, x0]
        g11 = grid[y0 + 1, x0 + 1]
        du[i] = g * ((1.0 - wy) * (g01 - g00) + wy * (g11 - g10))
        dv[i] = g * ((1.0 - wx) * (g10 - g00) + wx * (g11 - g01))
    return dgrid, du, dv


@njit(cache=True)
def _ox_range(j, pad, stride, W, Wo):
    # output columns whose input column ox*stride + j - pad lands in [0, W)
    lo = 0
    off = j - pad
    if off < 0:
        lo = (-off + stride - 1) // stride
    hi = Wo
    top = (W - 1 - off) // stride + 1
    if top < hi:
        hi = top
    if hi < lo:
        hi = lo
    return lo, hi


@njit(cache=True, parallel=True)
def im2col_out(x, kh, kw, stride, pad, cols):
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    for b in prange(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    lo, hi = _ox_range(j, pad, stride, W, Wo)
                    x0 = lo * stride + j - pad
                    x1 = (hi - 1) * stride + j - pad + 1
                    for oy in range(Ho):
                        iy = oy * stride + i - pad
                        base = oy * Wo
                        if iy < 0 or iy >= H:
                            cols[b, row, base:base + Wo] = 0.0
                            continue
                        if lo > 0:
                            cols[b, row, base:base + lo] = 0.0
                        if hi < Wo:
                            cols[b, row, base + hi:base + Wo] = 0.0
                        if hi > lo:
                            cols[b, row, base + lo:base + hi] = \
                                x[b, c, iy, x0:x1:stride]
    return cols


def im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((B, C * kh * kw, Ho * Wo), dtype=x.dtype)
    return im2col_out(x, kh, kw, stride, pad, cols)


@njit(cache=True, parallel=True)
def col2im_out(cols, B, C, H, W, kh, kw, stride, pad, x):
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    for b in prange(B):
        x[b] = 0.0
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    lo, hi = _ox_range(j, pad, stride, W, Wo)
                    if hi <= lo:
                        continue
                    x0 = lo * stride + j - pad
                    x1 = (hi - 1) * stride + j - pad + 1
                    for oy in range(Ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        x[b, c, iy, x0:x1:stride] += \
                            cols[b, row, oy * Wo + lo:oy * Wo + hi]
    return x


def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    x = np.empty((B, C, H, W), dtype=cols.dtype)
    return col2im_out(cols, B, C, H, W, kh, kw, stride, pad, x)


@njit(cache=True)
def _sdf_one(px, py, pz, axis_par, tube_par, bumps):
    dx = px - axis_par[0] * math.sin(axis_par[1] * pz + axis_par[2])
    dy = py - axis_par[3] * math.sin(axis_par[4] * pz + axis_par[5])
    rho = math.sqrt(dx * dx + dy * dy)
    theta = math.atan2(dy, dx)
    r = tube_par[0]
    for m in range(bumps.shape[0]):
        r += bumps[m, 0] * math.cos(bumps[m, 1] * pz + bumps[m, 2] * theta + bumps[m, 3])
    f = r - rho
    f = min(f, pz - tube_par[1])
    f = min(f, tube_par[2] - pz)
    return f


@njit(cache=True, parallel=True)
def march_rays(origin, dirs, t_start, t_max, tol, max_steps, step_scale,
               axis_par, tube_par, bumps):
    n = dirs.shape[0]
    t_out = np.full(n, t_start, dtype=np.float64)
    hit = np.zeros(n, dtype=np.bool_)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in prange(n):
        dx_, dy_, dz_ = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t = t_start
        arrived = False
        for _ in range(max_steps):
            f = _sdf_one(ox + t * dx_, oy + t * dy_, oz + t * dz_,
                         axis_par, tube_par, bumps)
            if f < tol:
                arrived = True
                break
            t += step_scale * f
            if t > t_max:
                break
        if not arrived:
            t_out[i] = t
            continue
        # bracket the crossing, then bisect
        t_lo = t
        t_hi = t
        crossed = False
        probe = t
        for _ in range(256):
            probe += tol
            f = _sdf_one(ox + probe * dx_, oy + probe * dy_, oz + probe * dz_,
                         axis_par, tube_par, bumps)
            if f < 0.0:
                t_hi = probe
                crossed = True
                break
            t_lo = probe
        if crossed:
            for _ in range(60):
                mid = 0.5 * (t_lo + t_hi)
                f = _sdf_one(ox + mid * dx_, oy + mid * dy_, oz + mid * dz_,
                             axis_par, tube_par, bumps)
                if f > 0.0:
                    t_lo = mid
                else:
                    t_hi = mid
            t = 0.5 * (t_lo + t_hi)
        t_out[i] = t
        hit[i] = True
    return t_out, hit
