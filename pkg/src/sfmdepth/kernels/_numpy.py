"""Pure-numpy implementations of the hot kernels.

Reference semantics for the numba variants in ``_numba.py``; the two
backends must agree to float tolerance (covered by the kernel tests).
"""

import numpy as np


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_forward(grid, u, v):
    """Sample ``grid`` (H,W) at fractional pixel coords ``u``, ``v`` (flat).

    Returns (values, inbounds, neighbor_min). Out-of-bounds samples yield
    value 0, inbounds False and neighbor_min 0. Bounds are inclusive:
    u in [0, W-1], v in [0, H-1].
    """
    H, W = grid.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inb = (u >= 0.0) & (u <= W - 1.0) & (v >= 0.0) & (v <= H - 1.0)

    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    wx = uc - x0
    wy = vc - y0

    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]

    out = (1.0 - wy) * ((1.0 - wx) * g00 + wx * g01) + wy * ((1.0 - wx) * g10 + wx * g11)
    nmin = np.minimum(np.minimum(g00, g01), np.minimum(g10, g11))
    out = np.where(inb, out, 0.0)
    nmin = np.where(inb, nmin, 0.0)
    return out, inb, nmin


def bilinear_backward(grid, u, v, dout):
    """Gradients of bilinear_forward w.r.t. grid values and coordinates."""
    H, W = grid.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inb = (u >= 0.0) & (u <= W - 1.0) & (v >= 0.0) & (v <= H - 1.0)
    g = np.where(inb, dout, 0.0)

    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    wx = uc - x0
    wy = vc - y0

    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]

    dgrid = np.zeros_like(grid)
    np.add.at(dgrid, (y0, x0), g * (1.0 - wy) * (1.0 - wx))
    np.add.at(dgrid, (y0, x0 + 1), g * (1.0 - wy) * wx)
    np.add.at(dgrid, (y0 + 1, x0), g * wy * (1.0 - wx))
    np.add.at(dgrid, (y0 + 1, x0 + 1), g * wy * wx)

    du = g * ((1.0 - wy) * (g01 - g00) + wy * (g11 - g10))
    dv = g * ((1.0 - wx) * (g10 - g00) + wx * (g11 - g01))
    return dgrid, du, dv


# ---------------------------------------------------------------------------
# convolution patch extraction


def im2col_out(x, kh, kw, stride, pad, cols):
    """im2col writing into a preallocated (B, C*kh*kw, Ho*Wo) buffer."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad > 0:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, kh, kw, Ho, Wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    out6 = cols.reshape(B, C, kh, kw, Ho, Wo)
    np.copyto(out6, view)
    return cols


def im2col(x, kh, kw, stride, pad):
    """(B,C,H,W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((B, C * kh * kw, Ho * Wo), dtype=x.dtype)
    return im2col_out(x, kh, kw, stride, pad, cols)


def col2im_out(cols, B, C, H, W, kh, kw, stride, pad, x):
    """Adjoint of im2col writing into a preallocated (B,C,H,W) buffer."""
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(B, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += cols6[:, :, i, j]
    if pad > 0:
        np.copyto(x, xp[:, :, pad:pad + H, pad:pad + W])
    else:
        np.copyto(x, xp)
    return x


def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patches back onto (B,C,H,W)."""
    x = np.empty((B, C, H, W), dtype=cols.dtype)
    return col2im_out(cols, B, C, H, W, kh, kw, stride, pad, x)


# ---------------------------------------------------------------------------
# signed distance for the tube cavity and sphere tracing

# axis_par layout: [amp_x, freq_x, phase_x, amp_y, freq_y, phase_y]
# tube_par layout: [r0, z_lo, z_hi]
# bumps: (M,4) rows [amp, freq_z, freq_theta, phase]; freq_theta integral for
#   continuity across theta = +-pi.


def sdf_points(pts, axis_par, tube_par, bumps):
    """Inside-positive distance estimate to the cavity wall, vectorized."""
    px, py, pz = pts[..., 0], pts[..., 1], pts[..., 2]
    ax, bx, cx = axis_par[0], axis_par[1], axis_par[2]
    ay, by, cy = axis_par[3], axis_par[4], axis_par[5]
    r0, z_lo, z_hi = tube_par[0], tube_par[1], tube_par[2]

    dx = px - ax * np.sin(bx * pz + cx)
    dy = py - ay * np.sin(by * pz + cy)
    rho = np.sqrt(dx * dx + dy * dy)
    theta = np.arctan2(dy, dx)

    r = np.full_like(rho, r0)
    for m in range(bumps.shape[0]):
        amp, fz, ft, ph = bumps[m]
        r = r + amp * np.cos(fz * pz + ft * theta + ph)

    f = r - rho
    f = np.minimum(f, pz - z_lo)
    f = np.minimum(f, z_hi - pz)
    return f


def march_rays(origin, dirs, t_start, t_max, tol, max_steps, step_scale,
               axis_par, tube_par, bumps):
    """Sphere-trace unit rays from ``origin`` until the wall is hit.

    Returns (t, hit). Steps are scaled by ``step_scale`` (< 1) because the
    tube distance field is only an estimate; hits are refined by bracketing
    and bisection so the surface error is far below ``tol`` where the
    crossing is transversal.
    """
    n = dirs.shape[0]
    t = np.full(n, t_start, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    for _ in range(max_steps):
        if not active.any():
            break
        p = origin[None, :] + t[active, None] * dirs[active]
        f = sdf_points(p, axis_par, tube_par, bumps)
        arrived = f < tol
        idx = np.nonzero(active)[0]
        hit[idx[arrived]] = True
        t[idx] += np.where(arrived, 0.0, step_scale * f)
        overshoot = t[idx] > t_max
        active[idx[arrived]] = False
        active[idx[overshoot]] = False

    # bracket the zero crossing, then bisect
    if hit.any():
        h = np.nonzero(hit)[0]
        t_lo = t[h].copy()
        t_hi = t_lo.copy()
        crossed = np.zeros(len(h), dtype=bool)
        probe = t_lo.copy()
        for _ in range(256):
            probe = probe + tol
            p = origin[None, :] + probe[:, None] * dirs[h]
            f = sdf_points(p, axis_par, tube_par, bumps)
            newly = (~crossed) & (f < 0.0)
            t_hi[newly] = probe[newly]
            t_lo[(~crossed) & (f >= 0.0)] = probe[(~crossed) & (f >= 0.0)]
            crossed |= newly
            if crossed.all():
                break
        for _ in range(60):
            mid = 0.5 * (t_lo + t_hi)
            p = origin[None, :] + mid[:, None] * dirs[h]
            f = sdf_points(p, axis_par, tube_par, bumps)
            pos = f > 0.0
            t_lo = np.where(crossed & pos, mid, t_lo)
            t_hi = np.where(crossed & pos, t_hi, np.where(crossed, mid, t_hi))
        t[h] = np.where(crossed, 0.5 * (t_lo + t_hi), t[h])
    return t, hit
