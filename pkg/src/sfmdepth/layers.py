"""Differentiable geometric layers.

Each operation comes as a ``*_forward`` returning ``(outputs, cache)`` and a
matching ``*_backward`` that maps output gradients to input gradients.
Gradients flow only into dense depth inputs; poses and intrinsics are fixed
supervision, and validity masks act as constant gates.

Coordinate conventions: a pixel grid location is (u, v) with u indexing
columns, v rows. For a relative transform with rotation R and translation t
(p_tgt = R p_src + t) the pixel-space maps are built from A = K R K^-1 and
b = K t: a source pixel at depth z lands on

    u' = (a_u + b0 / z) / (a_d + b2 / z),   a_u = A00 u + A01 v + A02, ...

This z-normalized form equals the usual homogeneous one but keeps the
identity transform exactly fixed-point (A = I, b = 0 yields u' == u with no
rounding), which the invariant tests rely on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import PairSkip
from .kernels import bilinear_backward, bilinear_forward

DEPTH_FLOOR = 1e-8
DEN_TOL = 1e-12


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W)
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.validity is None:
            self.validity = np.ones(self.values.shape, dtype=bool)
        self.validity = np.asarray(self.validity, dtype=bool)


@dataclass
class FlowField:
    values: np.ndarray  # (H, W, 2)
    source: int | None = None
    target: int | None = None


def pixel_grid(height, width):
    """Meshgrid of pixel coordinates: U holds column indices, V row indices."""
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    return np.tile(u, (height, 1)), np.tile(v[:, None], (1, width))


def pixel_maps(intrinsics, rel):
    """(A, b) with A = K R K^-1 and b = K t for a relative transform."""
    K = intrinsics.matrix()
    A = K @ (rel.rotation @ intrinsics.inverse_matrix())
    b = K @ rel.translation
    return A, b


# ---------------------------------------------------------------------------
# depth scaling


def scale_depth_forward(prediction: DepthMap, sparse, mask, epsilon: float = DEPTH_FLOOR):
    """Rescale a prediction onto the reconstruction's depth scale.

    The factor is the soft-mask-weighted mean of sparse/predicted depth
    ratios; gradients flow through the prediction both inside the factor and
    in the product.
    """
    M = np.asarray(mask.values if hasattr(mask, "values") else mask, dtype=np.float64)
    Zs = np.asarray(sparse.values if hasattr(sparse, "values") else sparse, dtype=np.float64)
    Zp = prediction.values
    mass = M.sum()
    if not mass > 0:
        raise PairSkip("empty soft mask: no sparse supervision on this frame")
    denom = Zp + epsilon
    ratio = Zs / denom
    s = float((M * ratio).sum() / mass)
    out = DepthMap(s * Zp, prediction.validity)
    cache = {"M": M, "Zs": Zs, "Zp": Zp, "denom": denom, "s": s, "mass": mass}
    return out, cache


def scale_depth_backward(cache, d_out):
    """d_out: gradient wrt the scaled map; returns gradient wrt the prediction."""
    M, Zs, Zp = cache["M"], cache["Zs"], cache["Zp"]
    ds = float((d_out * Zp).sum())
    ds_dZp = -(M * Zs / cache["denom"] ** 2) / cache["mass"]
    return cache["s"] * d_out + ds * ds_dZp


# ---------------------------------------------------------------------------
# target-coordinate map (shared by flow and warping)


def _coords_forward(Z: DepthMap, rel, intrinsics):
    H, W = Z.values.shape
    A, b = pixel_maps(intrinsics, rel)
    U, V = pixel_grid(H, W)
    a_u = A[0, 0] * U + A[0, 1] * V + A[0, 2]
    a_v = A[1, 0] * U + A[1, 1] * V + A[1, 2]
    a_d = A[2, 0] * U + A[2, 1] * V + A[2, 2]

    pos = Z.values > DEPTH_FLOOR
    Zc = np.maximum(Z.values, DEPTH_FLOOR)
    iz = 1.0 / Zc
    nu = a_u + b[0] * iz
    nv = a_v + b[1] * iz
    dd = a_d + b[2] * iz
    den_ok = np.abs(Zc * dd) >= DEN_TOL
    safe = np.where(den_ok, dd, 1.0)
    Uk = nu / safe
    Vk = nv / safe
    valid = Z.validity & pos & den_ok
    cache = {"b": b, "nu": nu, "nv": nv, "dd": safe, "iz": iz, "Zc": Zc,
             "gate": pos & den_ok, "U": U, "V": V, "shape": (H, W)}
    return Uk, Vk, valid, cache


def _coords_backward(cache, dUk, dVk):
    b = cache["b"]
    dd = cache["dd"]
    iz = cache["iz"]
    # d(u')/d(1/z) and d(v')/d(1/z) by the quotient rule
    du_diz = (b[0] * dd - cache["nu"] * b[2]) / dd ** 2
    dv_diz = (b[1] * dd - cache["nv"] * b[2]) / dd ** 2
    d_iz = dUk * du_diz + dVk * dv_diz
    dZ = np.where(cache["gate"], -d_iz * iz * iz, 0.0)
    return dZ


# ---------------------------------------------------------------------------
# flow from depth


def flow_from_depth_forward(Z: DepthMap, rel, intrinsics):
    """Dense displacement field induced by a viewpoint change.

    Returns ((flow, U_k, V_k, validity), cache). Flow channels are
    normalized by image width / height. Pixels with non-positive depth or a
    vanishing projective denominator are flagged invalid, never raised.
    """
    Uk, Vk, valid, cache = _coords_forward(Z, rel, intrinsics)
    H, W = cache["shape"]
    flow = np.stack(((Uk - cache["U"]) / W, (Vk - cache["V"]) / H), axis=-1)
    ff = FlowField(flow, getattr(rel, "source", None), getattr(rel, "target", None))
    return (ff, Uk, Vk, valid), cache


def flow_from_depth_backward(cache, d_flow):
    H, W = cache["shape"]
    return _coords_backward(cache, d_flow[:, :, 0] / W, d_flow[:, :, 1] / H)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample_forward(grid, coords):
    """Sample ``grid`` (H,W) at ``coords`` (H,W,2) holding (u, v) locations.

    Out-of-bounds samples return 0 with mask False. Returns
    ((values, mask), cache); differentiable wrt grid and coordinates.
    """
    grid = np.asarray(grid, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    sh = coords.shape[:-1]
    u = np.ascontiguousarray(coords[..., 0].ravel())
    v = np.ascontiguousarray(coords[..., 1].ravel())
    out, inb, nmin = bilinear_forward(grid, u, v)
    cache = {"grid": grid, "u": u, "v": v, "shape": sh}
    return (out.reshape(sh), inb.reshape(sh), nmin.reshape(sh)), cache


def bilinear_sample_backward(cache, d_out):
    d = np.ascontiguousarray(np.asarray(d_out, dtype=np.float64).ravel())
    dgrid, du, dv = bilinear_backward(cache["grid"], cache["u"], cache["v"], d)
    sh = cache["shape"]
    dcoords = np.stack((du.reshape(sh), dv.reshape(sh)), axis=-1)
    return dgrid, dcoords


# ---------------------------------------------------------------------------
# depth warping


def warp_depth_forward(Z_j: DepthMap, Z_k: DepthMap, rel_jk, rel_kj, intrinsics):
    """View frame k's depth prediction from frame j's viewpoint.

    Frame k depths are first re-expressed as depths along frame j's optical
    axis (third row of the pixel-space map of ``rel_kj``), then resampled at
    the target coordinates induced by ``Z_j`` and ``rel_jk``. Validity needs
    a strictly interior sample, four positive re-expressed neighbors, and a
    valid source pixel. Returns ((warped DepthMap), cache).
    """
    H, W = Z_j.values.shape
    C, d = pixel_maps(intrinsics, rel_kj)
    U, V = pixel_grid(H, W)
    c_row = C[2, 0] * U + C[2, 1] * V + C[2, 2]

    pos_k = Z_k.values > DEPTH_FLOOR
    Zk_c = np.maximum(Z_k.values, DEPTH_FLOOR)
    Zt = Zk_c * c_row + d[2]

    Uk, Vk, valid_j, ccache = _coords_forward(Z_j, rel_jk, intrinsics)
    (sampled, _, nmin), scache = bilinear_sample_forward(Zt, np.stack((Uk, Vk), axis=-1))

    inside = (Uk > 0.0) & (Uk < W - 1.0) & (Vk > 0.0) & (Vk < H - 1.0)
    validity = valid_j & inside & (nmin > 0.0)
    out = DepthMap(sampled, validity)
    cache = {"c_row": c_row, "pos_k": pos_k, "ccache": ccache, "scache": scache}
    return out, cache


def warp_depth_backward(cache, d_out):
    """Returns (dZ_j, dZ_k): coordinate-path and value-path gradients."""
    dZt, dcoords = bilinear_sample_backward(cache["scache"], d_out)
    dZ_k = np.where(cache["pos_k"], dZt * cache["c_row"], 0.0)
    dZ_j = _coords_backward(cache["ccache"], dcoords[:, :, 0], dcoords[:, :, 1])
    return dZ_j, dZ_k
