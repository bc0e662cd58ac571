"""Central finite-difference verification of every differentiable operation.

Analytic backward passes are compared against central differences with a
per-element step of ``step_scale * max(|x|, step_scale)``. Random instances
are rejection-sampled away from the measure-zero kinks (integer sample
coordinates, L1 zeros, validity-gate boundaries) where the true derivative
is undefined and a comparison would be meaningless.
"""

from dataclasses import dataclass

import numpy as np

from . import layers, losses
from .sfm_io import CameraIntrinsics, CameraPose, relative_transform

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-4


def finite_difference_gradient(f, x, step_scale=DEFAULT_STEP):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        h = step_scale * max(abs(flat[i]), step_scale)
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_gradient_error(analytic, numeric):
    """Max absolute gap normalized by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / scale)


# ---------------------------------------------------------------------------
# random instances


def small_intrinsics(height=8, width=10):
    return CameraIntrinsics(fx=8.0, fy=8.0, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_pose(rng, max_angle=0.6, max_shift=1.0):
    return CameraPose(random_rotation(rng, max_angle),
                      rng.uniform(-max_shift, max_shift, size=3))


@dataclass
class PairInstance:
    intrinsics: CameraIntrinsics
    rel_jk: object
    rel_kj: object
    pred_j: np.ndarray
    pred_k: np.ndarray
    sparse_j: np.ndarray
    sparse_k: np.ndarray
    mask_j: np.ndarray
    mask_k: np.ndarray
    sflow_jk: np.ndarray
    sflow_kj: np.ndarray


def _support(rng, shape, frac=0.3):
    m = rng.random(shape) < frac
    if not m.any():
        m.flat[rng.integers(m.size)] = True
    return m


def _coord_margins_ok(Uk, Vk, H, W, margin=2e-3, edge=5e-2):
    """Sample coordinates clear of bilinear kinks and validity boundaries.

    No coordinate may sit within ``edge`` of the open-interval bounds (where
    warp validity would flip under perturbation), and coordinates landing
    inside must keep ``margin`` away from integer grid lines (bilinear
    kinks).
    """
    for c, hi in ((Uk, W - 1.0), (Vk, H - 1.0)):
        if (np.abs(c) < edge).any() or (np.abs(c - hi) < edge).any():
            return False
    inside = (Uk > 0) & (Uk < W - 1.0) & (Vk > 0) & (Vk < H - 1.0)
    for c in (Uk[inside], Vk[inside]):
        if (np.abs(c - np.round(c)) < margin).any():
            return False
    return True


def make_pair_instance(rng, height=8, width=10, max_tries=200) -> PairInstance:
    """Random two-frame instance with every gate safely away from flipping."""
    intr = small_intrinsics(height, width)
    for _ in range(max_tries):
        pose_j = CameraPose(np.eye(3), np.zeros(3))
        pose_k = CameraPose(random_rotation(rng, 0.04),
                            rng.uniform(-0.04, 0.04, size=3))
        rel_jk = relative_transform(pose_j, pose_k)
        rel_kj = relative_transform(pose_k, pose_j)

        pred_j = rng.uniform(0.9, 1.5, size=(height, width))
        pred_k = rng.uniform(0.9, 1.5, size=(height, width))

        sup_j = _support(rng, (height, width))
        sup_k = _support(rng, (height, width))
        sparse_j = np.where(sup_j, pred_j * rng.uniform(0.95, 1.05, size=pred_j.shape), 0.0)
        sparse_k = np.where(sup_k, pred_k * rng.uniform(0.95, 1.05, size=pred_k.shape), 0.0)
        mask_j = np.where(sup_j, rng.uniform(0.3, 0.9, size=pred_j.shape), 0.0)
        mask_k = np.where(sup_k, rng.uniform(0.3, 0.9, size=pred_k.shape), 0.0)

        dm_j = layers.DepthMap(pred_j, None)
        dm_k = layers.DepthMap(pred_k, None)
        (ff_jk, Uk, Vk, valid_jk), _ = layers.flow_from_depth_forward(dm_j, rel_jk, intr)
        if not (valid_jk.all() and _coord_margins_ok(Uk, Vk, height, width)):
            continue
        (ff_kj, Uj, Vj, valid_kj), _ = layers.flow_from_depth_forward(dm_k, rel_kj, intr)
        if not (valid_kj.all() and _coord_margins_ok(Uj, Vj, height, width)):
            continue

        warp_j, wc_j = layers.warp_depth_forward(dm_j, dm_k, rel_jk, rel_kj, intr)
        warp_k, wc_k = layers.warp_depth_forward(dm_k, dm_j, rel_kj, rel_jk, intr)
        if warp_j.validity.sum() < 8 or warp_k.validity.sum() < 8:
            continue
        mn_j = wc_j["scache"]["grid"].min()
        mn_k = wc_k["scache"]["grid"].min()
        if mn_j < 0.1 or mn_k < 0.1:
            continue

        # keep the flow-loss residual clear of the L1 kink
        off = rng.uniform(2e-3, 8e-3, size=(height, width, 2))
        off *= np.where(rng.random(off.shape) < 0.5, -1.0, 1.0)
        sflow_jk = np.where(sup_j[:, :, None], ff_jk.values + off, 0.0)
        off = rng.uniform(2e-3, 8e-3, size=(height, width, 2))
        off *= np.where(rng.random(off.shape) < 0.5, -1.0, 1.0)
        sflow_kj = np.where(sup_k[:, :, None], ff_kj.values + off, 0.0)

        return PairInstance(intr, rel_jk, rel_kj, pred_j, pred_k,
                            sparse_j, sparse_k, mask_j, mask_k,
                            sflow_jk, sflow_kj)
    raise RuntimeError("could not build a kink-free random instance")


# ---------------------------------------------------------------------------
# per-operation checks, each returning the worst relative error seen


def check_scale_depth(rng, inst: PairInstance):
    w = rng.normal(size=inst.pred_j.shape)

    def f(x):
        out, _ = layers.scale_depth_forward(layers.DepthMap(x, None),
                                            inst.sparse_j, inst.mask_j)
        return float((w * out.values).sum())

    _, cache = layers.scale_depth_forward(layers.DepthMap(inst.pred_j, None),
                                          inst.sparse_j, inst.mask_j)
    ga = layers.scale_depth_backward(cache, w)
    gn = finite_difference_gradient(f, inst.pred_j.copy())
    return relative_gradient_error(ga, gn)


def check_flow_from_depth(rng, inst: PairInstance):
    w = rng.normal(size=(*inst.pred_j.shape, 2))

    def f(x):
        (ff, _, _, _), _ = layers.flow_from_depth_forward(
            layers.DepthMap(x, None), inst.rel_jk, inst.intrinsics)
        return float((w * ff.values).sum())

    _, cache = layers.flow_from_depth_forward(layers.DepthMap(inst.pred_j, None),
                                              inst.rel_jk, inst.intrinsics)
    ga = layers.flow_from_depth_backward(cache, w)
    gn = finite_difference_gradient(f, inst.pred_j.copy())
    return relative_gradient_error(ga, gn)


def check_warp_depth(rng, inst: PairInstance):
    out, cache = layers.warp_depth_forward(
        layers.DepthMap(inst.pred_j, None), layers.DepthMap(inst.pred_k, None),
        inst.rel_jk, inst.rel_kj, inst.intrinsics)
    w = rng.normal(size=out.values.shape) * out.validity

    def f_j(x):
        o, _ = layers.warp_depth_forward(
            layers.DepthMap(x, None), layers.DepthMap(inst.pred_k, None),
            inst.rel_jk, inst.rel_kj, inst.intrinsics)
        return float((w * o.values).sum())

    def f_k(x):
        o, _ = layers.warp_depth_forward(
            layers.DepthMap(inst.pred_j, None), layers.DepthMap(x, None),
            inst.rel_jk, inst.rel_kj, inst.intrinsics)
        return float((w * o.values).sum())

    ga_j, ga_k = layers.warp_depth_backward(cache, w)
    err_j = relative_gradient_error(ga_j, finite_difference_gradient(f_j, inst.pred_j.copy()))
    err_k = relative_gradient_error(ga_k, finite_difference_gradient(f_k, inst.pred_k.copy()))
    return max(err_j, err_k)


def check_bilinear(rng, height=8, width=10):
    grid = rng.uniform(0.5, 2.0, size=(height, width))
    # integer cell plus a fractional part well away from the interpolation kinks
    base = np.stack((rng.integers(0, width - 1, size=(height, width)),
                     rng.integers(0, height - 1, size=(height, width))),
                    axis=-1).astype(np.float64)
    coords = base + rng.uniform(0.2, 0.8, size=base.shape)
    (out, _, _), cache = layers.bilinear_sample_forward(grid, coords)
    w = rng.normal(size=out.shape)

    def f_grid(g):
        (o, _, _), _ = layers.bilinear_sample_forward(g, coords)
        return float((w * o).sum())

    def f_coords(c):
        (o, _, _), _ = layers.bilinear_sample_forward(grid, c)
        return float((w * o).sum())

    dgrid, dcoords = layers.bilinear_sample_backward(cache, w)
    err_g = relative_gradient_error(dgrid, finite_difference_gradient(f_grid, grid.copy()))
    err_c = relative_gradient_error(dcoords, finite_difference_gradient(f_coords, coords.copy()))
    return max(err_g, err_c)


def _pair_losses(inst: PairInstance, pred_j, pred_k, with_backward=False):
    """Full two-branch pipeline from raw predictions to (sfl, dcl)."""
    dj, cs_j = layers.scale_depth_forward(layers.DepthMap(pred_j, None),
                                          inst.sparse_j, inst.mask_j)
    dk, cs_k = layers.scale_depth_forward(layers.DepthMap(pred_k, None),
                                          inst.sparse_k, inst.mask_k)
    (ff_jk, _, _, _), cf_j = layers.flow_from_depth_forward(dj, inst.rel_jk, inst.intrinsics)
    (ff_kj, _, _, _), cf_k = layers.flow_from_depth_forward(dk, inst.rel_kj, inst.intrinsics)
    wj, cw_j = layers.warp_depth_forward(dj, dk, inst.rel_jk, inst.rel_kj, inst.intrinsics)
    wk, cw_k = layers.warp_depth_forward(dk, dj, inst.rel_kj, inst.rel_jk, inst.intrinsics)

    sfl, c_sfl = losses.sparse_flow_loss_forward(ff_jk, ff_kj, inst.sflow_jk,
                                                 inst.sflow_kj, inst.mask_j, inst.mask_k)
    dcl, c_dcl = losses.depth_consistency_loss_forward(dj, dk, wj, wk,
                                                       wj.validity, wk.validity)
    if not with_backward:
        return sfl, dcl

    def backward(d_sfl, d_dcl):
        dF_jk, dF_kj = losses.sparse_flow_loss_backward(c_sfl, d_sfl)
        dZj, dZk, dZkj, dZjk = losses.depth_consistency_loss_backward(c_dcl, d_dcl)
        dZj = dZj + layers.flow_from_depth_backward(cf_j, dF_jk)
        dZk = dZk + layers.flow_from_depth_backward(cf_k, dF_kj)
        gj, gk = layers.warp_depth_backward(cw_j, dZkj)
        dZj = dZj + gj
        dZk = dZk + gk
        gk, gj = layers.warp_depth_backward(cw_k, dZjk)
        dZj = dZj + gj
        dZk = dZk + gk
        dpred_j = layers.scale_depth_backward(cs_j, dZj)
        dpred_k = layers.scale_depth_backward(cs_k, dZk)
        return dpred_j, dpred_k

    return sfl, dcl, backward


def check_sparse_flow_loss(rng, inst: PairInstance):
    dj = layers.DepthMap(inst.pred_j, None)
    dk = layers.DepthMap(inst.pred_k, None)
    (ff_jk, _, _, _), _ = layers.flow_from_depth_forward(dj, inst.rel_jk, inst.intrinsics)
    (ff_kj, _, _, _), _ = layers.flow_from_depth_forward(dk, inst.rel_kj, inst.intrinsics)

    def f(x):
        val, _ = losses.sparse_flow_loss_forward(
            x[0], x[1], inst.sflow_jk, inst.sflow_kj, inst.mask_j, inst.mask_k)
        return val

    x0 = np.stack((ff_jk.values, ff_kj.values))
    _, cache = losses.sparse_flow_loss_forward(ff_jk, ff_kj, inst.sflow_jk,
                                               inst.sflow_kj, inst.mask_j, inst.mask_k)
    ga = np.stack(losses.sparse_flow_loss_backward(cache))
    gn = finite_difference_gradient(f, x0.copy(), step_scale=2e-5)
    return relative_gradient_error(ga, gn)


def check_depth_consistency_loss(rng, inst: PairInstance):
    dj = layers.DepthMap(inst.pred_j, None)
    dk = layers.DepthMap(inst.pred_k, None)
    wj, _ = layers.warp_depth_forward(dj, dk, inst.rel_jk, inst.rel_kj, inst.intrinsics)
    wk, _ = layers.warp_depth_forward(dk, dj, inst.rel_kj, inst.rel_jk, inst.intrinsics)

    def f(x):
        val, _ = losses.depth_consistency_loss_forward(
            x[0], x[1], x[2], x[3], wj.validity, wk.validity)
        return val

    x0 = np.stack((inst.pred_j, inst.pred_k, wj.values, wk.values))
    _, cache = losses.depth_consistency_loss_forward(dj, dk, wj, wk,
                                                     wj.validity, wk.validity)
    ga = np.stack(losses.depth_consistency_loss_backward(cache))
    gn = finite_difference_gradient(f, x0.copy())
    return relative_gradient_error(ga, gn)


def check_composed_losses(rng, inst: PairInstance):
    """Both losses end-to-end through scaling, flow, and warping layers."""
    l1 = rng.uniform(0.5, 2.0)
    l2 = rng.uniform(0.5, 2.0)

    def f(x):
        sfl, dcl = _pair_losses(inst, x[0], x[1])
        return l1 * sfl + l2 * dcl

    _, _, backward = _pair_losses(inst, inst.pred_j, inst.pred_k, with_backward=True)
    ga = np.stack(backward(l1, l2))
    x0 = np.stack((inst.pred_j, inst.pred_k))
    gn = finite_difference_gradient(f, x0.copy())
    return relative_gradient_error(ga, gn)


# ---------------------------------------------------------------------------
# suite


@dataclass
class CheckResult:
    name: str
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance


CHECKS = [
    ("scale_depth", check_scale_depth, True),
    ("flow_from_depth", check_flow_from_depth, True),
    ("warp_depth", check_warp_depth, True),
    ("bilinear_sample", lambda rng, inst: check_bilinear(rng), True),
    ("sparse_flow_loss", check_sparse_flow_loss, True),
    ("depth_consistency_loss", check_depth_consistency_loss, True),
    ("losses_through_layers", check_composed_losses, True),
]


def run_suite(instances=50, seed=0, tol=DEFAULT_TOL, height=8, width=10,
              progress=None):
    """Run every gradient check on fresh random instances."""
    results = []
    for name, fn, needs_inst in CHECKS:
        rng = np.random.default_rng([seed, hash(name) % (2 ** 32)])
        worst = 0.0
        for _ in range(instances):
            inst = make_pair_instance(rng, height, width) if needs_inst else None
            worst = max(worst, fn(rng, inst))
        results.append(CheckResult(name, worst, tol))
        if progress:
            progress(results[-1])
    return results
