"""Two-branch training loop, photometric augmentation, and evaluation.

Both frames of a sampled pair go through the same network (shared weights,
stacked into one batch); the geometric losses couple the two predictions.
All randomness is derived statelessly from (seed, epoch, step, ...), so
resuming from an epoch checkpoint reproduces an uninterrupted run bit for
bit, and two serial runs with one seed are byte-identical.
"""

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import layers, losses
from .config import AugmentConfig, TrainConfig
from .errors import DataError, NumericalError, PairSkip
from .layers import DepthMap
from .nnet import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .sfm_io import parse_reconstruction, relative_transform_between
from .sparse_maps import DatasetManifest


# ---------------------------------------------------------------------------
# pair sampling


def sample_pairs(frame_ids, gap_range, count, seed):
    """Ordered frame pairs with |k - j| uniform over the admissible gaps.

    The gap is drawn first (uniformly), then a direction, then a uniform
    source frame among those admitting the pair; gaps with no admissible
    frame are excluded up front.
    """
    gap_min, gap_max = gap_range
    ids = sorted(frame_ids)
    idset = set(ids)
    rng = np.random.default_rng(seed)

    usable = [g for g in range(gap_min, gap_max + 1)
              if any(j + g in idset for j in ids)]
    if not usable:
        raise DataError(
            f"no frame pair admits a gap in [{gap_min}, {gap_max}]")
    sources = {g: [j for j in ids if j + g in idset] for g in usable}

    pairs = []
    for _ in range(count):
        g = usable[rng.integers(len(usable))]
        j = sources[g][rng.integers(len(sources[g]))]
        if rng.random() < 0.5:
            pairs.append((j, j + g))
        else:
            pairs.append((j + g, j))
    return pairs


# ---------------------------------------------------------------------------
# photometric augmentation (geometry is never touched)


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    m = img.mean()
    return np.clip((img - m) * factor + m, 0.0, 1.0)


def adjust_gamma(img, gamma):
    return np.clip(img, 0.0, 1.0) ** gamma


def shift_hsv(img, dh, ds):
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def gaussian_blur(img, sigma):
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.gaussian_filter(img[:, :, c], sigma, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def motion_blur(img, length, angle):
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for i in range(length * 4):
        t = i / (length * 4 - 1) - 0.5
        x = int(round(c + t * (length - 1) * math.cos(angle)))
        y = int(round(c + t * (length - 1) * math.sin(angle)))
        k[y, x] = 1.0
    k /= k.sum()
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = ndimage.convolve(img[:, :, ch], k, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def jpeg_roundtrip(img, quality):
    from PIL import Image

    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return out


def add_noise(img, sigma, rng):
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def augment(image, seed, config: AugmentConfig | None = None):
    """Seeded random photometric corruption; pixel positions never move."""
    cfg = config or AugmentConfig()
    img = np.asarray(image, dtype=np.float64)
    if not cfg.enabled:
        return img.copy()
    rng = np.random.default_rng(seed)

    # draw every decision regardless of toggles so one switch does not
    # reshuffle the rest
    draws = {
        "brightness": (rng.random() < 0.5, rng.uniform(0.7, 1.3)),
        "contrast": (rng.random() < 0.5, rng.uniform(0.7, 1.3)),
        "gamma": (rng.random() < 0.5, rng.uniform(0.7, 1.4)),
        "hsv": (rng.random() < 0.5, (rng.uniform(-0.05, 0.05), rng.uniform(0.8, 1.2))),
        "gaussian_blur": (rng.random() < 0.3, rng.uniform(0.3, 1.2)),
        "motion_blur": (rng.random() < 0.3, (int(rng.choice([3, 5, 7])), rng.uniform(0, math.pi))),
        "jpeg": (rng.random() < 0.3, int(rng.integers(40, 91))),
        "noise": (rng.random() < 0.5, rng.uniform(0.005, 0.02)),
    }
    if cfg.brightness and draws["brightness"][0]:
        img = adjust_brightness(img, draws["brightness"][1])
    if cfg.contrast and draws["contrast"][0]:
        img = adjust_contrast(img, draws["contrast"][1])
    if cfg.gamma and draws["gamma"][0]:
        img = adjust_gamma(img, draws["gamma"][1])
    if cfg.hsv and draws["hsv"][0]:
        img = shift_hsv(img, *draws["hsv"][1])
    if cfg.gaussian_blur and draws["gaussian_blur"][0]:
        img = gaussian_blur(img, draws["gaussian_blur"][1])
    if cfg.motion_blur and draws["motion_blur"][0]:
        img = motion_blur(img, *draws["motion_blur"][1])
    if cfg.jpeg and draws["jpeg"][0]:
        img = jpeg_roundtrip(img, draws["jpeg"][1])
    if cfg.noise and draws["noise"][0]:
        img = add_noise(img, draws["noise"][1], rng)
    return img


# ---------------------------------------------------------------------------
# optimizer and schedule


class SgdMomentum:
    def __init__(self, params, momentum, weight_decay=0.0, grad_clip=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        scale = 1.0
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                 for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for k, p in params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += scale * grads[k]
            if self.weight_decay > 0:
                v += self.weight_decay * p
            p -= (lr * v).astype(p.dtype)


def cyclical_lr(global_step, steps_per_cycle, lr_min, lr_max):
    """Triangular wave: lr_min up to lr_max and back, linear in both legs."""
    phase = (global_step % steps_per_cycle) / steps_per_cycle
    return lr_min + (lr_max - lr_min) * (1.0 - abs(2.0 * phase - 1.0))


# ---------------------------------------------------------------------------
# the pair objective (forward + backward through the geometric stack)


def pair_objective(pred_j: DepthMap, pred_k: DepthMap, bundle, weights, epoch):
    """Losses and prediction gradients for one frame pair.

    ``bundle`` carries the pair's supervision: sparse depth/mask for both
    frames, sparse flows both ways, and the two relative transforms.
    Raises PairSkip when the pair has no usable support.
    """
    intr = bundle["intrinsics"]
    dj, cs_j = layers.scale_depth_forward(pred_j, bundle["depth_j"], bundle["mask_j"])
    dk, cs_k = layers.scale_depth_forward(pred_k, bundle["depth_k"], bundle["mask_k"])
    (ff_jk, _, _, _), cf_j = layers.flow_from_depth_forward(dj, bundle["rel_jk"], intr)
    (ff_kj, _, _, _), cf_k = layers.flow_from_depth_forward(dk, bundle["rel_kj"], intr)
    wj, cw_j = layers.warp_depth_forward(dj, dk, bundle["rel_jk"], bundle["rel_kj"], intr)
    wk, cw_k = layers.warp_depth_forward(dk, dj, bundle["rel_kj"], bundle["rel_jk"], intr)

    sfl, c_sfl = losses.sparse_flow_loss_forward(
        ff_jk, ff_kj, bundle["flow_jk"], bundle["flow_kj"],
        bundle["mask_j"], bundle["mask_k"])
    dcl, c_dcl = losses.depth_consistency_loss_forward(
        dj, dk, wj, wk, wj.validity, wk.validity)

    lam2 = weights.lambda2_at(epoch)
    total = losses.total_loss(sfl, dcl, weights, epoch)

    dF_jk, dF_kj = losses.sparse_flow_loss_backward(c_sfl, weights.lambda1)
    dZj, dZk, dZkj, dZjk = losses.depth_consistency_loss_backward(c_dcl, lam2)
    dZj = dZj + layers.flow_from_depth_backward(cf_j, dF_jk)
    dZk = dZk + layers.flow_from_depth_backward(cf_k, dF_kj)
    gj, gk = layers.warp_depth_backward(cw_j, dZkj)
    dZj += gj
    dZk += gk
    gk, gj = layers.warp_depth_backward(cw_k, dZjk)
    dZj += gj
    dZk += gk
    d_pred_j = layers.scale_depth_backward(cs_j, dZj)
    d_pred_k = layers.scale_depth_backward(cs_k, dZk)
    return total, sfl, dcl, d_pred_j, d_pred_k


# ---------------------------------------------------------------------------
# training data access


class TrainingData:
    """Preloaded dataset: images, sparse maps, reconstruction, pair bundles."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.recon = parse_reconstruction(manifest.root)
        self.intrinsics = self.recon.intrinsics
        self.frame_ids = manifest.frame_ids
        self.images = {fid: manifest.image(fid) for fid in self.frame_ids}
        self.depths = {fid: manifest.depth(fid) for fid in self.frame_ids}
        self.masks = {fid: manifest.mask(fid) for fid in self.frame_ids}
        self._flows = {}

    def flow(self, j, k):
        from .sparse_maps import rasterize_flow

        key = (j, k)
        if key not in self._flows:
            self._flows[key] = rasterize_flow(self.recon, j, k).values
        return self._flows[key]

    def bundle(self, j, k):
        return {
            "intrinsics": self.intrinsics,
            "depth_j": self.depths[j],
            "depth_k": self.depths[k],
            "mask_j": self.masks[j],
            "mask_k": self.masks[k],
            "flow_jk": self.flow(j, k),
            "flow_kj": self.flow(k, j),
            "rel_jk": relative_transform_between(self.recon, j, k),
            "rel_kj": relative_transform_between(self.recon, k, j),
        }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    final_checkpoint: Path
    best_checkpoint: Path | None
    history: list


def _augment_seed(seed, epoch, step, slot, branch):
    return [seed, epoch, step, slot, branch]


def _batch_step(net, data: TrainingData, pairs, weights, epoch, step, lr,
                opt, aug_cfg, seed, crop, ws=None):
    imgs = []
    for slot, (j, k) in enumerate(pairs):
        imgs.append(augment(data.images[j], _augment_seed(seed, epoch, step, slot, 0), aug_cfg))
        imgs.append(augment(data.images[k], _augment_seed(seed, epoch, step, slot, 1), aug_cfg))
    x = net.standardize(np.stack(imgs))
    y, tape = net.forward(x, ws)

    d_y = np.zeros(y.shape, dtype=np.float64)
    sfl_sum = dcl_sum = total_sum = 0.0
    kept = 0
    for slot, (j, k) in enumerate(pairs):
        pred_j = DepthMap(np.asarray(y[2 * slot], dtype=np.float64), crop.copy())
        pred_k = DepthMap(np.asarray(y[2 * slot + 1], dtype=np.float64), crop.copy())
        try:
            total, sfl, dcl, dpj, dpk = pair_objective(
                pred_j, pred_k, data.bundle(j, k), weights, epoch)
        except PairSkip:
            continue
        if not math.isfinite(total):
            _dump_batch(net, pairs, y, epoch, step)
            raise NumericalError(
                f"non-finite loss at epoch {epoch} step {step} pair ({j},{k})")
        d_y[2 * slot] = dpj
        d_y[2 * slot + 1] = dpk
        sfl_sum += sfl
        dcl_sum += dcl
        total_sum += total
        kept += 1
    if kept == 0:
        return None
    d_y /= kept

    net.zero_grads()
    net.backward(tape, d_y, ws)
    opt.step(net.params, net.grads, lr)
    return {"sfl": sfl_sum / kept, "dcl": dcl_sum / kept,
            "total": total_sum / kept, "pairs": kept}


def _dump_batch(net, pairs, y, epoch, step):
    path = Path(f"nan_dump_epoch{epoch}_step{step}.npz")
    np.savez(path, predictions=y, pairs=np.array(pairs))


def validation_loss(net, data: TrainingData, weights, epoch, cfg: TrainConfig, crop):
    """Deterministic fixed-pair validation total loss (no augmentation)."""
    pairs = sample_pairs(data.frame_ids, (cfg.gap_min, cfg.gap_max),
                         max(8, len(data.frame_ids) // 4), seed=[cfg.seed, 0x7A11])
    total = 0.0
    kept = 0
    for j, k in pairs:
        x = net.standardize(np.stack([data.images[j], data.images[k]]))
        y, _ = net.forward(x)
        pj = DepthMap(np.asarray(y[0], dtype=np.float64), crop.copy())
        pk = DepthMap(np.asarray(y[1], dtype=np.float64), crop.copy())
        try:
            t, _, _, _, _ = pair_objective(pj, pk, data.bundle(j, k), weights, epoch)
        except PairSkip:
            continue
        total += t
        kept += 1
    return total / kept if kept else float("inf")


def train(manifest: DatasetManifest, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir, val_manifest: DatasetManifest | None = None,
          augment_cfg: AugmentConfig | None = None, resume=None,
          log_every: int = 1, quiet: bool = True) -> TrainResult:
    """Train the depth network on a sparse-supervision dataset.

    Writes per-epoch checkpoints (``epoch_NNNN.ckpt``), a line-delimited
    metrics log, and tracks the best validation checkpoint when a validation
    dataset is given. Resuming from an epoch checkpoint is bit-exact.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    val_log_path = out / "val_log.jsonl"
    aug_cfg = augment_cfg or AugmentConfig()

    data = TrainingData(manifest)
    val_data = TrainingData(val_manifest) if val_manifest is not None else None
    weights = cfg.weights()
    crop = model_cfg.validity_mask()

    if resume is not None:
        net, momentum, header = load_checkpoint(resume)
        if header["extra"].get("train_seed") != cfg.seed:
            raise DataError("checkpoint was written with a different training seed")
        opt = SgdMomentum(net.params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
        for k, v in momentum.items():
            opt.velocity[k][...] = v
        start_epoch = header["epoch"] + 1
        global_step = header["step"]
        best = header["extra"].get("best_val")
        history = header["extra"].get("history", [])
        mode = "a"
    else:
        net = build_model(model_cfg)
        net.input_mean = np.asarray(manifest.image_mean, dtype=np.float64)
        net.input_std = np.asarray(manifest.image_std, dtype=np.float64)
        opt = SgdMomentum(net.params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
        start_epoch = 1
        global_step = 0
        best = None
        history = []
        mode = "w"

    pairs_per_epoch = len(data.frame_ids)
    steps_per_epoch = math.ceil(pairs_per_epoch / cfg.batch_size)
    steps_per_cycle = max(1, cfg.lr_cycle_epochs * steps_per_epoch)
    best_path = out / "best.ckpt"
    from .nnet import Workspace

    ws = Workspace()

    log = open(log_path, mode, encoding="utf-8")
    val_log = open(val_log_path, mode, encoding="utf-8") if val_data else None
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            pairs = sample_pairs(data.frame_ids, (cfg.gap_min, cfg.gap_max),
                                 pairs_per_epoch, seed=[cfg.seed, epoch])
            epoch_total = 0.0
            epoch_steps = 0
            for s in range(steps_per_epoch):
                batch = pairs[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                lr = cyclical_lr(global_step, steps_per_cycle, cfg.lr_min, cfg.lr_max)
                rec = _batch_step(net, data, batch, weights, epoch, s, lr,
                                  opt, aug_cfg, cfg.seed, crop, ws)
                global_step += 1
                if rec is None:
                    continue
                epoch_total += rec["total"]
                epoch_steps += 1
                if s % log_every == 0:
                    log.write(json.dumps({
                        "epoch": epoch, "step": global_step,
                        "sfl": rec["sfl"], "dcl": rec["dcl"],
                        "total": rec["total"], "lr": lr}, sort_keys=True) + "\n")
            log.flush()

            entry = {"epoch": epoch,
                     "train_total": epoch_total / max(epoch_steps, 1)}
            if val_data is not None:
                vloss = validation_loss(net, val_data, weights, epoch, cfg, crop)
                entry["val_total"] = vloss
                val_log.write(json.dumps(
                    {"epoch": epoch, "step": global_step, "sfl": None,
                     "dcl": None, "total": vloss, "lr": None},
                    sort_keys=True) + "\n")
                val_log.flush()
                if best is None or vloss < best:
                    best = vloss
                    save_checkpoint(best_path, net, opt.velocity, epoch,
                                    global_step, extra=_extra(cfg, best, history))
            history.append(entry)
            if not quiet:
                print(f"epoch {epoch}: " + " ".join(
                    f"{k}={v:.5f}" for k, v in entry.items() if k != "epoch"))
            save_checkpoint(out / f"epoch_{epoch:04d}.ckpt", net, opt.velocity,
                            epoch, global_step, extra=_extra(cfg, best, history))
    finally:
        log.close()
        if val_log is not None:
            val_log.close()

    final = out / f"epoch_{cfg.epochs:04d}.ckpt"
    return TrainResult(out, log_path, final,
                       best_path if best is not None else None, history)


def _extra(cfg: TrainConfig, best, history):
    return {"train_seed": cfg.seed, "best_val": best, "history": history}


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalMetrics:
    abs_rel: float
    thresh_1_25: float
    thresh_1_25_sq: float
    thresh_1_25_cu: float
    n_valid: int

    def row(self):
        return [self.abs_rel, self.thresh_1_25, self.thresh_1_25_sq,
                self.thresh_1_25_cu]


def threshold_metrics(pred, ref):
    ratio = np.maximum(pred / ref, ref / pred)
    abs_rel = float((np.abs(pred - ref) / ref).mean())
    return EvalMetrics(
        abs_rel,
        float((ratio < 1.25).mean()),
        float((ratio < 1.25 ** 2).mean()),
        float((ratio < 1.25 ** 3).mean()),
        int(pred.size),
    )


def evaluate_sparse(prediction: DepthMap, sparse, mask, epsilon=layers.DEPTH_FLOOR):
    """Scale-invariant accuracy against the reconstruction's sparse depths.

    The prediction is first rescaled by the soft-mask-weighted ratio (the
    same operation used during training), so any positive global scale of
    the prediction gives identical metrics.
    """
    M = np.asarray(mask.values if hasattr(mask, "values") else mask, dtype=np.float64)
    Zs = np.asarray(sparse.values if hasattr(sparse, "values") else sparse, dtype=np.float64)
    scaled, _ = layers.scale_depth_forward(prediction, Zs, M, epsilon)
    valid = (M > 0) & (Zs > 0) & prediction.validity & (scaled.values > 0)
    if not valid.any():
        raise DataError("no valid sparse positions to evaluate")
    return threshold_metrics(scaled.values[valid], Zs[valid])


def evaluate_dense(prediction: DepthMap, depth_gt: DepthMap):
    """Median-ratio-scaled accuracy against dense ground truth."""
    valid = prediction.validity & depth_gt.validity & (depth_gt.values > 0)
    pred = prediction.values
    valid &= pred > 0
    if not valid.any():
        raise DataError("no valid pixels to evaluate")
    s = float(np.median(depth_gt.values[valid] / pred[valid]))
    return threshold_metrics(s * pred[valid], depth_gt.values[valid])
