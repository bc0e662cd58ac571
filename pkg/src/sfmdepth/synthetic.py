"""Procedural cavity scenes with analytic ground truth.

The scene is a bent, bumpy tube rendered from inside by sphere tracing its
distance field. The light rides on the camera with inverse-square falloff,
so the same wall point changes brightness as the camera moves: appearance
gives no cross-frame constancy, but carries a strong depth cue within each
frame. A simulated multi-view front end samples wall points, applies
occlusion-accurate visibility with random dropout, and perturbs positions
with noise that shrinks with track length.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .kernels import march_rays, sdf_points
from .layers import DepthMap
from .sfm_io import (CameraIntrinsics, CameraPose, SfmReconstruction, SparsePoint,
                     save_image, write_reconstruction)
from .sparse_maps import write_array


@dataclass
class SceneConfig:
    width: int = 320
    height: int = 256
    focal: float = 128.0  # power of two keeps pixel maps binary-exact
    n_frames: int = 200
    radius: float = 1.0
    length: float = 16.0
    bump_count: int = 6
    bump_amp: float = 0.07
    axis_amp: float = 0.45
    traj_margin: float = 2.5  # tube ends excluded from the camera path
    traj_start: float = 0.0  # camera path offset along the usable axis, [0, 1)
    traj_span: float = 0.62  # fraction of the usable axis traversed
    look_ahead: float = 0.8
    wobble: float = 0.06  # rad, orientation wobble amplitude
    lateral: float = 0.22  # camera offset from the axis, fraction of radius
    march_tol: float = 1e-4
    march_max_steps: int = 512
    light_gain: float = 0.85
    diffuse: float = 0.8
    specular: float = 0.35
    shininess: float = 8.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0,
                                self.height / 2.0, self.width, self.height)


@dataclass
class Scene:
    config: SceneConfig
    axis_par: np.ndarray  # [amp_x, freq_x, phase_x, amp_y, freq_y, phase_y]
    tube_par: np.ndarray  # [r0, z_lo, z_hi]
    bumps: np.ndarray  # (M, 4): amp, freq_z, freq_theta, phase
    albedo_par: np.ndarray  # (3, 3): per-channel [base, amp, phase]
    step_scale: float
    seed: int

    def sdf(self, pts) -> np.ndarray:
        return sdf_points(np.asarray(pts, dtype=np.float64),
                          self.axis_par, self.tube_par, self.bumps)

    def axis_at(self, z):
        z = np.asarray(z, dtype=np.float64)
        a = self.axis_par
        return np.stack((a[0] * np.sin(a[1] * z + a[2]),
                         a[3] * np.sin(a[4] * z + a[5]),
                         z), axis=-1)

    def normals(self, pts, delta=1e-5):
        pts = np.asarray(pts, dtype=np.float64)
        g = np.zeros_like(pts)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = delta
            g[:, ax] = self.sdf(pts + e) - self.sdf(pts - e)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(n, 1e-30)

    def albedo(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        z = pts[:, 2]
        off = pts - self.axis_at(z)
        theta = np.arctan2(off[:, 1], off[:, 0])
        out = np.zeros((len(pts), 3))
        for c in range(3):
            base, amp, ph = self.albedo_par[c]
            out[:, c] = base + amp * (np.sin(1.7 * z + 3.0 * theta + ph)
                                      + 0.5 * np.sin(4.3 * z - 2.0 * theta + 2.1 * ph))
        return np.clip(out, 0.05, 1.0)


def make_scene(seed: int, config: SceneConfig | None = None):
    """Deterministic scene plus a smooth inside-the-cavity camera trajectory."""
    config = config or SceneConfig()
    rng = np.random.default_rng([seed, 0x5CE11E])

    ax = config.axis_amp * rng.uniform(0.7, 1.0)
    ay = config.axis_amp * rng.uniform(0.5, 0.9)
    axis_par = np.array([ax, rng.uniform(0.28, 0.42), rng.uniform(0, 2 * math.pi),
                         ay, rng.uniform(0.22, 0.36), rng.uniform(0, 2 * math.pi)])
    tube_par = np.array([config.radius, 0.0, config.length])

    m = config.bump_count
    bumps = np.zeros((m, 4))
    bumps[:, 0] = config.bump_amp * rng.uniform(0.4, 1.0, size=m)
    bumps[:, 1] = rng.uniform(0.5, 1.8, size=m)
    bumps[:, 2] = rng.integers(1, 5, size=m)  # integral: continuous across +-pi
    bumps[:, 3] = rng.uniform(0, 2 * math.pi, size=m)

    albedo_par = np.stack([
        np.array([rng.uniform(0.55, 0.7), rng.uniform(0.05, 0.1), rng.uniform(0, 6.3)]),
        np.array([rng.uniform(0.4, 0.55), rng.uniform(0.05, 0.1), rng.uniform(0, 6.3)]),
        np.array([rng.uniform(0.3, 0.45), rng.uniform(0.04, 0.08), rng.uniform(0, 6.3)]),
    ])

    # conservative sphere-tracing step from the field's slope budget
    slope = (abs(axis_par[0] * axis_par[1]) + abs(axis_par[3] * axis_par[4])
             + float(np.sum(np.abs(bumps[:, 0] * bumps[:, 1])))
             + float(np.sum(np.abs(bumps[:, 0] * bumps[:, 2]))) / (0.3 * config.radius))
    step_scale = 0.9 / (1.0 + slope)

    scene = Scene(config, axis_par, tube_par, bumps, albedo_par, step_scale, seed)
    trajectory = _make_trajectory(scene, rng)

    centers = np.array([p.center() for p in trajectory])
    margin = 0.18 * config.radius
    inside = scene.sdf(centers)
    if (inside < margin).any():
        raise DataError(
            f"camera trajectory leaves the cavity (min clearance {inside.min():.3f})")
    return scene, trajectory


def _make_trajectory(scene: Scene, rng) -> list:
    cfg = scene.config
    z_lo = cfg.traj_margin
    z_hi = cfg.length - cfg.traj_margin - cfg.look_ahead
    usable = z_hi - z_lo
    z0 = z_lo + cfg.traj_start * usable
    z1 = min(z0 + cfg.traj_span * usable, z_hi)
    phases = rng.uniform(0, 2 * math.pi, size=4)

    poses = []
    n = cfg.n_frames
    for i in range(n):
        s = i / max(n - 1, 1)
        z = z0 + s * (z1 - z0)
        lat = cfg.lateral * cfg.radius
        offset = np.array([lat * math.sin(2.1 * z + phases[0]),
                           lat * math.sin(1.7 * z + phases[1]), 0.0])
        center = scene.axis_at(z) + offset

        target_z = z + cfg.look_ahead
        jitter = np.array([cfg.wobble * math.sin(3.1 * z + phases[2]),
                           cfg.wobble * math.sin(2.6 * z + phases[3]), 0.0])
        target = scene.axis_at(target_z) + 0.4 * offset + jitter

        fwd = target - center
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack((right, down, fwd))
        if np.linalg.det(R) < 0:
            right = -right
            R = np.stack((right, down, fwd))
        poses.append(CameraPose(R, -R @ center))
    return poses


# ---------------------------------------------------------------------------
# rendering


def camera_rays(intrinsics: CameraIntrinsics, pose: CameraPose):
    """Unit world-space ray directions plus per-pixel depth-per-distance."""
    H, W = intrinsics.height, intrinsics.width
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    d_cam = np.stack(((u - intrinsics.cx) / intrinsics.fx,
                      (v - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(u)), axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=1)
    d_world = (d_cam / norm[:, None]) @ pose.rotation  # == R^T @ d per row
    return np.ascontiguousarray(d_world), 1.0 / norm


def render_frame(scene: Scene, pose: CameraPose, intrinsics: CameraIntrinsics | None = None):
    """Ray-cast one view; returns (image HxWx3 in [0,1], ground-truth DepthMap).

    Depth is the camera-frame z coordinate of the hit point. Rays that never
    reach the wall (not expected inside a closed cavity) are flagged invalid.
    """
    cfg = scene.config
    intr = intrinsics or cfg.intrinsics()
    H, W = intr.height, intr.width
    center = pose.center()

    dirs, depth_per_t = camera_rays(intr, pose)
    t, hit = march_rays(center, dirs, 0.0, 4.0 * cfg.length, cfg.march_tol,
                        cfg.march_max_steps, scene.step_scale,
                        scene.axis_par, scene.tube_par, scene.bumps)

    depth = np.where(hit, t * depth_per_t, 0.0)
    pts = center[None, :] + t[:, None] * dirs
    normals = scene.normals(pts)
    albedo = scene.albedo(pts)

    # colocated light: incidence and view direction coincide
    cosv = np.maximum(-(normals * dirs).sum(axis=1), 0.0)
    dist2 = np.maximum(t, 1e-6) ** 2
    shade = cfg.light_gain * (cfg.diffuse * cosv + cfg.specular * cosv ** cfg.shininess) / dist2
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0) ** 0.5  # display gamma
    rgb = np.where(hit[:, None], rgb, 0.0)

    image = rgb.reshape(H, W, 3)
    gt = DepthMap(depth.reshape(H, W), hit.reshape(H, W))
    return image, gt


# ---------------------------------------------------------------------------
# simulated multi-view front end


def surface_points(scene: Scene, rng, n: int, z_lo: float, z_hi: float):
    """Sample points exactly on the cavity wall."""
    z = rng.uniform(z_lo, z_hi, size=n)
    theta = rng.uniform(-math.pi, math.pi, size=n)
    r = np.full(n, scene.tube_par[0])
    for m in range(scene.bumps.shape[0]):
        amp, fz, ft, ph = scene.bumps[m]
        r += amp * np.cos(fz * z + ft * theta + ph)
    axis = scene.axis_at(z)
    pts = axis + np.stack((r * np.cos(theta), r * np.sin(theta), np.zeros(n)), axis=-1)
    return pts


def visible_from(scene: Scene, pose: CameraPose, intrinsics: CameraIntrinsics,
                 pts: np.ndarray) -> np.ndarray:
    """Occlusion-accurate visibility of world points from one camera."""
    cfg = scene.config
    center = pose.center()
    p_cam = pts @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    ok = z > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * p_cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * p_cam[:, 1] / z + intrinsics.cy
    ok &= np.isfinite(u) & np.isfinite(v)
    ok &= (np.round(u) >= 0) & (np.round(u) <= intrinsics.width - 1)
    ok &= (np.round(v) >= 0) & (np.round(v) <= intrinsics.height - 1)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return ok

    delta = pts[idx] - center[None, :]
    dist = np.linalg.norm(delta, axis=1)
    dirs = np.ascontiguousarray(delta / dist[:, None])
    t, hit = march_rays(center, dirs, 0.0, float(dist.max()) + 1.0, cfg.march_tol,
                        cfg.march_max_steps, scene.step_scale,
                        scene.axis_par, scene.tube_par, scene.bumps)
    reach_tol = np.maximum(8.0 * cfg.march_tol, 1e-3 * dist)
    reached = hit & (t >= dist - reach_tol)
    out = np.zeros(len(pts), dtype=bool)
    out[idx[reached]] = True
    return out


def simulate_sfm(scene: Scene, trajectory, n_points: int, noise_sigma: float,
                 dropout: float, seed: int) -> SfmReconstruction:
    """Stand-in for a multi-view-stereo front end with known error statistics.

    Point positions get isotropic Gaussian noise with per-point deviation
    noise_sigma / sqrt(track_length), modelling the accuracy gain of longer
    tracks. Visibility is true ray visibility minus independent dropout.
    Poses and intrinsics are exact.
    """
    if n_points < 10:
        raise ValueError("n_points must be >= 10")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    cfg = scene.config
    intr = cfg.intrinsics()
    rng = np.random.default_rng([seed, 0x5F31])

    centers = np.array([p.center() for p in trajectory])
    z_lo = max(float(centers[:, 2].min()) - 1.0, 0.2)
    z_hi = min(float(centers[:, 2].max()) + cfg.look_ahead + 4.0, cfg.length - 0.2)
    pts = surface_points(scene, rng, n_points, z_lo, z_hi)

    vis = np.zeros((n_points, len(trajectory)), dtype=bool)
    for col, pose in enumerate(trajectory):
        vis[:, col] = visible_from(scene, pose, intr, pts)
    if dropout > 0:
        vis &= rng.random(vis.shape) >= dropout

    track = vis.sum(axis=1)
    keep = track >= 2
    pts, vis, track = pts[keep], vis[keep], track[keep]

    if noise_sigma > 0:
        sig = noise_sigma / np.sqrt(track.astype(np.float64))
        pts = pts + rng.normal(size=pts.shape) * sig[:, None]

    points = [SparsePoint(i, p, int(t)) for i, (p, t) in enumerate(zip(pts, track))]
    frames = [(i, pose) for i, pose in enumerate(trajectory)]
    return SfmReconstruction(intr, frames, points, vis)


# ---------------------------------------------------------------------------
# dataset export (identical layout to any other reconstruction source)


def write_dataset(scene: Scene, trajectory, recon: SfmReconstruction, out_dir,
                  with_ground_truth: bool = True) -> None:
    """Render frames and persist everything in the interchange layout.

    ``gt_depth/`` holds the analytic depth of each frame; parsers ignore it,
    dense evaluation uses it.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reconstruction(recon, out)
    intr = scene.config.intrinsics()
    for fid, pose in recon.frames:
        image, gt = render_frame(scene, pose, intr)
        save_image(image, out / "frames" / f"{fid}.png")
        if with_ground_truth:
            write_array(gt.values, out / "gt_depth" / f"{fid}.dat")
    # re-attach the directory so downstream stages can find the images
    recon.root = out
