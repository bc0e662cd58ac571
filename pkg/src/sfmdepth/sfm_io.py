"""Multi-view reconstruction ingestion.

Dataset directory layout (plain text, UTF-8, ``#`` comments ignored):

* ``intrinsics.txt``  one line ``fx fy cx cy width height``
* ``poses.txt``       one line per frame ``frame_id qw qx qy qz tx ty tz``
  (unit quaternion + translation, world-to-camera), sorted by frame_id
* ``points.txt``      one line per point ``point_id x y z track_length``
* ``visibility.txt``  one line per point ``point_id f1 f2 ...`` listing the
  frame ids that observe it
* ``frames/``         per-frame images ``<frame_id>.png``, 8-bit RGB

Conventions: pixel u indexes columns in [0, W-1], v indexes rows in
[0, H-1]; K = [[fx,0,cx],[0,fy,cy],[0,0,1]]. Poses are world-to-camera
maps p_cam = R p_world + t. Relative transforms map frame-j camera
coordinates into frame-k camera coordinates: p_k = R p_j + t.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.spatial import cKDTree

from .errors import DataError, NumericalError, ValidationError

QUAT_NORM_TOL = 1e-6
ORTHO_TOL = 1e-6


# ---------------------------------------------------------------------------
# domain types


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 8 or self.height < 8:
            raise ValidationError(f"image size too small: {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self):
        # closed form; keeps the zero pattern exact
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


@dataclass
class CameraPose:
    """World-to-camera map: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValidationError(f"rotation not orthonormal (error {err:.2e})")
        det = float(np.linalg.det(self.rotation))
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValidationError(f"rotation determinant {det:.6f} != 1")

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class SparsePoint:
    id: int
    position: np.ndarray
    track_length: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.isfinite(self.position).all():
            raise ValidationError(f"point {self.id} has non-finite position")
        if self.track_length < 2:
            raise ValidationError(f"point {self.id} track length {self.track_length} < 2")


@dataclass
class RelativeTransform:
    """Maps source-frame camera coords into target-frame: p_tgt = R p_src + t."""

    rotation: np.ndarray
    translation: np.ndarray
    source: int | None = None
    target: int | None = None


@dataclass
class SfmReconstruction:
    intrinsics: CameraIntrinsics
    frames: list  # ordered (frame_id, CameraPose)
    points: list  # SparsePoint
    visibility: np.ndarray  # bool (n_points, n_frames)
    root: Path | None = None
    _frame_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.visibility = np.asarray(self.visibility, dtype=bool)
        ids = [fid for fid, _ in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValidationError("frame ids must be unique and increasing")
        if self.visibility.shape != (len(self.points), len(self.frames)):
            raise ValidationError(
                f"visibility shape {self.visibility.shape} does not match "
                f"{len(self.points)} points x {len(self.frames)} frames")
        sums = self.visibility.sum(axis=1)
        for pt, s in zip(self.points, sums):
            if s != pt.track_length:
                raise ValidationError(
                    f"point {pt.id}: visibility count {s} != track length {pt.track_length}")
        self._frame_index = {fid: i for i, fid in enumerate(ids)}

    @property
    def frame_ids(self):
        return [fid for fid, _ in self.frames]

    def frame_index(self, frame_id):
        try:
            return self._frame_index[frame_id]
        except KeyError:
            raise DataError(f"unknown frame id {frame_id}") from None

    def pose(self, frame_id):
        return self.frames[self.frame_index(frame_id)][1]

    def positions(self):
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([p.position for p in self.points])

    def image_path(self, frame_id):
        if self.root is None:
            raise DataError("reconstruction has no dataset directory attached")
        return Path(self.root) / "frames" / f"{frame_id}.png"


# ---------------------------------------------------------------------------
# quaternions (colmap-style scalar-first convention)


def quat_to_rotation(q):
    qw, qx, qy, qz = q
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])


def rotation_to_quat(R):
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 > m11 and m00 > m22:
        s = math.sqrt(1.0 + m00 - m11 - m22) * 2
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 > m22:
        s = math.sqrt(1.0 + m11 - m00 - m22) * 2
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = math.sqrt(1.0 + m22 - m00 - m11) * 2
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# parsing / writing


def _data_lines(path: Path):
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    out = []
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = raw.strip()
        if s and not s.startswith("#"):
            out.append((ln, s))
    return out


def parse_reconstruction(path) -> SfmReconstruction:
    """Load and validate a reconstruction from a dataset directory.

    Image files are resolved lazily via :meth:`SfmReconstruction.image_path`;
    only the four text files are required here.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"missing dataset directory: {root}")

    lines = _data_lines(root / "intrinsics.txt")
    if len(lines) != 1:
        raise DataError(f"{root / 'intrinsics.txt'}: expected exactly one data line")
    vals = lines[0][1].split()
    if len(vals) != 6:
        raise DataError(f"{root / 'intrinsics.txt'}: expected 6 fields, got {len(vals)}")
    intr = CameraIntrinsics(float(vals[0]), float(vals[1]), float(vals[2]),
                            float(vals[3]), int(vals[4]), int(vals[5]))

    frames = []
    prev_id = -1
    for ln, s in _data_lines(root / "poses.txt"):
        f = s.split()
        if len(f) != 8:
            raise DataError(f"poses.txt line {ln}: expected 8 fields, got {len(f)}")
        fid = int(f[0])
        if fid < 0:
            raise ValidationError(f"poses.txt line {ln}: negative frame id {fid}")
        if fid <= prev_id:
            raise ValidationError(f"poses.txt line {ln}: frame ids must increase ({fid})")
        prev_id = fid
        q = np.array([float(x) for x in f[1:5]])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise ValidationError(
                f"poses.txt frame {fid}: quaternion norm {norm:.8f} off unit by more "
                f"than {QUAT_NORM_TOL}")
        q = q / norm
        t = np.array([float(x) for x in f[5:8]])
        try:
            pose = CameraPose(quat_to_rotation(q), t)
        except ValidationError as e:
            raise ValidationError(f"poses.txt frame {fid}: {e}") from None
        frames.append((fid, pose))
    if not frames:
        raise DataError(f"{root / 'poses.txt'}: no frames")

    points = []
    for ln, s in _data_lines(root / "points.txt"):
        f = s.split()
        if len(f) != 5:
            raise DataError(f"points.txt line {ln}: expected 5 fields, got {len(f)}")
        points.append(SparsePoint(int(f[0]), np.array([float(x) for x in f[1:4]]), int(f[4])))

    frame_pos = {fid: i for i, (fid, _) in enumerate(frames)}
    vis = np.zeros((len(points), len(frames)), dtype=bool)
    vis_lines = _data_lines(root / "visibility.txt")
    if len(vis_lines) != len(points):
        raise ValidationError(
            f"visibility.txt: {len(vis_lines)} rows for {len(points)} points")
    for row, (ln, s) in enumerate(vis_lines):
        f = s.split()
        pid = int(f[0])
        if pid != points[row].id:
            raise ValidationError(
                f"visibility.txt line {ln}: point id {pid} does not match "
                f"points.txt order (expected {points[row].id})")
        for tok in f[1:]:
            fid = int(tok)
            if fid not in frame_pos:
                raise ValidationError(f"visibility.txt point {pid}: unknown frame id {fid}")
            vis[row, frame_pos[fid]] = True

    return SfmReconstruction(intr, frames, points, vis, root=root)


def write_reconstruction(recon: SfmReconstruction, path) -> None:
    """Write the four interchange text files (images are not handled here)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    g = "%.17g"

    intr = recon.intrinsics
    with open(root / "intrinsics.txt", "w", encoding="utf-8") as fh:
        fh.write("# fx fy cx cy width height\n")
        fh.write(f"{g % intr.fx} {g % intr.fy} {g % intr.cx} {g % intr.cy} "
                 f"{intr.width} {intr.height}\n")

    with open(root / "poses.txt", "w", encoding="utf-8") as fh:
        fh.write("# frame_id qw qx qy qz tx ty tz (world-to-camera)\n")
        for fid, pose in recon.frames:
            q = rotation_to_quat(pose.rotation)
            t = pose.translation
            fh.write(f"{fid} " + " ".join(g % x for x in q) + " "
                     + " ".join(g % x for x in t) + "\n")

    with open(root / "points.txt", "w", encoding="utf-8") as fh:
        fh.write("# point_id x y z track_length\n")
        for pt in recon.points:
            fh.write(f"{pt.id} " + " ".join(g % x for x in pt.position)
                     + f" {pt.track_length}\n")

    ids = recon.frame_ids
    with open(root / "visibility.txt", "w", encoding="utf-8") as fh:
        fh.write("# point_id observing_frame_ids...\n")
        for row, pt in enumerate(recon.points):
            obs = [str(ids[c]) for c in np.nonzero(recon.visibility[row])[0]]
            fh.write(f"{pt.id} " + " ".join(obs) + "\n")


# ---------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """8-bit RGB png -> float64 HxWx3 in [0, 1]."""
    from PIL import Image

    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(arr: np.ndarray, path) -> None:
    """float HxWx3 in [0, 1] -> 8-bit RGB png (deterministic bytes)."""
    from PIL import Image

    a = np.clip(np.asarray(arr), 0.0, 1.0)
    u8 = np.round(a * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# geometry


def project_point(intrinsics: CameraIntrinsics, pose: CameraPose, point: SparsePoint):
    """Pinhole projection of one point; returns (u, v, z).

    z may come out non-positive; callers decide visibility. Only a nearly
    zero z (|z| < 1e-12) raises, since the pixel location is then undefined.
    """
    p_cam = pose.rotation @ point.position + pose.translation
    z = float(p_cam[2])
    if abs(z) < 1e-12:
        raise NumericalError(f"point {point.id} projects onto the camera plane (z={z})")
    u = intrinsics.fx * p_cam[0] / z + intrinsics.cx
    v = intrinsics.fy * p_cam[1] / z + intrinsics.cy
    return float(u), float(v), z


def project_positions(intrinsics: CameraIntrinsics, pose: CameraPose, positions):
    """Vectorized projection of an (N,3) array; returns (u, v, z) arrays.

    Near-zero depths produce non-finite pixel coordinates instead of raising;
    callers must gate on z.
    """
    p_cam = positions @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * p_cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * p_cam[:, 1] / z + intrinsics.cy
    return u, v, z


def relative_transform(pose_j: CameraPose, pose_k: CameraPose,
                       source=None, target=None) -> RelativeTransform:
    """Transform taking frame-j camera coordinates to frame-k: p_k = R p_j + t."""
    R = pose_k.rotation @ pose_j.rotation.T
    t = pose_k.translation - R @ pose_j.translation
    return RelativeTransform(R, t, source=source, target=target)


def relative_transform_between(recon: SfmReconstruction, frame_j, frame_k) -> RelativeTransform:
    return relative_transform(recon.pose(frame_j), recon.pose(frame_k),
                              source=frame_j, target=frame_k)


# ---------------------------------------------------------------------------
# preprocessing


def filter_points(recon: SfmReconstruction, neighbor_count: int = 16,
                  std_multiplier: float = 2.0) -> SfmReconstruction:
    """Statistical outlier removal on the sparse point cloud.

    A point is dropped when its mean distance to the ``neighbor_count``
    nearest neighbors exceeds mean + std_multiplier * std of that statistic
    over the whole cloud.
    """
    if neighbor_count < 1:
        raise ValueError("neighbor_count must be >= 1")
    n = len(recon.points)
    if n < neighbor_count + 1:
        raise DataError(
            f"need at least {neighbor_count + 1} points for filtering, have {n}")

    pos = recon.positions()
    dists, _ = cKDTree(pos).query(pos, k=neighbor_count + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + std_multiplier * mean_d.std()
    keep = mean_d <= thresh

    points = [p for p, k in zip(recon.points, keep) if k]
    return SfmReconstruction(recon.intrinsics, recon.frames, points,
                             recon.visibility[keep], root=recon.root)


def smooth_visibility(recon: SfmReconstruction, window: int) -> SfmReconstruction:
    """Dilate visibility along the frame axis, gated by actual projectability.

    A zero bit becomes one when the point is visible somewhere within
    ``window`` frames (in frame order) and its projection in this frame has
    positive depth and rounds into the image bounds. Existing bits are never
    cleared; track lengths are updated to the new per-point counts.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    if window == 0 or not recon.points:
        return recon

    vis = recon.visibility
    dilated = maximum_filter1d(vis.astype(np.uint8), size=2 * window + 1,
                               axis=1, mode="constant") > 0

    intr = recon.intrinsics
    pos = recon.positions()
    proj_ok = np.zeros_like(vis)
    for col, (_, pose) in enumerate(recon.frames):
        u, v, z = project_positions(intr, pose, pos)
        with np.errstate(invalid="ignore"):
            ui = np.round(u)
            vi = np.round(v)
            proj_ok[:, col] = ((z > 0) & np.isfinite(u) & np.isfinite(v)
                               & (ui >= 0) & (ui <= intr.width - 1)
                               & (vi >= 0) & (vi <= intr.height - 1))

    new_vis = vis | (dilated & proj_ok)
    points = [SparsePoint(p.id, p.position, int(c))
              for p, c in zip(recon.points, new_vis.sum(axis=1))]
    return SfmReconstruction(recon.intrinsics, recon.frames, points, new_vis,
                             root=recon.root)
