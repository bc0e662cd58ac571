"""Rasterized sparse supervision: depth maps, flow maps, soft masks.

The reconstruction's points are splatted onto per-frame grids at their
rounded projections (round-half-even; out-of-bounds drops the point).
When two points land on one pixel, the one with the larger soft weight
wins; ties go to the nearer point. Flow maps reuse the exact same
owner-per-pixel choice so all sparse grids of a frame share support.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .sfm_io import SfmReconstruction, load_image, project_positions, write_reconstruction

ARRAY_MAGIC = b"SMAP"
_DTYPES = {1: "<f8", 2: "<f4", 3: "|u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class SparseDepthMap:
    values: np.ndarray  # (H, W), 0 where no point projects
    frame_id: int


@dataclass
class SparseSoftMask:
    values: np.ndarray  # (H, W), weights in [0, 1)
    frame_id: int


@dataclass
class SparseFlowMap:
    values: np.ndarray  # (H, W, 2), displacement / (W, H)
    source: int
    target: int


def soft_weight(track_length, sigma: float):
    """Confidence weight of a point reconstructed from ``track_length`` frames."""
    return 1.0 - np.exp(-np.asarray(track_length, dtype=np.float64) / sigma)


def _frame_owners(recon: SfmReconstruction, frame_id, sigma):
    """Resolve which point owns which pixel of this frame.

    Returns (rows, cols, point_rows, u, v, z) for the winning points only,
    with u, v the unrounded projections.
    """
    col = recon.frame_index(frame_id)
    intr = recon.intrinsics
    pos = recon.positions()
    if len(pos) == 0:
        return (np.zeros(0, int),) * 3 + (np.zeros(0),) * 3

    u, v, z = project_positions(intr, recon.pose(frame_id), pos)
    with np.errstate(invalid="ignore"):
        ui = np.round(u)
        vi = np.round(v)
        ok = (recon.visibility[:, col] & (z > 0) & np.isfinite(u) & np.isfinite(v)
              & (ui >= 0) & (ui <= intr.width - 1) & (vi >= 0) & (vi <= intr.height - 1))
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return (np.zeros(0, int),) * 3 + (np.zeros(0),) * 3

    tl = np.array([recon.points[i].track_length for i in idx], dtype=np.float64)
    w = soft_weight(tl, sigma)
    # ascending (weight, nearness) so the best candidate writes last
    order = np.lexsort((-z[idx], w))
    idx = idx[order]

    rows = vi[idx].astype(int)
    cols = ui[idx].astype(int)
    flat = rows * intr.width + cols
    # keep only each pixel's final (winning) writer
    last = {}
    for i, fkey in enumerate(flat):
        last[fkey] = i
    keep = np.array(sorted(last.values()), dtype=int)
    idx = idx[keep]
    return rows[keep], cols[keep], idx, u[idx], v[idx], z[idx]


def rasterize_frame(recon: SfmReconstruction, frame_id, sigma: float):
    """Sparse depth map and soft mask of one frame (shared support)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    intr = recon.intrinsics
    depth = np.zeros((intr.height, intr.width))
    mask = np.zeros((intr.height, intr.width))
    rows, cols, pidx, _, _, z = _frame_owners(recon, frame_id, sigma)
    if len(rows):
        tl = np.array([recon.points[i].track_length for i in pidx], dtype=np.float64)
        depth[rows, cols] = z
        mask[rows, cols] = soft_weight(tl, sigma)
    return SparseDepthMap(depth, frame_id), SparseSoftMask(mask, frame_id)


def rasterize_flow(recon: SfmReconstruction, frame_j, frame_k,
                   sigma: float = 1.0) -> SparseFlowMap:
    """Projected 2D movement of frame j's visible points towards frame k.

    Inclusion follows visibility in frame j only; points must additionally
    have positive depth in both frames to yield a finite displacement.
    ``sigma`` only breaks pixel-collision ties and defaults to a constant,
    which is equivalent to ranking by track length.
    """
    intr = recon.intrinsics
    flow = np.zeros((intr.height, intr.width, 2))
    rows, cols, pidx, u_j, v_j, z_j = _frame_owners(recon, frame_j, sigma)
    if len(rows) == 0:
        return SparseFlowMap(flow, frame_j, frame_k)

    pos = recon.positions()[pidx]
    u_k, v_k, z_k = project_positions(intr, recon.pose(frame_k), pos)
    good = z_k > 0
    flow[rows[good], cols[good], 0] = (u_k[good] - u_j[good]) / intr.width
    flow[rows[good], cols[good], 1] = (v_k[good] - v_j[good]) / intr.height
    return SparseFlowMap(flow, frame_j, frame_k)


# ---------------------------------------------------------------------------
# array container (16-byte header: magic, dtype code, channels, H, W)


def write_array(arr: np.ndarray, path) -> None:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC array, got shape {arr.shape}")
    dt = np.dtype(a.dtype).newbyteorder("<") if a.dtype.kind == "f" else a.dtype
    code = _DTYPE_CODES.get(np.dtype(dt))
    if code is None:
        raise ValueError(f"unsupported dtype {a.dtype}")
    h, w, c = a.shape
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(struct.pack("<4sHHII", ARRAY_MAGIC, code, c, h, w))
        fh.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def read_array(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    with open(p, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise DataError(f"{p}: truncated header")
        magic, code, c, h, w = struct.unpack("<4sHHII", head)
        if magic != ARRAY_MAGIC:
            raise DataError(f"{p}: bad magic {magic!r}")
        if code not in _DTYPES:
            raise DataError(f"{p}: unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=_DTYPES[code])
    if data.size != h * w * c:
        raise DataError(f"{p}: payload size mismatch")
    arr = data.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetManifest:
    root: Path
    sigma: float
    image_mean: np.ndarray  # (3,)
    image_std: np.ndarray  # (3,)
    frames: list  # dicts: frame_id, image, depth, mask

    @property
    def frame_ids(self):
        return [f["frame_id"] for f in self.frames]

    def entry(self, frame_id):
        for f in self.frames:
            if f["frame_id"] == frame_id:
                return f
        raise DataError(f"unknown frame id {frame_id}")

    def image(self, frame_id):
        return load_image(self.root / self.entry(frame_id)["image"])

    def depth(self, frame_id):
        return read_array(self.root / self.entry(frame_id)["depth"])

    def mask(self, frame_id):
        return read_array(self.root / self.entry(frame_id)["mask"])

    def save(self, path) -> None:
        doc = {
            "format_version": 1,
            "sigma": self.sigma,
            "image_mean": [float(x) for x in self.image_mean],
            "image_std": [float(x) for x in self.image_std],
            "frames": self.frames,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        if not p.is_file():
            raise DataError(f"missing file: {p}")
        doc = json.loads(p.read_text(encoding="utf-8"))
        if doc.get("format_version") != 1:
            raise DataError(f"{p}: unsupported manifest version {doc.get('format_version')}")
        return cls(p.parent, float(doc["sigma"]), np.array(doc["image_mean"]),
                   np.array(doc["image_std"]), doc["frames"])


def generate_dataset(recon: SfmReconstruction, out_dir, sigma: float) -> DatasetManifest:
    """Persist per-frame sparse depth/mask grids plus the reconstruction.

    Flow maps are intentionally not materialized: they depend on the frame
    pair, so training derives them on the fly from the reconstruction copy
    written here. Output bytes are a deterministic function of the inputs.
    """
    if recon.root is None:
        raise DataError("reconstruction must come from a dataset directory (images needed)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reconstruction(recon, out)

    frames = []
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    n_px = 0
    for fid in recon.frame_ids:
        img_path = recon.image_path(fid)
        img = load_image(img_path)
        acc += img.reshape(-1, 3).sum(axis=0)
        acc2 += (img.reshape(-1, 3) ** 2).sum(axis=0)
        n_px += img.shape[0] * img.shape[1]

        depth, mask = rasterize_frame(recon, fid, sigma)
        try:
            write_array(depth.values, out / "depth" / f"{fid}.dat")
            write_array(mask.values, out / "mask" / f"{fid}.dat")
        except OSError as e:
            raise DataError(f"cannot write sparse maps for frame {fid}: {e}") from e
        rel_img = str(Path(img_path).resolve().relative_to(out.resolve())
                      if _is_within(img_path, out) else Path(img_path).resolve())
        frames.append({
            "frame_id": int(fid),
            "image": rel_img,
            "depth": f"depth/{fid}.dat",
            "mask": f"mask/{fid}.dat",
        })

    mean = acc / n_px
    std = np.sqrt(np.maximum(acc2 / n_px - mean ** 2, 1e-12))
    manifest = DatasetManifest(out, sigma, mean, std, frames)
    manifest.save(out / "manifest.json")
    return manifest


def _is_within(path, root) -> bool:
    try:
        Path(path).resolve().relative_to(Path(root).resolve())
        return True
    except ValueError:
        return False
