import numpy as np
import pytest

from sfmdepth.sfm_io import (CameraIntrinsics, CameraPose, SfmReconstruction,
                             SparsePoint, save_image, write_reconstruction)


def make_pose(rotation=None, translation=None):
    return CameraPose(np.eye(3) if rotation is None else rotation,
                      np.zeros(3) if translation is None else np.asarray(translation, float))


def pose_with_center(rotation, center):
    R = np.asarray(rotation, float)
    return CameraPose(R, -R @ np.asarray(center, float))


def rotation_about(axis, angle):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def build_recon(intrinsics, poses, positions, visibility, root=None):
    """Reconstruction from raw arrays; track lengths follow visibility."""
    vis = np.asarray(visibility, dtype=bool)
    points = [SparsePoint(i, p, int(vis[i].sum())) for i, p in enumerate(positions)]
    frames = [(i, pose) for i, pose in enumerate(poses)]
    return SfmReconstruction(intrinsics, frames, points, vis, root=root)


def write_dataset_dir(recon, path, rng=None):
    """Interchange files plus solid-color frames for image-consuming stages."""
    write_reconstruction(recon, path)
    rng = rng or np.random.default_rng(0)
    intr = recon.intrinsics
    for fid, _ in recon.frames:
        img = np.full((intr.height, intr.width, 3), 0.2 + 0.6 * rng.random())
        save_image(img, path / "frames" / f"{fid}.png")
    recon.root = path
    return recon


@pytest.fixture
def tiny_intrinsics():
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=40.0, cy=32.0, width=80, height=64)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Small noiseless synthetic dataset shared by the training tests."""
    from sfmdepth.sfm_io import filter_points, parse_reconstruction, smooth_visibility
    from sfmdepth.sparse_maps import generate_dataset
    from sfmdepth.synthetic import SceneConfig, make_scene, simulate_sfm, write_dataset

    root = tmp_path_factory.mktemp("mini")
    cfg = SceneConfig(width=80, height=64, focal=32.0, n_frames=30, traj_span=0.25)
    scene, traj = make_scene(11, cfg)
    recon = simulate_sfm(scene, traj, 180, noise_sigma=0.0, dropout=0.0, seed=11)
    write_dataset(scene, traj, recon, root / "synth")

    parsed = parse_reconstruction(root / "synth")
    parsed = filter_points(parsed, 8, 2.0)
    sigma = float(np.mean([p.track_length for p in parsed.points]))
    parsed = smooth_visibility(parsed, 10)
    manifest = generate_dataset(parsed, root / "data", sigma)
    return {"root": root, "scene": scene, "trajectory": traj,
            "recon": parsed, "manifest": manifest, "config": cfg}
