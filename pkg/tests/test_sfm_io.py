import numpy as np
import pytest
from scipy.spatial.distance import cdist

from conftest import build_recon, make_pose, pose_with_center, rotation_about, write_dataset_dir
from sfmdepth.errors import DataError, NumericalError, ValidationError
from sfmdepth.sfm_io import (CameraIntrinsics, CameraPose, SparsePoint,
                             filter_points, parse_reconstruction, project_point,
                             project_positions, quat_to_rotation, relative_transform,
                             rotation_to_quat, smooth_visibility, write_reconstruction)


def test_parse_minimal_dataset(tmp_path, tiny_intrinsics):
    recon = build_recon(tiny_intrinsics,
                        [make_pose(), make_pose(translation=[0, 0, 0.1])],
                        [np.array([0.0, 0.0, 2.0])], [[1, 1]])
    write_reconstruction(recon, tmp_path)
    parsed = parse_reconstruction(tmp_path)
    assert parsed.frame_ids == [0, 1]
    np.testing.assert_array_equal(parsed.visibility, [[True, True]])
    assert parsed.points[0].track_length == 2


def test_reflection_is_rejected():
    with pytest.raises(ValidationError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_quaternion_norm_tolerance(tmp_path, tiny_intrinsics):
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        [np.array([0.0, 0.0, 2.0])], [[1, 1]])
    write_reconstruction(recon, tmp_path)
    poses = (tmp_path / "poses.txt").read_text().splitlines()
    # slightly off unit: renormalized quietly
    poses[1] = "0 1.0000002 0 0 0 0 0 0"
    (tmp_path / "poses.txt").write_text("\n".join(poses) + "\n")
    parse_reconstruction(tmp_path)
    # far off unit: rejected
    poses[1] = "0 1.01 0 0 0 0 0 0"
    (tmp_path / "poses.txt").write_text("\n".join(poses) + "\n")
    with pytest.raises(ValidationError):
        parse_reconstruction(tmp_path)


def test_missing_file_named(tmp_path, tiny_intrinsics):
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        [np.array([0.0, 0.0, 2.0])], [[1, 1]])
    write_reconstruction(recon, tmp_path)
    (tmp_path / "points.txt").unlink()
    with pytest.raises(DataError, match="points.txt"):
        parse_reconstruction(tmp_path)


def test_visibility_mismatch_names_point(tmp_path, tiny_intrinsics):
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        [np.array([0.0, 0.0, 2.0])], [[1, 1]])
    write_reconstruction(recon, tmp_path)
    lines = (tmp_path / "points.txt").read_text().splitlines()
    lines[1] = "0 0 0 2 3"  # claims track length 3, visibility says 2
    (tmp_path / "points.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="point 0"):
        parse_reconstruction(tmp_path)


def test_roundtrip_simulated_reconstruction(tmp_path):
    from sfmdepth.synthetic import SceneConfig, make_scene, simulate_sfm

    cfg = SceneConfig(width=48, height=32, focal=16.0, n_frames=12)
    scene, traj = make_scene(3, cfg)
    recon = simulate_sfm(scene, traj, 60, noise_sigma=0.002, dropout=0.2, seed=5)
    write_reconstruction(recon, tmp_path)
    back = parse_reconstruction(tmp_path)

    assert back.frame_ids == recon.frame_ids
    intr_a, intr_b = recon.intrinsics, back.intrinsics
    assert (intr_a.fx, intr_a.fy, intr_a.cx, intr_a.cy, intr_a.width, intr_a.height) == \
           (intr_b.fx, intr_b.fy, intr_b.cx, intr_b.cy, intr_b.width, intr_b.height)
    np.testing.assert_array_equal(back.visibility, recon.visibility)
    for pa, pb in zip(recon.points, back.points):
        assert (pa.id, pa.track_length) == (pb.id, pb.track_length)
        np.testing.assert_array_equal(pa.position, pb.position)
    for (fa, pa), (fb, pb) in zip(recon.frames, back.frames):
        assert fa == fb
        np.testing.assert_array_equal(pa.translation, pb.translation)
        # orientation survives the quaternion round trip to tight tolerance
        np.testing.assert_allclose(pa.rotation, pb.rotation, rtol=0, atol=1e-12)


def test_quat_rotation_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        R = quat_to_rotation(q)
        np.testing.assert_allclose(rotation_to_quat(R), q, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# point filtering


def _grid_recon(intr, extra_points=()):
    xs = np.linspace(-0.5, 0.5, 5)
    pts = [np.array([x, y, 2.0]) for x in xs for y in xs]
    pts += [np.asarray(p, float) for p in extra_points]
    poses = [make_pose(), make_pose(translation=[0.01, 0, 0])]
    vis = np.ones((len(pts), 2), dtype=bool)
    return build_recon(intr, poses, pts, vis)


def test_filter_removes_only_far_outlier(tiny_intrinsics):
    recon = _grid_recon(tiny_intrinsics, extra_points=[[25.0, 0.0, 2.0]])
    out = filter_points(recon, neighbor_count=4, std_multiplier=2.0)

    # oracle: brute-force neighbor distances
    pos = recon.positions()
    d = cdist(pos, pos)
    np.fill_diagonal(d, np.inf)
    mean_d = np.sort(d, axis=1)[:, :4].mean(axis=1)
    keep = mean_d <= mean_d.mean() + 2.0 * mean_d.std()
    assert not keep[-1]
    assert keep[:-1].all()

    kept_ids = [p.id for p in out.points]
    assert kept_ids == [p.id for p, k in zip(recon.points, keep) if k]
    assert out.visibility.shape[0] == len(out.points)


def test_filter_identical_points_keeps_all(tiny_intrinsics):
    pts = [np.array([0.0, 0.0, 2.0])] * 6
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        pts, np.ones((6, 2), bool))
    out = filter_points(recon, neighbor_count=3, std_multiplier=2.0)
    assert len(out.points) == 6


def test_filter_huge_multiplier_is_identity(tiny_intrinsics):
    recon = _grid_recon(tiny_intrinsics, extra_points=[[25.0, 0.0, 2.0]])
    out = filter_points(recon, neighbor_count=4, std_multiplier=1e9)
    assert len(out.points) == len(recon.points)


def test_filter_subset_property(tiny_intrinsics):
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(40, 3)) + [0, 0, 3]
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        list(pts), np.ones((40, 2), bool))
    out = filter_points(recon, 8, 1.0)
    ids_in = {p.id for p in recon.points}
    assert {p.id for p in out.points} <= ids_in


def test_filter_needs_enough_points(tiny_intrinsics):
    recon = build_recon(tiny_intrinsics, [make_pose(), make_pose()],
                        [np.array([0.0, 0.0, 2.0])] * 3, np.ones((3, 2), bool))
    with pytest.raises(DataError):
        filter_points(recon, neighbor_count=5)


# ---------------------------------------------------------------------------
# visibility smoothing


def _line_recon(intr, n_frames, point, visible_at):
    poses = [pose_with_center(np.eye(3), [0, 0, 0.05 * i]) for i in range(n_frames)]
    vis = np.zeros((1, n_frames), bool)
    vis[0, visible_at] = True
    return build_recon(intr, poses, [np.asarray(point, float)], vis)


def test_smooth_window_zero_identity(tiny_intrinsics):
    recon = _line_recon(tiny_intrinsics, 40, [0, 0, 2.0], [10, 11])
    out = smooth_visibility(recon, 0)
    np.testing.assert_array_equal(out.visibility, recon.visibility)


def test_smooth_matches_bruteforce_projection_oracle(tiny_intrinsics):
    recon = _line_recon(tiny_intrinsics, 60, [0.3, 0.2, 1.5], [10, 11])
    window = 30
    out = smooth_visibility(recon, window)

    vis = recon.visibility[0]
    expected = vis.copy()
    for col, (_, pose) in enumerate(recon.frames):
        lo, hi = max(0, col - window), min(len(recon.frames) - 1, col + window)
        if not vis[lo:hi + 1].any():
            continue
        p_cam = pose.rotation @ recon.points[0].position + pose.translation
        if p_cam[2] <= 0:
            continue
        u = tiny_intrinsics.fx * p_cam[0] / p_cam[2] + tiny_intrinsics.cx
        v = tiny_intrinsics.fy * p_cam[1] / p_cam[2] + tiny_intrinsics.cy
        if (0 <= round(u) <= tiny_intrinsics.width - 1
                and 0 <= round(v) <= tiny_intrinsics.height - 1):
            expected[col] = True
    np.testing.assert_array_equal(out.visibility[0], expected)
    assert out.points[0].track_length == int(expected.sum())
    # frames within the window but with the point behind the camera stay off
    behind = [c for c in range(31, 42) if not expected[c]]
    assert behind, "test geometry should include behind-camera frames"


def test_smooth_never_asserts_behind_camera(tiny_intrinsics):
    # the point sits behind every camera except where originally visible
    recon = _line_recon(tiny_intrinsics, 30, [0.0, 0.0, -1.0], [12, 13])
    out = smooth_visibility(recon, 30)
    np.testing.assert_array_equal(out.visibility, recon.visibility)


def test_smooth_is_monotone(tiny_intrinsics):
    rng = np.random.default_rng(3)
    poses = [pose_with_center(np.eye(3), [0, 0, 0.05 * i]) for i in range(25)]
    pts = [np.array([x, y, 2.0 + z]) for x, y, z in rng.uniform(-0.5, 0.5, (15, 3))]
    vis = rng.random((15, 25)) < 0.2
    vis[:, :2] = True  # ensure track lengths >= 2
    recon = build_recon(tiny_intrinsics, poses, pts, vis)
    out = smooth_visibility(recon, 5)
    assert (out.visibility | recon.visibility == out.visibility).all()


# ---------------------------------------------------------------------------
# relative transforms and projection


def test_relative_transform_identity(tiny_intrinsics):
    pose = make_pose(rotation_about([0.3, 1, 0.2], 0.7), [1.0, -2.0, 0.5])
    rel = relative_transform(pose, pose)
    np.testing.assert_allclose(rel.rotation, np.eye(3), rtol=0, atol=1e-12)
    np.testing.assert_allclose(rel.translation, 0, rtol=0, atol=1e-12)


def test_relative_transform_pure_translation():
    pose_j = make_pose()
    pose_k = make_pose(translation=[0, 0, 1.0])
    rel = relative_transform(pose_j, pose_k)
    np.testing.assert_array_equal(rel.rotation, np.eye(3))
    np.testing.assert_array_equal(rel.translation, [0, 0, 1.0])


def test_relative_transform_composition_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pose_j = make_pose(rotation_about(rng.normal(size=3), rng.uniform(-2, 2)),
                           rng.normal(size=3))
        pose_k = make_pose(rotation_about(rng.normal(size=3), rng.uniform(-2, 2)),
                           rng.normal(size=3))
        rel = relative_transform(pose_j, pose_k)
        p_world = rng.normal(size=3) * 2
        via_j = rel.rotation @ (pose_j.rotation @ p_world + pose_j.translation) + rel.translation
        direct = pose_k.rotation @ p_world + pose_k.translation
        np.testing.assert_allclose(via_j, direct, rtol=0, atol=1e-9)

        back = relative_transform(pose_k, pose_j)
        np.testing.assert_allclose(back.rotation @ rel.rotation, np.eye(3), rtol=0, atol=1e-9)
        np.testing.assert_allclose(back.rotation @ rel.translation + back.translation,
                                   0, rtol=0, atol=1e-9)


def test_project_point_on_optical_axis():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 8, 8)
    u, v, z = project_point(intr, make_pose(), SparsePoint(0, [0, 0, 2.0], 2))
    assert (u, v, z) == (0.0, 0.0, 2.0)


def test_project_point_pinhole_arithmetic():
    intr = CameraIntrinsics(100.0, 100.0, 160.0, 128.0, 320, 256)
    u, v, z = project_point(intr, make_pose(), SparsePoint(0, [0.1, 0.0, 1.0], 2))
    assert abs(u - 170.0) < 1e-12 and abs(v - 128.0) < 1e-12 and z == 1.0


def test_project_point_behind_camera_returns_negative_depth():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 8, 8)
    u, v, z = project_point(intr, make_pose(), SparsePoint(0, [0, 0, -1.0], 2))
    assert z == -1.0


def test_project_point_degenerate_raises():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 8, 8)
    with pytest.raises(NumericalError):
        project_point(intr, make_pose(), SparsePoint(0, [0.5, 0.5, 0.0], 2))


def test_projection_matches_homogeneous_bruteforce(tiny_intrinsics):
    rng = np.random.default_rng(9)
    K4 = np.eye(4)
    K4[:3, :3] = tiny_intrinsics.matrix()
    for _ in range(1000):
        pose = make_pose(rotation_about(rng.normal(size=3), rng.uniform(-3, 3)),
                         rng.normal(size=3))
        p = rng.normal(size=3) * 3
        T = np.eye(4)
        T[:3, :3] = pose.rotation
        T[:3, 3] = pose.translation
        hom = K4 @ T @ np.append(p, 1.0)
        if abs(hom[2]) < 0.05:  # keep the projection well-conditioned
            continue
        u_ref, v_ref = hom[0] / hom[2], hom[1] / hom[2]
        u, v, z = project_point(tiny_intrinsics, pose, SparsePoint(0, p, 2))
        assert abs(u - u_ref) < 1e-9 and abs(v - v_ref) < 1e-9
        assert abs(z - hom[2]) < 1e-12


def test_project_positions_matches_scalar(tiny_intrinsics):
    rng = np.random.default_rng(1)
    pose = make_pose(rotation_about([1, 2, 3], 0.4), [0.1, 0.2, 0.3])
    pts = rng.normal(size=(20, 3)) + [0, 0, 3]
    u, v, z = project_positions(tiny_intrinsics, pose, pts)
    for i in range(20):
        ui, vi, zi = project_point(tiny_intrinsics, pose, SparsePoint(i, pts[i], 2))
        assert abs(u[i] - ui) < 1e-12 and abs(v[i] - vi) < 1e-12 and abs(z[i] - zi) < 1e-12
