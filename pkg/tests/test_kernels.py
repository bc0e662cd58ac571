"""Both kernel backends must agree; the numpy path is the reference."""

import numpy as np
import pytest

from sfmdepth.kernels import _numba, _numpy


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_bilinear_backends_agree(rng):
    grid = rng.random((20, 30))
    u = rng.uniform(-2.0, 31.0, 500)
    v = rng.uniform(-2.0, 21.0, 500)
    o1, i1, m1 = _numpy.bilinear_forward(grid, u, v)
    o2, i2, m2 = _numba.bilinear_forward(grid, u, v)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_allclose(o1, o2, rtol=0, atol=1e-14)
    np.testing.assert_allclose(m1, m2, rtol=0, atol=0)

    d = rng.normal(size=500)
    g1, du1, dv1 = _numpy.bilinear_backward(grid, u, v, d)
    g2, du2, dv2 = _numba.bilinear_backward(grid, u, v, d)
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(du1, du2, rtol=0, atol=1e-14)
    np.testing.assert_allclose(dv1, dv2, rtol=0, atol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_backends_agree(rng, stride, dtype):
    x = rng.normal(size=(3, 5, 12, 14)).astype(dtype)
    c1 = _numpy.im2col(x, 3, 3, stride, 1)
    c2 = _numba.im2col(x, 3, 3, stride, 1)
    np.testing.assert_array_equal(c1, c2)

    cols = rng.normal(size=c1.shape).astype(dtype)
    y1 = _numpy.col2im(cols, 3, 5, 12, 14, 3, 3, stride, 1)
    y2 = _numba.col2im(cols, 3, 5, 12, 14, 3, 3, stride, 1)
    np.testing.assert_allclose(y1, y2, rtol=0, atol=1e-4 if dtype == np.float32 else 1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(2, 3, 9, 11))
    for stride in (1, 2):
        cols = _numpy.im2col(x, 3, 3, stride, 1)
        w = rng.normal(size=cols.shape)
        lhs = float((cols * w).sum())
        back = _numpy.col2im(w, 2, 3, 9, 11, 3, 3, stride, 1)
        rhs = float((x * back).sum())
        assert abs(lhs - rhs) < 1e-9 * max(abs(lhs), 1.0)


def test_out_variants_match_allocating(rng):
    x = rng.normal(size=(2, 4, 10, 12)).astype(np.float32)
    cols_ref = _numpy.im2col(x, 3, 3, 1, 1)
    buf = np.full_like(cols_ref, 7.0)
    _numba.im2col_out(x, 3, 3, 1, 1, buf)
    np.testing.assert_array_equal(buf, cols_ref)
    buf2 = np.full_like(cols_ref, 7.0)
    _numpy.im2col_out(x, 3, 3, 1, 1, buf2)
    np.testing.assert_array_equal(buf2, cols_ref)

    cols = rng.normal(size=cols_ref.shape).astype(np.float32)
    ref = _numpy.col2im(cols, 2, 4, 10, 12, 3, 3, 1, 1)
    out = np.full((2, 4, 10, 12), -3.0, np.float32)
    _numba.col2im_out(cols, 2, 4, 10, 12, 3, 3, 1, 1, out)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-5)


def test_march_rays_backends_agree():
    from sfmdepth.synthetic import SceneConfig, camera_rays, make_scene

    cfg = SceneConfig(width=48, height=32, focal=16.0, n_frames=8)
    scene, traj = make_scene(5, cfg)
    dirs, _ = camera_rays(cfg.intrinsics(), traj[3])
    origin = traj[3].center()
    args = (origin, dirs, 0.0, 4.0 * cfg.length, cfg.march_tol, 512,
            scene.step_scale, scene.axis_par, scene.tube_par, scene.bumps)
    t1, h1 = _numpy.march_rays(*args)
    t2, h2 = _numba.march_rays(*args)
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_allclose(t1, t2, rtol=0, atol=1e-10)


def test_sdf_scalar_matches_vectorized():
    from sfmdepth.kernels._numba import _sdf_one
    from sfmdepth.synthetic import SceneConfig, make_scene

    scene, _ = make_scene(1, SceneConfig(width=48, height=32, focal=16.0, n_frames=8))
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(50, 3)) + np.array([0, 0, 6.0])
    ref = _numpy.sdf_points(pts, scene.axis_par, scene.tube_par, scene.bumps)
    got = np.array([_sdf_one(p[0], p[1], p[2], scene.axis_par, scene.tube_par,
                             scene.bumps) for p in pts])
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_backend_flag_selects_numpy(monkeypatch):
    import importlib
    import subprocess
    import sys

    code = ("import sfmdepth.kernels as k, sfmdepth.backend as b;"
            "print(b.active_backend(), k.im2col is k._numpy.im2col)")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"SFMDEPTH_DISABLE_NUMBA": "1", "PATH": "/usr/bin:/bin"},
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert out.stdout.split() == ["numpy", "True"]
