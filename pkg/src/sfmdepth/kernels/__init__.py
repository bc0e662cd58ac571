"""Hot-kernel dispatch between the numba and numpy backends."""

from ..backend import NUMBA_ENABLED, active_backend
from . import _numpy

if NUMBA_ENABLED:
    from . import _numba as _impl
else:
    _impl = _numpy

bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
im2col = _impl.im2col
im2col_out = _impl.im2col_out
col2im = _impl.col2im
col2im_out = _impl.col2im_out
march_rays = _impl.march_rays

# the vectorized distance field is numpy-only (also used as a test oracle
# and for surface normals); the jitted scalar twin lives inside march_rays
sdf_points = _numpy.sdf_points

__all__ = [
    "active_backend",
    "bilinear_forward",
    "bilinear_backward",
    "im2col",
    "im2col_out",
    "col2im",
    "col2im_out",
    "march_rays",
    "sdf_points",
]
