"""Hot kernels with a numba path and a pure-numpy path.

The active backend is chosen by ``DDRNERF_DISABLE_NUMBA`` (see ``_accel``).
Both implementation modules are importable directly for cross-checking and
benchmarking.
"""

import zlib

import numpy as np

from .. import _accel
from . import _numpy as numpy_impl

if _accel.NUMBA_AVAILABLE:
    from . import _numba as numba_impl
else:  # pragma: no cover
    numba_impl = None

_active = numba_impl if _accel.USE_NUMBA else numpy_impl

BACKEND = _accel.backend_name()

_NAMES = (
    "grid_gather",
    "grid_scatter",
    "render_forward",
    "render_backward",
    "ddr_weight_loss",
    "stratified_t",
    "adam_update",
)


def get_backend(name=None):
    if name is None:
        return _active
    if name == "numba":
        if numba_impl is None:  # pragma: no cover
            raise RuntimeError("numba is not installed")
        return numba_impl
    if name == "numpy":
        return numpy_impl
    raise ValueError(f"unknown backend {name!r}")


grid_gather = _active.grid_gather
grid_scatter = _active.grid_scatter
render_forward = _active.render_forward
render_backward = _active.render_backward
ddr_weight_loss = _active.ddr_weight_loss
stratified_t = _active.stratified_t
adam_update = _active.adam_update

uniform = numpy_impl.uniform
ddr_noise = numpy_impl.ddr_noise
triangle_offset = numpy_impl.triangle_offset


def stream_key(seed, name):
    """64-bit key for an independent counter-based noise stream."""
    tag = zlib.crc32(name.encode()) & 0xFFFFFFFF
    with np.errstate(over="ignore"):
        k = numpy_impl.mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ numpy_impl.mix64(np.uint64(tag)))
    return np.uint64(k)
