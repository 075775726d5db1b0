"""PC-Net vessel segmentation toolkit.

A pyramid squeeze-and-excitation U-Net with a coarse-to-fine residual
decoder, built on a self-contained numpy autodiff engine, plus the 2D/3D
data pipelines, evaluation metrics and ablation-ladder tooling needed to
run it end to end on synthetic tubular data.
"""

import ctypes as _ctypes
import os as _os

# Two thread pools (BLAS + JIT kernels) share the CPU; with default spin
# waits each pool's idle workers starve the other's active ones.  Must be
# set before numpy/numba load their runtimes; user-set values win.
_os.environ.setdefault("OMP_WAIT_POLICY", "passive")
_os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "1")


def _tune_allocator():
    # conv buffers run to hundreds of MB; glibc's default mmap threshold
    # makes every one a fresh mapping that page-faults at ~2 GB/s.  Keep
    # large blocks on the reusable heap instead.
    try:
        libc = _ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)   # M_TRIM_THRESHOLD
    except OSError:  # non-glibc platform; purely a performance tweak
        pass


_tune_allocator()

from .tensor import Tensor, Tape, recording, backward, ShapeError, DtypeError

__all__ = ["Tensor", "Tape", "recording", "backward", "ShapeError", "DtypeError"]
__version__ = "0.1.0"
