"""Backend selection for the convolution kernels.

The compiled extension is used when it was built; otherwise the NumPy
fallback. Set ``SYNERGY_CL_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels

if not os.environ.get("SYNERGY_CL_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def get_backend(name=None):
    """Return a kernel module by name (``"cython"`` or ``"numpy"``), or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _contig(a):
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def conv2d_forward(xp, w, b, stride):
    return _impl.conv2d_forward(_contig(xp), _contig(w), _contig(b), int(stride))


def conv2d_grad_input(gout, w, hp, wp, stride):
    return _impl.conv2d_grad_input(_contig(gout), _contig(w), int(hp), int(wp), int(stride))


def conv2d_grad_weight(xp, gout, kh, kw, stride):
    return _impl.conv2d_grad_weight(_contig(xp), _contig(gout), int(kh), int(kw), int(stride))


def conv2d_sq_grad_weight(xp, gout, kh, kw, stride):
    return _impl.conv2d_sq_grad_weight(_contig(xp), _contig(gout), int(kh), int(kw), int(stride))
