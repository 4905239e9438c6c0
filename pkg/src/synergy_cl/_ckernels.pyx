# Direct cross-correlation kernels. Inputs arrive already zero-padded.
# Accumulation order for the forward pass is (c, ki, kj) per output element,
# starting from 0.0 with the bias added last; _pykernels follows the same
# order so forward outputs match bit for bit.
import numpy as np

cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def conv2d_forward(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                   floating[::1] b, int stride):
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (xp.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (xp.shape[3] - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((n_batch, c_out, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, i, j, c, ki, kj, r0, s0
    cdef floating acc
    with nogil:
        for n in range(n_batch):
            for o in range(c_out):
                for i in range(ho):
                    r0 = i * stride
                    for j in range(wo):
                        s0 = j * stride
                        acc = 0.0
                        for c in range(c_in):
                            for ki in range(kh):
                                for kj in range(kw):
                                    acc = acc + w[o, c, ki, kj] * xp[n, c, r0 + ki, s0 + kj]
                        out[n, o, i, j] = acc + b[o]
    return out_arr


def conv2d_grad_input(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] w,
                      Py_ssize_t hp, Py_ssize_t wp, int stride):
    cdef Py_ssize_t n_batch = gout.shape[0], c_out = gout.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t c_in = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    dtype = np.float64 if floating is double else np.float32
    dxp_arr = np.zeros((n_batch, c_in, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t n, o, i, j, c, ki, kj, r0, s0
    cdef floating g
    with nogil:
        for n in range(n_batch):
            for o in range(c_out):
                for i in range(ho):
                    r0 = i * stride
                    for j in range(wo):
                        s0 = j * stride
                        g = gout[n, o, i, j]
                        if g == 0.0:
                            continue
                        for c in range(c_in):
                            for ki in range(kh):
                                for kj in range(kw):
                                    dxp[n, c, r0 + ki, s0 + kj] += g * w[o, c, ki, kj]
    return dxp_arr


def conv2d_grad_weight(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] gout,
                       Py_ssize_t kh, Py_ssize_t kw, int stride):
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t c_out = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    dtype = np.float64 if floating is double else np.float32
    dw_arr = np.zeros((c_out, c_in, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t n, o, i, j, c, ki, kj
    cdef floating acc
    with nogil:
        for o in range(c_out):
            for c in range(c_in):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for n in range(n_batch):
                            for i in range(ho):
                                for j in range(wo):
                                    acc = acc + gout[n, o, i, j] * xp[n, c, i * stride + ki, j * stride + kj]
                        dw[o, c, ki, kj] = acc
    return dw_arr


def conv2d_sq_grad_weight(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] gout,
                          Py_ssize_t kh, Py_ssize_t kw, int stride):
    """Sum over the batch of the squared per-sample weight gradient."""
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t c_out = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    dtype = np.float64 if floating is double else np.float32
    sq_arr = np.zeros((c_out, c_in, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] sq = sq_arr
    cdef Py_ssize_t n, o, i, j, c, ki, kj
    cdef floating acc
    with nogil:
        for o in range(c_out):
            for c in range(c_in):
                for ki in range(kh):
                    for kj in range(kw):
                        for n in range(n_batch):
                            acc = 0.0
                            for i in range(ho):
                                for j in range(wo):
                                    acc = acc + gout[n, o, i, j] * xp[n, c, i * stride + ki, j * stride + kj]
                            sq[o, c, ki, kj] += acc * acc
    return sq_arr
