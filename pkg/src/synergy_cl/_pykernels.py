"""NumPy implementations of the convolution kernels.

Same signatures as the compiled ``_ckernels`` module. The forward pass
accumulates in (c, ki, kj) order from zero and adds the bias last, which
makes it bit-identical to the compiled version. The gradient kernels reduce
with ``einsum`` and agree with the compiled ones to rounding error only.
"""
import numpy as np


def _window(xp, ki, kj, ho, wo, stride):
    return xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]


def conv2d_forward(xp, w, b, stride):
    n_batch, c_in = xp.shape[:2]
    c_out, _, kh, kw = w.shape
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n_batch, c_out, ho, wo), dtype=xp.dtype)
    for c in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                patch = _window(xp, ki, kj, ho, wo, stride)[:, c]
                out += w[None, :, c, ki, kj, None, None] * patch[:, None]
    out += b[None, :, None, None]
    return out


def conv2d_grad_input(gout, w, hp, wp, stride):
    n_batch, _, ho, wo = gout.shape
    c_in, kh, kw = w.shape[1:]
    dxp = np.zeros((n_batch, c_in, hp, wp), dtype=gout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.einsum("noij,oc->ncij", gout, w[:, :, ki, kj])
            dxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += contrib
    return dxp


def conv2d_grad_weight(xp, gout, kh, kw, stride):
    c_out, ho, wo = gout.shape[1:]
    dw = np.empty((c_out, xp.shape[1], kh, kw), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dw[:, :, ki, kj] = np.einsum("noij,ncij->oc", gout, _window(xp, ki, kj, ho, wo, stride))
    return dw


def conv2d_sq_grad_weight(xp, gout, kh, kw, stride):
    c_out, ho, wo = gout.shape[1:]
    sq = np.empty((c_out, xp.shape[1], kh, kw), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            per_sample = np.einsum("noij,ncij->noc", gout, _window(xp, ki, kj, ho, wo, stride))
            sq[:, :, ki, kj] = np.square(per_sample).sum(axis=0)
    return sq
