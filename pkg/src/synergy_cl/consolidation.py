"""Fisher importance, its stochastic EMA, filter adjustment and the quadratic penalty."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .memory import EmptyBufferError
from .models import ShapeError
from .tensor import Tape, Tensor, add, mul, softmax_cross_entropy, sub, tsum


@contextmanager
def _frozen(net):
    params = net.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _chunk_sq_grads(net, x, y):
    """Per-parameter sums over the chunk of squared per-sample gradients of log p(y|x)."""
    inp = Tensor(x, requires_grad=True, dtype=net.dtype)
    with _frozen(net):
        with Tape() as tape:
            logits, records = net.forward(inp, capture=True)
            loss = softmax_cross_entropy(logits, y, reduction="sum")
        tape.backward(loss)
    sums = []
    for layer, layer_in, layer_out in records:
        delta = layer_out.grad
        if layer.kind == "dense":
            d2 = np.square(delta)
            sums.append(d2.T @ np.square(layer_in.data))
            sums.append(d2.sum(axis=0))
        elif layer.kind == "conv2d":
            a = layer_in.data
            p = layer.padding
            xp = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a
            k = layer.kernel_size
            sums.append(kernels.conv2d_sq_grad_weight(xp, delta, k, k, layer.stride))
            sums.append(np.square(delta.sum(axis=(2, 3))).sum(axis=0))
        else:
            raise TypeError(f"no per-sample gradient rule for layer {layer.kind!r}")
    return np.concatenate([s.ravel() for s in sums])


def fisher_diagonal(net, inputs, labels, batch_size=512):
    """Empirical diagonal Fisher: mean over samples of the squared gradient of log p(y|x).

    Per-sample gradients are exact: each sample's backpropagated error and
    layer input are combined before squaring, chunk by chunk.
    """
    n = len(labels)
    if n == 0:
        raise EmptyBufferError("no samples to evaluate the Fisher information on")
    total = np.zeros(net.n_params, dtype=np.float64)
    for start in range(0, n, batch_size):
        total += _chunk_sq_grads(net, inputs[start:start + batch_size], labels[start:start + batch_size])
    return total / n


def fisher_from_chunks(net, chunks):
    """Same as :func:`fisher_diagonal` over an iterable of ``(inputs, labels)`` chunks."""
    total = np.zeros(net.n_params, dtype=np.float64)
    count = 0
    for x, y in chunks:
        if len(y):
            total += _chunk_sq_grads(net, x, y)
            count += len(y)
    if count == 0:
        raise EmptyBufferError("no samples to evaluate the Fisher information on")
    return total / count


def estimate_fisher(net, buffer, batch_size=512):
    """Diagonal empirical Fisher of ``net`` over every sample held in ``buffer``."""
    x, y, _ = buffer.contents()
    return fisher_diagonal(net, x, y, batch_size)


def adjust_fisher(f_star, filter_map):
    """Give every parameter of a conv filter that filter's mean importance."""
    return filter_map.filter_means(f_star)


class FisherState:
    """Running (stochastically updated) Fisher diagonal.

    The first accepted estimate is copied in directly; later ones are merged
    as ``alpha * f_star + (1 - alpha) * F``. With ``strict_ema=True`` the
    merge starts from the all-zero initial state instead.
    """

    def __init__(self, n_params, alpha, rate, rng=None, filter_map=None, adjust=True, strict_ema=False):
        if not (0.0 <= alpha <= 1.0 and 0.0 <= rate <= 1.0):
            raise ValueError("alpha and rate must lie in [0, 1]")
        self.f_star = np.zeros(n_params, dtype=np.float64)
        self.alpha = alpha
        self.rate = rate
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.filter_map = filter_map
        self.adjust = adjust
        self.strict_ema = strict_ema
        self.initialized = False
        self.updates = 0
        self._f_adj = None

    def gate(self):
        """One uniform draw; True if an update should happen this step."""
        return self.rate > self.rng.random()

    def update(self, fisher):
        fisher = np.asarray(fisher, dtype=np.float64)
        if fisher.shape != self.f_star.shape:
            raise ShapeError(f"Fisher estimate of shape {fisher.shape}, state holds {self.f_star.shape}")
        if not self.initialized and not self.strict_ema:
            self.f_star = fisher.copy()
        else:
            self.f_star = self.alpha * self.f_star + (1.0 - self.alpha) * fisher
        self.initialized = True
        self.updates += 1
        self._f_adj = None

    def maybe_update(self, model, buffer, batch_size=512):
        if not self.gate() or buffer.is_empty():
            return False
        self.update(estimate_fisher(model, buffer, batch_size))
        return True

    @property
    def f_adj(self):
        if self._f_adj is None:
            if self.adjust and self.filter_map is not None:
                self._f_adj = adjust_fisher(self.f_star, self.filter_map)
            else:
                self._f_adj = self.f_star
        return self._f_adj


def consolidation_loss(theta_w, theta_s, f_adj):
    """``sum_i f_adj[i] * (theta_w[i] - theta_s[i])**2``; differentiable in ``theta_w`` only."""
    f_adj = np.asarray(f_adj)
    if f_adj.shape != (theta_w.n_params,):
        raise ShapeError(f"importance vector of length {f_adj.size} for {theta_w.n_params} parameters")
    if not theta_w.same_structure(theta_s):
        raise ShapeError("consolidation between structurally different networks")
    total = None
    for sl, w, s in zip(theta_w.param_slices(), theta_w.parameters(), theta_s.parameters()):
        diff = sub(w, s.data)
        term = tsum(mul(mul(diff, diff), f_adj[sl].reshape(w.shape)))
        total = term if total is None else add(total, term)
    return total
