"""Networks, flat parameter addressing and filter groups.

Parameters are ordered layer by layer, weight before bias. Dense weights are
stored (out, in) and conv weights (C_out, C_in, kH, kW), so a conv filter
(one output channel's kernel) is a contiguous block of the flat vector.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE, DimensionError, Tensor, conv2d, flatten, linear, relu

_CKPT_MAGIC = b"SYNCKPT1"


class ShapeError(DimensionError):
    """Two networks (or a network and an array) are not structurally aligned."""


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=DEFAULT_DTYPE):
        if in_features < 1 or out_features < 1:
            raise ValueError("dense dimensions must be positive")
        self.in_features = in_features
        self.out_features = out_features
        rng = _as_rng(rng)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), True, dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features), True, dtype)

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def descriptor(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d:
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=DEFAULT_DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = _as_rng(rng)
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(rng.uniform(-bound, bound, shape), True, dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, out_channels), True, dtype)

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def descriptor(self):
        return {"type": self.kind, "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel_size, "stride": self.stride, "pad": self.padding}


class ReLU:
    kind = "relu"
    params: list = []

    def forward(self, x):
        return relu(x)

    def descriptor(self):
        return {"type": self.kind}


class Flatten:
    kind = "flatten"
    params: list = []

    def forward(self, x):
        return flatten(x)

    def descriptor(self):
        return {"type": self.kind}


def layer_from_descriptor(desc, dtype=DEFAULT_DTYPE):
    kind = desc["type"]
    if kind == "dense":
        return Dense(desc["in"], desc["out"], rng=0, dtype=dtype)
    if kind == "conv2d":
        return Conv2d(desc["in"], desc["out"], desc["k"], desc["stride"], desc["pad"], rng=0, dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer type {kind!r}")


@dataclass(frozen=True)
class ParamId:
    layer: int
    role: str  # "weight" or "bias"


class Network:
    def __init__(self, layers, input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def param_ids(self):
        ids = []
        for i, layer in enumerate(self.layers):
            if layer.params:
                ids += [ParamId(i, "weight"), ParamId(i, "bias")]
        return ids

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(DEFAULT_DTYPE)

    def forward(self, x, capture=False):
        """Run the layers in order.

        With ``capture=True`` also return ``[(layer, input, output), ...]`` for
        every parametrized layer, used for exact per-sample gradients.
        """
        h = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if len(self.input_shape) == 1 and h.data.ndim > 2:
            h = flatten(h)  # image batches into an MLP
        records = []
        for layer in self.layers:
            out = layer.forward(h)
            if capture and layer.params:
                records.append((layer, h, out))
            h = out
        return (h, records) if capture else h

    __call__ = forward

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def descriptors(self):
        return [layer.descriptor() for layer in self.layers]

    def clone(self):
        twin = Network([layer_from_descriptor(d, self.dtype) for d in self.descriptors()], self.input_shape)
        for dst, src in zip(twin.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return twin

    def flat(self):
        params = self.parameters()
        if not params:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([p.data.ravel() for p in params])

    def load_flat(self, vector):
        vector = np.asarray(vector)
        if vector.shape != (self.n_params,):
            raise ShapeError(f"flat vector of length {vector.size} for a network with {self.n_params} parameters")
        offset = 0
        for p in self.parameters():
            p.data = vector[offset:offset + p.size].reshape(p.shape).astype(p.dtype, copy=True)
            offset += p.size

    def param_slices(self):
        """Flat-vector slice of every parameter, in parameter order."""
        slices, offset = [], 0
        for p in self.parameters():
            slices.append(slice(offset, offset + p.size))
            offset += p.size
        return slices

    def weight_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.params]

    def filter_map(self):
        return FilterMap.from_network(self)

    def same_structure(self, other):
        return (self.descriptors() == other.descriptors()
                and [p.shape for p in self.parameters()] == [p.shape for p in other.parameters()])


def build_mlp(input_dim, classes, hidden=100, rng=None, dtype=DEFAULT_DTYPE):
    """Two hidden ReLU layers of ``hidden`` units."""
    if input_dim < 1 or classes < 1 or hidden < 1:
        raise ValueError("dimensions must be positive")
    rng = _as_rng(rng)
    return Network([
        Dense(input_dim, hidden, rng, dtype), ReLU(),
        Dense(hidden, hidden, rng, dtype), ReLU(),
        Dense(hidden, classes, rng, dtype),
    ], input_shape=(input_dim,))


def build_small_cnn(channels, classes, image_size=28, rng=None, dtype=DEFAULT_DTYPE):
    """Two strided 3x3 convolutions and a linear head.

    Spatial sizes for a 28x28 input: 28 -> 14 (conv 8, stride 2, pad 1)
    -> 7 (conv 16, stride 2, pad 1) -> flatten 16*7*7 = 784 -> classes.
    """
    rng = _as_rng(rng)
    s1 = (image_size + 2 - 3) // 2 + 1
    s2 = (s1 + 2 - 3) // 2 + 1
    return Network([
        Conv2d(channels, 8, 3, stride=2, padding=1, rng=rng, dtype=dtype), ReLU(),
        Conv2d(8, 16, 3, stride=2, padding=1, rng=rng, dtype=dtype), ReLU(),
        Flatten(),
        Dense(16 * s2 * s2, classes, rng, dtype),
    ], input_shape=(channels, image_size, image_size))


def ema_update(target, source, alpha):
    """In place: every target parameter becomes ``alpha * target + (1 - alpha) * source``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not target.same_structure(source):
        raise ShapeError("ema_update between structurally different networks")
    beta = 1.0 - alpha
    for t, s in zip(target.parameters(), source.parameters()):
        t.data = alpha * t.data + beta * s.data


class FilterMap:
    """Grouping of flat parameter indices into conv filters and singletons.

    ``segments`` lists ``(start, n_filters, filter_size)`` for every conv
    weight; everything else (dense weights, all biases) is a singleton.
    """

    def __init__(self, n_params, segments):
        self.n_params = n_params
        self.segments = list(segments)

    @classmethod
    def from_network(cls, net):
        segments, offset = [], 0
        for layer in net.layers:
            for role, p in zip(("weight", "bias"), layer.params):
                if layer.kind == "conv2d" and role == "weight":
                    n_filters = p.shape[0]
                    segments.append((offset, n_filters, p.size // n_filters))
                offset += p.size
        return cls(offset, segments)

    def groups(self):
        """Group id of every flat index; conv filters share an id."""
        ids = np.empty(self.n_params, dtype=np.int64)
        covered = np.zeros(self.n_params, dtype=bool)
        next_id = 0
        for start, n_filters, size in self.segments:
            stop = start + n_filters * size
            ids[start:stop] = next_id + np.repeat(np.arange(n_filters), size)
            covered[start:stop] = True
            next_id += n_filters
        rest = np.flatnonzero(~covered)
        ids[rest] = next_id + np.arange(rest.size)
        return ids

    def group_sizes(self):
        return np.bincount(self.groups())

    def filter_means(self, values):
        """Replace every conv-filter block of ``values`` by its mean."""
        values = np.asarray(values)
        if values.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} entries, got {values.shape}")
        out = values.copy()
        for start, n_filters, size in self.segments:
            stop = start + n_filters * size
            block = values[start:stop].reshape(n_filters, size)
            out[start:stop] = np.repeat(block.mean(axis=1), size)
        return out


def save_checkpoint(path, net, extras=None):
    """Write a JSON header followed by little-endian float64 parameters.

    ``extras`` maps names to 1-d arrays appended after the parameters (for
    example the aggregated Fisher diagonal).
    """
    extras = {k: np.asarray(v, dtype="<f8").ravel() for k, v in (extras or {}).items()}
    header = {
        "layers": net.descriptors(),
        "input_shape": list(net.input_shape) if net.input_shape else None,
        "param_counts": [int(p.size) for p in net.parameters()],
        "extras": {k: int(v.size) for k, v in extras.items()},
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(net.flat().astype("<f8").tobytes())
        for v in extras.values():
            fh.write(v.tobytes())


def load_checkpoint(path, dtype=DEFAULT_DTYPE):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    n_params = sum(header["param_counts"])
    n_extra = sum(header["extras"].values())
    if payload.size != n_params + n_extra:
        raise ValueError(f"{path}: payload has {payload.size} values, header declares {n_params + n_extra}")
    net = Network([layer_from_descriptor(d, dtype) for d in header["layers"]], header["input_shape"])
    if [p.size for p in net.parameters()] != header["param_counts"]:
        raise ValueError(f"{path}: parameter counts do not match the layer descriptors")
    net.load_flat(payload[:n_params])
    extras, offset = {}, n_params
    for name, count in header["extras"].items():
        extras[name] = payload[offset:offset + count].copy()
        offset += count
    return net, extras
