"""Episodic (reservoir) buffer and EMA semantic memory."""
from __future__ import annotations

import json
import struct
from typing import NamedTuple

import numpy as np

from .models import ema_update

_BUF_MAGIC = b"SYNBUF01"


class EmptyBufferError(LookupError):
    """Replay was requested from a buffer with no items."""


class ReplayBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    logits: np.ndarray | None
    index: np.ndarray


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class EpisodicBuffer:
    """Fixed-capacity reservoir of (input, label[, logits]) entries.

    The ``n``-th sample offered (``n > capacity``) is kept with probability
    ``capacity / n`` and then overwrites a uniformly chosen slot.
    """

    def __init__(self, capacity, rng=None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.seen = 0
        self.size = 0
        self.rng = _as_rng(rng)
        self.inputs = None
        self.labels = None
        self.logits = None

    def __len__(self):
        return self.size

    def is_empty(self):
        return self.size == 0

    def _allocate(self, x, logits):
        self.inputs = np.zeros((self.capacity,) + np.shape(x), dtype=np.float64)
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        if logits is not None:
            self.logits = np.zeros((self.capacity, len(logits)), dtype=np.float64)

    def add(self, x, y, logits=None):
        """Offer one sample; returns True if it was stored."""
        self.seen += 1
        if self.capacity == 0:
            return False
        if self.seen <= self.capacity:
            slot = self.seen - 1
        else:
            slot = int(self.rng.integers(0, self.seen))
            if slot >= self.capacity:
                return False
        if self.inputs is None:
            self._allocate(x, logits)
        if (logits is None) != (self.logits is None):
            raise ValueError("either every entry stores logits or none does")
        self.inputs[slot] = x
        self.labels[slot] = y
        if logits is not None:
            if len(logits) != self.logits.shape[1]:
                raise ValueError(f"logits of length {len(logits)}, buffer stores {self.logits.shape[1]}")
            self.logits[slot] = logits
        self.size = min(self.seen, self.capacity)
        return True

    def add_batch(self, xs, ys, logits=None):
        """Offer a batch in order; returns how many samples were stored."""
        stored = 0
        for i in range(len(ys)):
            stored += self.add(xs[i], ys[i], None if logits is None else logits[i])
        return stored

    def sample(self, n):
        """Draw ``n`` entries: without replacement if ``n <= len(self)``, else with."""
        if n == 0:
            shape = (0,) + (self.inputs.shape[1:] if self.inputs is not None else ())
            return ReplayBatch(np.zeros(shape), np.zeros(0, dtype=np.int64), None, np.zeros(0, dtype=np.int64))
        if self.is_empty():
            raise EmptyBufferError("cannot sample from an empty buffer")
        if n <= self.size:
            index = self.rng.choice(self.size, size=n, replace=False)
        else:
            index = self.rng.integers(0, self.size, size=n)
        logits = None if self.logits is None else self.logits[index]
        return ReplayBatch(self.inputs[index], self.labels[index], logits, index)

    def contents(self):
        """(inputs, labels, logits) of the filled slots, in slot order."""
        if self.is_empty():
            raise EmptyBufferError("buffer is empty")
        logits = None if self.logits is None else self.logits[:self.size]
        return self.inputs[:self.size], self.labels[:self.size], logits

    def dump(self, path):
        header = {
            "capacity": self.capacity,
            "seen": self.seen,
            "count": self.size,
            "input_shape": list(self.inputs.shape[1:]) if self.inputs is not None else None,
            "logits_dim": int(self.logits.shape[1]) if self.logits is not None else None,
            "rng_state": self.rng.bit_generator.state,
            "bit_generator": type(self.rng.bit_generator).__name__,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_BUF_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            if self.size:
                fh.write(self.inputs[:self.size].astype("<f8").tobytes())
                fh.write(self.labels[:self.size].astype("<i8").tobytes())
                if self.logits is not None:
                    fh.write(self.logits[:self.size].astype("<f8").tobytes())

    @classmethod
    def restore(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != _BUF_MAGIC:
            raise ValueError(f"{path}: not a buffer dump (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        bitgen = getattr(np.random, header["bit_generator"])()
        bitgen.state = header["rng_state"]
        buf = cls(header["capacity"], np.random.Generator(bitgen))
        buf.seen = header["seen"]
        count = header["count"]
        if header["input_shape"] is not None:
            shape = tuple(header["input_shape"])
            per_item = int(np.prod(shape))
            offset = 16 + hlen
            inputs = np.frombuffer(raw, "<f8", count * per_item, offset).reshape((count,) + shape)
            offset += inputs.nbytes
            labels = np.frombuffer(raw, "<i8", count, offset)
            offset += labels.nbytes
            logits = None
            if header["logits_dim"] is not None:
                logits = np.frombuffer(raw, "<f8", count * header["logits_dim"], offset).reshape(count, -1)
                offset += logits.nbytes
            if offset != len(raw):
                raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
            buf.inputs = np.zeros((buf.capacity,) + shape)
            buf.labels = np.zeros(buf.capacity, dtype=np.int64)
            if logits is not None:
                buf.logits = np.zeros((buf.capacity, header["logits_dim"]))
            buf.inputs[:count] = inputs
            buf.labels[:count] = labels
            if logits is not None:
                buf.logits[:count] = logits
        buf.size = count
        return buf


class SemanticMemory:
    """EMA shadow of a working network, updated with probability ``rate`` per call."""

    def __init__(self, working, alpha, rate, rng=None):
        if not (0.0 <= alpha <= 1.0 and 0.0 <= rate <= 1.0):
            raise ValueError("alpha and rate must lie in [0, 1]")
        self.model = working.clone()
        self.alpha = alpha
        self.rate = rate
        self.rng = _as_rng(rng)

    def maybe_update(self, working):
        a = self.rng.random()
        if self.rate > a:
            ema_update(self.model, working, self.alpha)
            return True
        return False
