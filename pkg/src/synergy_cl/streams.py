"""Continual-learning scenarios: Class-IL, rotated-MNIST, MNIST-360 and GCIL.

A :class:`Stream` yields plain ``(inputs, labels)`` minibatches. Task
structure is visible only through :meth:`Stream.segments`, which the
experiment harness uses for evaluation and for the one baseline that
consumes task boundaries.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .learner import ConfigurationError

log = logging.getLogger(__name__)

SCENARIOS = ("class-il", "rotated-mnist", "mnist-360", "gcil")


def exposes_boundaries(scenario):
    """Whether a scenario may hand task boundaries to the boundary-consuming baseline."""
    return scenario != "mnist-360"


class StreamBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    step: int


def _bilinear_taps(angles, h, w):
    """Source indices and weights of the four bilinear taps, each (len(angles), h*w).

    Taps falling outside the image get weight 0 and a dummy index 0.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    dx = (cols - cx).ravel()
    dyu = (cy - rows).ravel()  # y axis pointing up
    theta = np.deg2rad(angles)[:, None]
    cos, sin = np.cos(theta), np.sin(theta)
    src_r = cy - (cos * dyu - sin * dx)
    src_c = cx + (cos * dx + sin * dyu)
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    taps = []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        taps.append((np.where(valid, rr * w + cc, 0), np.where(valid, wt, 0.0)))
    return taps


def rotate_images(images, angles, chunk=4096):
    """Rotate images counter-clockwise (as displayed) about their centre.

    Bilinear interpolation, zero fill outside the source. ``images`` is
    N x H x W or N x C x H x W; ``angles`` (degrees) is a scalar or length N.
    An angle of exactly 0 returns the input values unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[:, None]
    n, c, h, w = images.shape
    planes = images.reshape(n, c, h * w)
    if np.ndim(angles) == 0 or np.all(np.asarray(angles) == np.ravel(angles)[0]):
        # one angle for the whole batch: shared taps, plain fancy indexing
        out = np.zeros_like(planes)
        for idx, wt in _bilinear_taps(np.ravel(angles)[:1].astype(np.float64), h, w):
            out += wt[0] * planes[:, :, idx[0]]
    else:
        angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (n,))
        out = np.empty_like(planes)
        flat = planes.reshape(-1)
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            # flat offset of every (image, channel) plane in the chunk
            base = (np.arange(start, stop)[:, None] * c + np.arange(c)[None, :]) * (h * w)
            acc = np.zeros((stop - start, c, h * w))
            for idx, wt in _bilinear_taps(angles[start:stop], h, w):
                acc += wt[:, None, :] * flat[base[:, :, None] + idx[:, None, :]]
            out[start:stop] = acc
    out = out.reshape(n, c, h, w)
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class StreamSpec:
    scenario: str = "class-il"
    dataset: str = "mnist"  # "mnist" or "synthetic"
    n_tasks: int = 5
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    # rotated-mnist
    angle_range: tuple = (0.0, 180.0)
    # mnist-360 (reconstructed defaults)
    rounds: int = 3
    sweep: float | None = None  # total degrees; None means one full turn per pseudo-task
    digits: int = 9
    # gcil
    samples_per_task: int = 1000
    max_classes: int = 50
    weighting: str = "uniform"
    gil_seed: int = 1993
    longtail_imbalance: float = 10.0
    # synthetic dataset
    synthetic: dict = field(default_factory=lambda: {
        "classes": 10, "dim": 10, "per_class": 200, "test_per_class": 100, "separation": 10.0})

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.weighting not in ("uniform", "longtail"):
            raise ValueError(f"weighting must be 'uniform' or 'longtail', got {self.weighting!r}")
        object.__setattr__(self, "angle_range", tuple(float(a) for a in self.angle_range))

    def to_dict(self):
        d = asdict(self)
        d["angle_range"] = list(self.angle_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stream field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if "synthetic" in d:
            d["synthetic"] = {**cls().synthetic, **d["synthetic"]}
        return cls(**d)


class Segment(NamedTuple):
    index: int
    batches: Callable[[], Iterator[StreamBatch]]
    chunks: Callable[[], Iterator[tuple]]  # (inputs, labels) of the whole task, for boundary consumers


class Stream:
    """Ordered training stream plus per-task test sets.

    ``boundaries`` is False for scenarios whose task structure must not be
    exposed (MNIST-360); such streams evaluate on a single test set.
    """

    def __init__(self, spec, n_classes, input_shape, n_eval_tasks, boundaries, task_of_class=None):
        self.spec = spec
        self.n_classes = n_classes
        self.input_shape = tuple(input_shape)
        self.n_eval_tasks = n_eval_tasks
        self.boundaries = boundaries
        self.task_of_class = task_of_class
        self._step = 0

    def _segments(self):
        raise NotImplementedError

    def segments(self):
        self._step = 0
        return self._segments()

    def __iter__(self):
        for seg in self.segments():
            yield from seg.batches()

    def test_set(self, task):
        raise NotImplementedError

    def _emit(self, x, y):
        batch = StreamBatch(x, y, self._step)
        self._step += 1
        return batch


def _chunked(x_fn, index, labels, size=2048):
    for start in range(0, len(index), size):
        sel = index[start:start + size]
        yield x_fn(sel), labels[sel]


class ClassILStream(Stream):
    """Disjoint label groups in ascending order, one group per task."""

    def __init__(self, spec, train, test, rng):
        if train.class_count % spec.n_tasks:
            raise ConfigurationError(f"{train.class_count} classes cannot be split evenly into {spec.n_tasks} tasks")
        per = train.class_count // spec.n_tasks
        self.splits = [list(range(t * per, (t + 1) * per)) for t in range(spec.n_tasks)]
        task_of_class = {c: t for t, cs in enumerate(self.splits) for c in cs}
        super().__init__(spec, train.class_count, train.sample_shape, spec.n_tasks, True, task_of_class)
        self.train, self.test, self.rng = train, test, rng
        self._train_idx = [np.flatnonzero(np.isin(train.labels, cs)) for cs in self.splits]
        self._test_idx = [np.flatnonzero(np.isin(test.labels, cs)) for cs in self.splits]

    def _task_batches(self, t):
        idx = self._train_idx[t]
        for _ in range(self.spec.epochs):
            order = idx[self.rng.permutation(len(idx))]
            for start in range(0, len(order), self.spec.batch_size):
                sel = order[start:start + self.spec.batch_size]
                yield self._emit(self.train.inputs[sel], self.train.labels[sel])

    def _segments(self):
        for t in range(self.spec.n_tasks):
            yield Segment(t, lambda t=t: self._task_batches(t),
                          lambda t=t: _chunked(lambda s: self.train.inputs[s], self._train_idx[t], self.train.labels))

    def test_set(self, task):
        idx = self._test_idx[task]
        return self.test.inputs[idx], self.test.labels[idx]


class RotatedStream(Stream):
    """Every task is the full training set rotated by one angle drawn uniformly per task."""

    def __init__(self, spec, train, test, rng):
        super().__init__(spec, train.class_count, train.sample_shape, spec.n_tasks, True)
        self.train, self.test, self.rng = train, test, rng
        lo, hi = spec.angle_range
        self.angles = rng.uniform(lo, hi, spec.n_tasks)
        self._test_cache = {}

    def _task_batches(self, t):
        n = len(self.train)
        for _ in range(self.spec.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, self.spec.batch_size):
                sel = order[start:start + self.spec.batch_size]
                yield self._emit(rotate_images(self.train.inputs[sel], self.angles[t]), self.train.labels[sel])

    def _segments(self):
        for t in range(self.spec.n_tasks):
            yield Segment(t, lambda t=t: self._task_batches(t),
                          lambda t=t: _chunked(lambda s: rotate_images(self.train.inputs[s], self.angles[t]),
                                               np.arange(len(self.train)), self.train.labels))

    def test_set(self, task):
        if task not in self._test_cache:
            self._test_cache[task] = rotate_images(self.test.inputs, self.angles[task])
        return self._test_cache[task], self.test.labels


def blurry360_schedule(labels, rng, digits=9, rounds=3, batch_size=16):
    """Index/pseudo-task schedule for the MNIST-360 stream.

    Digits ``0..digits-1`` are used. Round ``r`` walks the pairs
    ``{p, p+1 mod digits}``. Every digit belongs to two pairs per round and
    gets ``2 * rounds`` independently shuffled full passes over its training
    samples, one per pair it joins. A pair task consumes the next pass of
    both digits, filling each batch in proportion to what remains of each
    pass, and ends as soon as either pass runs out (the rest is dropped).

    Returns a list of ``(pair_task, index_array)`` batches.
    """
    pools = [np.flatnonzero(labels == d) for d in range(digits)]
    passes = [[pool[rng.permutation(len(pool))] for _ in range(2 * rounds)] for pool in pools]
    used = [0] * digits
    schedule = []
    for r in range(rounds):
        for p in range(digits):
            pair = (p, (p + 1) % digits)
            a, b = (passes[d][used[d]] for d in pair)
            for d in pair:
                used[d] += 1
            ia = ib = 0
            task = r * digits + p
            while ia < len(a) and ib < len(b):
                ra, rb = len(a) - ia, len(b) - ib
                na = min(int(round(ra / (ra + rb) * batch_size)), ra)
                nb = min(batch_size - na, rb)
                schedule.append((task, np.concatenate([a[ia:ia + na], b[ib:ib + nb]])))
                ia += na
                ib += nb
    return schedule


class Blurry360Stream(Stream):
    """MNIST-360: consecutive digit pairs with a slowly increasing rotation.

    The rotation of a sample is ``sweep * position / total_samples``, so it
    grows monotonically along the whole stream. By default the sweep is one
    full turn per pseudo-task. Test images (digits below ``digits``) get
    evenly spaced angles over a full turn.
    """

    def __init__(self, spec, train, test, rng):
        super().__init__(spec, spec.digits, train.sample_shape, 1, False)
        self.train, self.test = train, test
        self.schedule = blurry360_schedule(train.labels, rng, spec.digits, spec.rounds, spec.batch_size)
        total = sum(len(ix) for _, ix in self.schedule)
        self.total_samples = total
        sweep = 360.0 * spec.rounds * spec.digits if spec.sweep is None else spec.sweep
        self.angles = sweep * np.arange(total) / total
        self._test = None

    def pair_tasks(self):
        return [t for t, _ in self.schedule]

    def _batches(self):
        pos = 0
        for _, ix in self.schedule:
            ang = self.angles[pos:pos + len(ix)]
            pos += len(ix)
            yield self._emit(rotate_images(self.train.inputs[ix], ang), self.train.labels[ix])

    def _segments(self):
        yield Segment(0, self._batches, lambda: iter(()))

    def test_set(self, task=0):
        if self._test is None:
            idx = np.flatnonzero(self.test.labels < self.spec.digits)
            angles = 360.0 * np.arange(len(idx)) / len(idx)
            self._test = (rotate_images(self.test.inputs[idx], angles), self.test.labels[idx])
        return self._test


def _longtail_counts(k, total, imbalance):
    weights = imbalance ** (-np.arange(k) / max(k - 1, 1))
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    while (counts == 0).any():
        counts[np.argmax(counts)] -= 1
        counts[np.flatnonzero(counts == 0)[0]] += 1
    return counts


def gcil_tasks(labels, class_count, n_tasks=20, samples_per_task=1000, max_classes=50,
               weighting="uniform", gil_seed=1993, imbalance=10.0):
    """Task compositions for the generalized class-incremental stream.

    Per task: class count ~ U{2..max_classes}, a class subset (classes may
    recur across tasks), then ``samples_per_task`` samples split evenly
    (uniform) or with geometrically decaying shares whose largest/smallest
    ratio is ``imbalance`` (longtail). Driven only by ``gil_seed``.
    Returns a list of ``(classes, counts, sample_indices)``.
    """
    if class_count < max_classes:
        raise ValueError(f"dataset has {class_count} classes, GCIL needs at least {max_classes}")
    rng = np.random.default_rng(gil_seed)
    pools = [np.flatnonzero(labels == c) for c in range(class_count)]
    tasks = []
    for _ in range(n_tasks):
        k = int(rng.integers(2, max_classes + 1))
        classes = rng.choice(class_count, size=k, replace=False)
        if weighting == "uniform":
            counts = np.full(k, samples_per_task // k)
            counts[rng.permutation(k)[:samples_per_task % k]] += 1
        else:
            counts = _longtail_counts(k, samples_per_task, imbalance)
        picks = []
        for c, m in zip(classes, counts):
            pool = pools[c]
            replace = m > len(pool)
            if replace:
                log.warning("class %d has %d samples, %d requested; sampling with replacement", c, len(pool), m)
            picks.append(rng.choice(pool, size=int(m), replace=replace))
        tasks.append((classes, counts, np.concatenate(picks)))
    return tasks


class GCILStream(Stream):
    def __init__(self, spec, train, test, rng):
        super().__init__(spec, train.class_count, train.sample_shape, spec.n_tasks, True)
        self.train, self.test, self.rng = train, test, rng
        self.tasks = gcil_tasks(train.labels, train.class_count, spec.n_tasks, spec.samples_per_task,
                                spec.max_classes, spec.weighting, spec.gil_seed, spec.longtail_imbalance)

    def _task_batches(self, t):
        idx = self.tasks[t][2]
        for _ in range(self.spec.epochs):
            order = idx[self.rng.permutation(len(idx))]
            for start in range(0, len(order), self.spec.batch_size):
                sel = order[start:start + self.spec.batch_size]
                yield self._emit(self.train.inputs[sel], self.train.labels[sel])

    def _segments(self):
        for t in range(self.spec.n_tasks):
            yield Segment(t, lambda t=t: self._task_batches(t),
                          lambda t=t: _chunked(lambda s: self.train.inputs[s], self.tasks[t][2], self.train.labels))

    def test_set(self, task):
        idx = np.flatnonzero(np.isin(self.test.labels, self.tasks[task][0]))
        return self.test.inputs[idx], self.test.labels[idx]


_STREAMS = {"class-il": ClassILStream, "rotated-mnist": RotatedStream,
            "mnist-360": Blurry360Stream, "gcil": GCILStream}


def build_stream(spec, train, test, rng=None):
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return _STREAMS[spec.scenario](spec, train, test, rng)


def class_il_stream(train, test, n_tasks, epochs=1, batch=32, rng=None):
    return build_stream(StreamSpec("class-il", n_tasks=n_tasks, epochs=epochs, batch_size=batch), train, test, rng)


def rotated_stream(train, test, n_tasks=20, batch=128, rng=None, angle_range=(0.0, 180.0)):
    spec = StreamSpec("rotated-mnist", n_tasks=n_tasks, batch_size=batch, angle_range=angle_range)
    return build_stream(spec, train, test, rng)


def blurry360_stream(train, test, batch=16, rng=None, rounds=3, sweep=None):
    spec = StreamSpec("mnist-360", batch_size=batch, rounds=rounds, sweep=sweep)
    return build_stream(spec, train, test, rng)


def gcil_stream(train, test, n_tasks=20, samples_per_task=1000, max_classes=50, weighting="uniform",
                gil_seed=1993, batch=32, rng=None):
    spec = StreamSpec("gcil", n_tasks=n_tasks, samples_per_task=samples_per_task, max_classes=max_classes,
                      weighting=weighting, gil_seed=gil_seed, batch_size=batch)
    return build_stream(spec, train, test, rng)


def batch_checksum(batch):
    return hashlib.sha256(np.ascontiguousarray(batch.inputs, dtype="<f8").tobytes()).hexdigest()


def steps_per_task(n_samples, batch_size, epochs=1):
    return epochs * math.ceil(n_samples / batch_size)
