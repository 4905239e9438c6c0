"""Accuracy matrix summaries, calibration, task-probability bias and layer drift."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .learner import ConfigurationError
from .models import ShapeError


class TaskMatrix:
    """``T[i, j]``: accuracy (percent) on task j after training through task i; NaN above the diagonal."""

    def __init__(self, n_tasks):
        if n_tasks < 1:
            raise ValueError("a task matrix needs at least one task")
        self.T = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"task matrix must be square, got shape {values.shape}")
        m = cls(values.shape[0])
        for i in range(m.n_tasks):
            m.T[i, :i + 1] = values[i, :i + 1]
        m._check()
        return m

    @property
    def n_tasks(self):
        return self.T.shape[0]

    def set_row(self, i, accuracies):
        accuracies = np.asarray(accuracies, dtype=np.float64)
        if accuracies.shape != (i + 1,):
            raise ValueError(f"row {i} needs {i + 1} accuracies, got {accuracies.shape}")
        self.T[i, :i + 1] = accuracies
        self._check()

    def _check(self):
        lower = self.T[np.tril_indices(self.n_tasks)]
        lower = lower[~np.isnan(lower)]
        if ((lower < 0) | (lower > 100)).any():
            raise ValueError("accuracies must lie in [0, 100]")

    @property
    def final_row(self):
        return self.T[-1]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{j}" for j in range(self.n_tasks)])
        for i, row in enumerate(self.T):
            writer.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))[1:]
        values = np.array([[np.nan if v == "" else float(v) for v in r[1:]] for r in rows])
        return cls.from_array(np.nan_to_num(values, nan=0.0)) if len(values) else cls(1)


def _as_matrix(T):
    return T.T if isinstance(T, TaskMatrix) else np.asarray(T, dtype=np.float64)


def average_accuracy(T):
    """Mean accuracy over all tasks after the last one was learned."""
    m = _as_matrix(T)
    row = m[-1]
    if np.isnan(row).any():
        raise ValueError("final row of the task matrix is not fully populated")
    return float(row.mean())


def stability(T):
    """Mean accuracy on tasks 0..n-2 after training on all n tasks."""
    m = _as_matrix(T)
    if m.shape[0] < 2:
        raise ValueError("stability needs at least two tasks")
    return float(m[-1, :-1].mean())


def plasticity(T):
    """Mean accuracy of each task right after it was learned (full diagonal)."""
    return float(np.diag(_as_matrix(T)).mean())


def tradeoff(s, p):
    """Harmonic mean ``2SP / (S + P)``; 0 when both are 0."""
    if s + p == 0:
        return 0.0
    return 2.0 * s * p / (s + p)


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin, NaN when empty
    accuracy: np.ndarray  # mean accuracy per bin, NaN when empty

    def to_dict(self):
        clean = lambda a: [None if np.isnan(v) else float(v) for v in a]
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "confidence": clean(self.confidence), "accuracy": clean(self.accuracy)}


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probabilities must be N x C, got shape {probs.shape}")
    if len(probs) and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1 within 1e-6")
    return probs


def ece(probs, labels, bins=10):
    """Expected calibration error over ``bins`` equal-width confidence bins on (0, 1].

    Returns ``(ece, ReliabilityBins)``. Bin k covers ``(k/bins, (k+1)/bins]``.
    """
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    conf = probs.max(axis=1) if len(probs) else np.zeros(0)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64) if len(probs) else np.zeros(0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.bincount(which, weights=conf, minlength=bins) / counts
        mean_acc = np.bincount(which, weights=correct, minlength=bins) / counts
    n = len(conf)
    gaps = np.where(counts > 0, np.abs(np.nan_to_num(mean_acc) - np.nan_to_num(mean_conf)), 0.0)
    value = float((counts / n * gaps).sum()) if n else 0.0
    return value, ReliabilityBins(edges, counts, mean_conf, mean_acc)


def task_probabilities(probs, task_of_class):
    """Per task: mean over samples of the softmax mass on that task's classes."""
    probs = _check_probs(probs)
    n_classes = probs.shape[1]
    missing = [c for c in range(n_classes) if c not in task_of_class]
    if missing:
        raise ConfigurationError(f"classes without a task: {missing}")
    n_tasks = max(task_of_class.values()) + 1
    onehot = np.zeros((n_classes, n_tasks))
    onehot[np.arange(n_classes), [task_of_class[c] for c in range(n_classes)]] = 1.0
    return (probs @ onehot).mean(axis=0) if len(probs) else np.zeros(n_tasks)


def _layer_vectors(net):
    vecs = []
    for i in net.weight_layers():
        layer = net.layers[i]
        vecs.append(np.concatenate([p.data.ravel().astype(np.float64) for p in layer.params]))
    return vecs


def _cosine(a, b):
    if np.array_equal(a, b):
        return 1.0
    za, zb = not a.any(), not b.any()
    if za or zb:
        return 1.0 if za and zb else 0.0
    a = a / np.abs(a).max()
    b = b / np.abs(b).max()
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def layer_drift(model_a, model_b):
    """Mean over weight-bearing layers of the cosine similarity of max-abs normalised parameters."""
    if not model_a.same_structure(model_b):
        raise ShapeError("layer_drift between structurally different networks")
    sims = [_cosine(a, b) for a, b in zip(_layer_vectors(model_a), _layer_vectors(model_b))]
    return float(np.mean(sims))


def drift_matrix(snapshots):
    """Pairwise :func:`layer_drift` between network snapshots (e.g. one per task end)."""
    n = len(snapshots)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = layer_drift(snapshots[i], snapshots[j])
    return out
