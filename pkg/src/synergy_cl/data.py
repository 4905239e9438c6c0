"""Dataset loading (IDX), synthetic fixtures and normalization."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed IDX file."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray  # N x C x H x W, or N x D
    labels: np.ndarray  # int64, length N
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, index, name=None):
        return LabeledDataset(self.inputs[index], self.labels[index], self.class_count, name or self.name)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(raw, path, magic, ndim):
    need = 4 * (ndim + 1)
    if len(raw) < need:
        raise FormatError(f"{path}: header truncated at byte {len(raw)}, need {need} bytes")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "i" * ndim, raw[4:need])
    expected = need + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} "
                          f"(data ends at byte {len(raw)})")
    return dims, need


def load_idx(images_path, labels_path, name="mnist", class_count=None):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img_raw, lab_raw = _read(images_path), _read(labels_path)
    (n_img, rows, cols), off_i = _parse_header(img_raw, images_path, IMAGE_MAGIC, 3)
    (n_lab,), off_l = _parse_header(lab_raw, labels_path, LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"count mismatch at byte 4: {images_path} has {n_img} images, "
                          f"{labels_path} has {n_lab} labels")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=off_i).reshape(n_img, 1, rows, cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=off_l).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n_lab else 10
    return LabeledDataset(pixels / 255.0, labels, class_count, name)


def write_idx(ds, images_path, labels_path):
    """Inverse of :func:`load_idx` for [0, 1] images of shape N x 1 x H x W (or N x H x W)."""
    imgs = ds.inputs.reshape(len(ds), ds.inputs.shape[-2], ds.inputs.shape[-1])
    pixels = np.rint(imgs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _locate(data_dir, stem):
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        for sub in ("", "mnist", "MNIST", os.path.join("MNIST", "raw")):
            path = os.path.join(data_dir, sub, cand)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"MNIST file {stem} not found under {data_dir}")


def load_mnist(data_dir, split="train"):
    images, labels = (_locate(data_dir, s) for s in _MNIST_NAMES[split])
    return load_idx(images, labels, name=f"mnist-{split}", class_count=10)


def synthetic_gaussians(classes, dim, per_class, separation=10.0, seed=0, clip=4.0):
    """Isotropic unit-variance blobs centred at ``separation * e_c``.

    Raw values are clipped to ``[-clip, separation + clip]`` and then mapped
    linearly onto [0, 1] using those bounds.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < classes:
        raise ValueError(f"dim ({dim}) must be at least the class count ({classes})")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    centers = np.zeros((classes, dim))
    centers[np.arange(classes), np.arange(classes)] = separation
    raw = centers[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    lo, hi = -clip, separation + clip
    inputs = (np.clip(raw[order], lo, hi) - lo) / (hi - lo)
    return LabeledDataset(inputs, labels[order], classes, f"gaussians-{classes}x{dim}")


def normalize(ds, mean, std):
    """Per-channel ``(x - mean) / std``; scalars apply to every channel."""
    std = np.asarray(std, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"std must be positive, got {std}")
    if ds.inputs.ndim == 4:
        std = std[:, None, None] if std.ndim == 1 else std
        mean = mean[:, None, None] if mean.ndim == 1 else mean
    return replace(ds, inputs=(ds.inputs - mean) / std)
