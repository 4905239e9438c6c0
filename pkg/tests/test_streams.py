import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synergy_cl.data import LabeledDataset, load_mnist, synthetic_gaussians
from synergy_cl.learner import ConfigurationError
from synergy_cl.streams import (StreamSpec, batch_checksum, blurry360_schedule, blurry360_stream, build_stream,
                                class_il_stream, exposes_boundaries, gcil_stream, gcil_tasks, rotate_images,
                                rotated_stream, steps_per_task)

TRAIN = synthetic_gaussians(10, 10, 30, seed=0)
TEST = synthetic_gaussians(10, 10, 10, seed=1)


def fake_digits(per_class=40, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_class)
    return LabeledDataset(rng.random((len(labels), 1, size, size)), labels, 10, "digits")


def blobs(n, size=28, seed=0):
    """Smooth images: a few Gaussian bumps, scaled into [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(3):
            cy, cx = rng.uniform(8, size - 8, 2)
            s = rng.uniform(2.5, 4.0)
            out[i] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        out[i] /= out[i].max()
    return out


def test_class_il_splits():
    stream = class_il_stream(TRAIN, TEST, 5, batch=8, rng=np.random.default_rng(0))
    assert stream.splits == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    for seg in stream.segments():
        labels = np.concatenate([b.labels for b in seg.batches()])
        assert set(labels) == set(stream.splits[seg.index])
        assert len(labels) == 60
        assert set(stream.test_set(seg.index)[1]) == set(stream.splits[seg.index])


def test_class_il_joint_and_errors():
    joint = class_il_stream(TRAIN, TEST, 1, rng=np.random.default_rng(0))
    assert joint.splits == [list(range(10))]
    with pytest.raises(ConfigurationError):
        class_il_stream(TRAIN, TEST, 3)


@settings(max_examples=20)
@given(st.sampled_from([1, 2, 5, 10]))
def test_class_il_partition(n_tasks):
    stream = class_il_stream(TRAIN, TEST, n_tasks)
    flat = [c for s in stream.splits for c in s]
    assert sorted(flat) == list(range(10)) and len(flat) == len(set(flat))


def test_class_il_epochs_reshuffle():
    stream = class_il_stream(TRAIN, TEST, 5, epochs=2, batch=60, rng=np.random.default_rng(0))
    seg = next(iter(stream.segments()))
    first, second = [b.inputs for b in seg.batches()]
    assert not np.array_equal(first, second)
    assert np.array_equal(np.sort(first, axis=0), np.sort(second, axis=0))


def test_rotation_zero_is_identity():
    imgs = np.random.default_rng(0).random((5, 1, 28, 28))
    assert np.array_equal(rotate_images(imgs, 0.0), imgs)
    assert np.array_equal(rotate_images(imgs, np.zeros(5)), imgs)


def test_rotation_quarter_turn_is_exact():
    img = np.random.default_rng(0).random((1, 7, 7))
    # counter-clockwise as displayed
    assert np.allclose(rotate_images(img, 90.0)[0], np.rot90(img[0]), atol=1e-12)
    assert np.allclose(rotate_images(img, 180.0)[0], img[0, ::-1, ::-1], atol=1e-12)


@pytest.mark.parametrize("angle", [7.0, 30.0, 45.0, 90.0, 133.0, 179.0])
def test_rotation_round_trip(angle):
    imgs = blobs(20)
    back = rotate_images(rotate_images(imgs, angle), -angle)
    assert np.mean(np.abs(back - imgs)) < 0.02


def test_rotation_per_sample_angles_match_scalar_path():
    imgs = np.random.default_rng(1).random((6, 1, 9, 9))
    angles = np.array([0.0, 10.0, 45.0, 90.0, 200.0, 359.0])
    mixed = rotate_images(imgs, angles, chunk=4)
    for i, a in enumerate(angles):
        assert np.allclose(mixed[i], rotate_images(imgs[i:i + 1], a)[0], rtol=0, atol=1e-12)


def test_rotation_keeps_range():
    imgs = np.random.default_rng(2).random((4, 28, 28))
    out = rotate_images(imgs, np.array([13.0, 77.0, 101.0, 250.0]))
    assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12


def test_rotated_stream_steps():
    assert steps_per_task(60_000, 128) == 469
    assert 20 * steps_per_task(60_000, 128) == 9_380
    data = fake_digits(13)
    stream = rotated_stream(data, data, n_tasks=3, batch=16, rng=np.random.default_rng(0))
    counts = [sum(1 for _ in seg.batches()) for seg in stream.segments()]
    assert counts == [steps_per_task(len(data), 16)] * 3
    assert ((stream.angles >= 0) & (stream.angles < 180)).all()


def test_rotated_stream_labels_and_angles():
    data = fake_digits(10)
    stream = rotated_stream(data, data, n_tasks=2, batch=50, rng=np.random.default_rng(3))
    seg = next(iter(stream.segments()))
    labels = np.concatenate([b.labels for b in seg.batches()])
    assert np.array_equal(np.sort(labels), np.sort(data.labels))
    x, y = stream.test_set(1)
    assert np.array_equal(y, data.labels)
    assert np.allclose(x, rotate_images(data.inputs, stream.angles[1]))


def _mnist_like_labels(per_digit=120, seed=0):
    rng = np.random.default_rng(seed)
    return rng.permutation(np.repeat(np.arange(10), per_digit))


def test_blurry360_structure():
    labels = _mnist_like_labels()
    schedule = blurry360_schedule(labels, np.random.default_rng(0), digits=9, rounds=3, batch_size=16)
    assert set(labels[schedule[0][1]]) <= {0, 1}
    tasks = [t for t, _ in schedule]
    assert tasks == sorted(tasks) and set(tasks) == set(range(27))
    for r in range(3):
        seen = {d: 0 for d in range(9)}
        for p in range(9):
            pair = {p, (p + 1) % 9}
            members = set(np.concatenate([labels[ix] for t, ix in schedule if t == r * 9 + p]))
            assert members == pair
            for d in pair:
                seen[d] += 1
        assert all(v == 2 for v in seen.values())
    for task in range(27):
        used = np.concatenate([ix for t, ix in schedule if t == task])
        assert len(used) == len(set(used))  # one pass per digit: no repeats within a pair task
        counts = np.bincount(labels[used], minlength=10)
        assert counts.max() == 120  # the pair ends when one digit's pass is used up
    assert all(len(ix) <= 16 for _, ix in schedule)


def test_blurry360_stream_angles_and_no_boundaries():
    data = fake_digits(60)
    stream = blurry360_stream(data, data, batch=16, rng=np.random.default_rng(0))
    assert not stream.boundaries and not exposes_boundaries("mnist-360")
    assert stream.n_eval_tasks == 1 and stream.n_classes == 9
    assert np.all(np.diff(stream.angles) >= 0)
    assert stream.angles[0] == 0.0 and stream.angles[-1] < 27 * 360.0
    custom = blurry360_stream(data, data, batch=16, rng=np.random.default_rng(0), sweep=90.0)
    assert custom.angles[-1] < 90.0
    first = next(iter(stream))
    assert set(first.labels) <= {0, 1}
    x, y = stream.test_set()
    assert (y < 9).all() and len(y) == 9 * 60


def test_blurry360_segments_hide_boundaries():
    data = fake_digits(30)
    stream = blurry360_stream(data, data, rng=np.random.default_rng(0))
    segs = list(stream.segments())
    assert len(segs) == 1 and list(segs[0].chunks()) == []


def _many_classes(classes=100, per=600):
    labels = np.repeat(np.arange(classes), per)
    return LabeledDataset(np.zeros((len(labels), 2)), labels, classes, "many")


def test_gcil_tasks_shape():
    data = _many_classes()
    for weighting in ("uniform", "longtail"):
        tasks = gcil_tasks(data.labels, 100, weighting=weighting)
        assert len(tasks) == 20
        for classes, counts, idx in tasks:
            assert len(idx) == 1000 and counts.sum() == 1000
            assert 2 <= len(set(classes)) <= 50 and len(classes) == len(counts)
            assert set(data.labels[idx]) == set(classes)


def test_gcil_determinism():
    data = _many_classes()
    a = gcil_tasks(data.labels, 100, gil_seed=1993)
    b = gcil_tasks(data.labels, 100, gil_seed=1993)
    c = gcil_tasks(data.labels, 100, gil_seed=7)
    assert all(np.array_equal(x[2], y[2]) for x, y in zip(a, b))
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, c))
    # the model seed never touches composition
    s1 = gcil_stream(data, data, rng=np.random.default_rng(1))
    s2 = gcil_stream(data, data, rng=np.random.default_rng(2))
    assert all(np.array_equal(x[2], y[2]) for x, y in zip(s1.tasks, s2.tasks))


def test_gcil_longtail_skew():
    data = _many_classes()
    tasks = gcil_tasks(data.labels, 100, weighting="longtail")
    checked = 0
    for _, counts, _ in tasks:
        assert np.all(np.diff(counts) <= 0)
        if len(counts) >= 5:
            assert counts.max() / counts.min() > 2
            checked += 1
    assert checked > 0


def test_gcil_uniform_counts_balanced():
    data = _many_classes()
    for _, counts, _ in gcil_tasks(data.labels, 100):
        assert counts.max() - counts.min() <= 1


def test_gcil_resamples_small_pools(caplog):
    data = _many_classes(per=5)
    with caplog.at_level(logging.WARNING, logger="synergy_cl.streams"):
        tasks = gcil_tasks(data.labels, 100)
    assert any("with replacement" in r.message for r in caplog.records)
    assert all(len(idx) == 1000 for _, _, idx in tasks)


def test_gcil_needs_enough_classes():
    with pytest.raises(ValueError):
        gcil_tasks(TRAIN.labels, 10)


@pytest.mark.parametrize("scenario", ["class-il", "rotated-mnist", "mnist-360", "gcil"])
def test_stream_regeneration_is_bit_reproducible(scenario):
    data = _many_classes(per=20) if scenario == "gcil" else fake_digits(20)
    if scenario == "gcil":
        data = LabeledDataset(np.random.default_rng(0).random((len(data), 2)), data.labels, 100)
    spec = StreamSpec(scenario, n_tasks=2 if scenario != "gcil" else 3, batch_size=16, seed=5,
                      samples_per_task=64, max_classes=10)

    def checksums():
        return [(batch_checksum(b), b.labels.tobytes(), b.step) for b in build_stream(spec, data, data)]
    a, b = checksums(), checksums()
    assert a == b and [s for _, _, s in a] == list(range(len(a)))


def test_spec_round_trip_and_validation():
    spec = StreamSpec("gcil", weighting="longtail", angle_range=(10, 20))
    assert StreamSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        StreamSpec("domain-il")
    with pytest.raises(ValueError):
        StreamSpec(weighting="zipf")
    with pytest.raises(ValueError):
        StreamSpec.from_dict({"n_task": 3})


@pytest.mark.parametrize("angle", [15.0, 45.0, 133.0])
def test_rotation_round_trip_on_mnist(mnist_dir, angle):
    imgs = load_mnist(mnist_dir, "test").inputs[:500]
    back = rotate_images(rotate_images(imgs, angle), -angle)
    assert np.mean(np.abs(back - imgs)) < 0.02
