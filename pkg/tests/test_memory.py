import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synergy_cl.memory import EmptyBufferError, EpisodicBuffer, SemanticMemory
from synergy_cl.models import build_mlp


def test_fill_phase_inserts_everything():
    buf = EpisodicBuffer(500, 0)
    stored = buf.add_batch(np.arange(500.0)[:, None], np.zeros(500, dtype=int))
    assert stored == 500 and len(buf) == 500
    assert sorted(buf.contents()[0][:, 0]) == list(range(500))


def test_insertion_probability_at_twice_capacity():
    # the 1000th offer into B=500 is kept with probability 1/2
    hits = 0
    trials = 4000
    for seed in range(trials):
        buf = EpisodicBuffer(500, seed)
        buf.seen = 999
        buf.size = 500
        buf._allocate(0.0, None)
        hits += buf.add(1.0, 0)
    sigma = np.sqrt(trials * 0.25)
    assert abs(hits - trials / 2) < 4 * sigma


@given(st.integers(0, 50), st.integers(0, 300), st.integers(0, 1000))
def test_size_and_seen_counts(capacity, n, seed):
    buf = EpisodicBuffer(capacity, seed)
    for i in range(n):
        buf.add(float(i), i % 3)
    assert buf.seen == n
    assert len(buf) == min(capacity, n)


def test_zero_capacity_draws_nothing():
    rng = np.random.default_rng(5)
    state = rng.bit_generator.state
    buf = EpisodicBuffer(0, rng)
    for i in range(20):
        assert not buf.add(float(i), 0)
    assert rng.bit_generator.state == state and buf.is_empty()


def test_sample_examples():
    buf = EpisodicBuffer(10, 0)
    buf.add(np.array([1.0, 2.0]), 3)
    batch = buf.sample(4)
    assert batch.inputs.shape == (4, 2) and (batch.labels == 3).all()
    assert len(buf.sample(0).labels) == 0
    with pytest.raises(EmptyBufferError):
        EpisodicBuffer(5, 0).sample(2)


def test_sample_without_replacement_when_possible():
    buf = EpisodicBuffer(10, 0)
    buf.add_batch(np.arange(10.0)[:, None], np.arange(10))
    for _ in range(50):
        assert len(set(buf.sample(10).index)) == 10


def test_sampling_uniformity():
    buf = EpisodicBuffer(10, 1)
    buf.add_batch(np.arange(10.0)[:, None], np.arange(10))
    counts = np.bincount(np.concatenate([buf.sample(1).index for _ in range(10_000)]), minlength=10)
    sigma = np.sqrt(10_000 * 0.1 * 0.9)
    assert (np.abs(counts - 1000) < 3 * sigma).all()


def test_buffer_sequence_reproducible():
    def run(seed):
        buf = EpisodicBuffer(20, seed)
        states = []
        for i in range(200):
            buf.add(float(i), i % 4)
            states.append(buf.contents()[0].ravel().copy())
        return states
    a, b = run(7), run(7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_logits_stored_for_every_entry():
    buf = EpisodicBuffer(3, 0)
    buf.add(np.ones(2), 0, logits=np.arange(4.0))
    with pytest.raises(ValueError):
        buf.add(np.ones(2), 0)
    with pytest.raises(ValueError):
        buf.add(np.ones(2), 0, logits=np.ones(5))


@pytest.mark.parametrize("with_logits", [False, True])
def test_dump_restore_resumes_identically(tmp_path, with_logits):
    rng = np.random.default_rng(0)
    xs, ys = rng.random((300, 2, 2)), rng.integers(0, 5, 300)
    lg = rng.normal(size=(300, 5)) if with_logits else None
    buf = EpisodicBuffer(40, 3)
    buf.add_batch(xs[:150], ys[:150], None if lg is None else lg[:150])
    buf.dump(tmp_path / "buf.bin")
    twin = EpisodicBuffer.restore(tmp_path / "buf.bin")
    for b in (buf, twin):
        b.add_batch(xs[150:], ys[150:], None if lg is None else lg[150:])
    for a, b in zip(buf.contents(), twin.contents()):
        assert (a is None and b is None) or np.array_equal(a, b)
    assert buf.seen == twin.seen and np.array_equal(buf.sample(7).index, twin.sample(7).index)


def test_semantic_gate_extremes():
    net = build_mlp(3, 2, hidden=4, rng=0)
    always = SemanticMemory(net, 0.5, 1.0, 0)
    never = SemanticMemory(net, 0.5, 0.0, 0)
    assert all(always.maybe_update(net) for _ in range(200))
    assert not any(never.maybe_update(net) for _ in range(200))


def test_semantic_gate_frequency():
    net = build_mlp(3, 2, hidden=4, rng=0)
    mem = SemanticMemory(net, 0.9, 0.4, 123)
    frac = np.mean([mem.maybe_update(net) for _ in range(10_000)])
    assert abs(frac - 0.4) < 0.02


def test_semantic_starts_as_copy():
    net = build_mlp(3, 2, hidden=4, rng=0)
    mem = SemanticMemory(net, 0.9, 0.4, 0)
    assert np.array_equal(mem.model.flat(), net.flat())
    net.layers[0].weight.data += 1
    assert not np.array_equal(mem.model.flat(), net.flat())


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_semantic_tracks_closed_form(seed):
    rng = np.random.default_rng(seed)
    work = build_mlp(2, 2, hidden=3, rng=seed)
    mem = SemanticMemory(work, 0.95, 1.0, seed)
    t0 = mem.model.flat().copy()
    target = rng.normal(size=work.n_params)
    work.load_flat(target)
    for _ in range(30):
        mem.maybe_update(work)
    assert np.allclose(mem.model.flat(), 0.95 ** 30 * t0 + (1 - 0.95 ** 30) * target, rtol=0, atol=1e-10)
