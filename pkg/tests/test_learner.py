import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from synergy_cl.consolidation import consolidation_loss
from synergy_cl.data import synthetic_gaussians
from synergy_cl.learner import ConfigurationError, Method, SynergyConfig, make_learner
from synergy_cl.models import build_mlp, build_small_cnn
from synergy_cl.seeding import RunStreams
from synergy_cl.tensor import Tape, softmax_cross_entropy

DATA = synthetic_gaussians(4, 6, 60, separation=4.0, seed=0)


def batches(n_steps, size=8):
    for i in range(n_steps):
        sl = slice((i * size) % len(DATA), (i * size) % len(DATA) + size)
        yield DATA.inputs[sl], DATA.labels[sl]


def train(method, steps=40, seed=3, **cfg):
    params = dict(eta=0.1, lam=0.5, beta=2.0, alpha_s=0.9, r_s=0.6, alpha_f=0.8, r_f=0.3,
                  batch_size=8, buffer_size=20, seed=seed)
    params.update(cfg)
    config = SynergyConfig(**params)
    streams = RunStreams.from_seed(seed)
    learner = make_learner(method, build_mlp(6, 4, hidden=7, rng=streams.init), config, streams)
    reports = [learner.step(x, y) for x, y in batches(steps)]
    return learner, reports


def test_synergy_reduces_to_er():
    a, _ = train("synergy", lam=0.0, beta=0.0, r_s=0.0, r_f=0.0)
    b, _ = train("er")
    assert np.array_equal(a.net.flat(), b.net.flat())


def test_mean_er_reduces_to_er():
    a, _ = train("mean-er", lam=0.0, r_s=0.0)
    b, _ = train("er")
    assert np.array_equal(a.net.flat(), b.net.flat())


def test_er_without_buffer_is_sgd():
    a, _ = train("er", buffer_size=0)
    b, _ = train("sgd")
    assert np.array_equal(a.net.flat(), b.net.flat())


@pytest.mark.parametrize("method", [m.value for m in Method if not m.needs_boundaries])
def test_full_run_determinism(method):
    a, ra = train(method)
    b, rb = train(method)
    assert np.array_equal(a.eval_model().flat(), b.eval_model().flat())
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]


def test_seeds_change_the_run():
    a, _ = train("synergy", seed=1)
    b, _ = train("synergy", seed=2)
    assert not np.array_equal(a.net.flat(), b.net.flat())


def test_first_step_is_stream_cross_entropy():
    config = SynergyConfig(batch_size=8, buffer_size=20, r_s=1.0, r_f=1.0)
    streams = RunStreams.from_seed(0)
    learner = make_learner("synergy", build_mlp(6, 4, hidden=7, rng=streams.init), config, streams)
    x, y = next(batches(1))
    expected = softmax_cross_entropy(learner.net(x), y).item()
    report = learner.step(x, y)
    assert report.loss == report.ce_stream == expected
    assert report.ce_replay == report.semantic_replay == report.consolidation == 0.0


def test_loss_decomposition():
    _, reports = train("synergy", steps=60, r_f=0.5)
    cfg_lam, cfg_beta = 0.5, 2.0
    assert any(r.consolidation > 0 for r in reports)
    for r in reports:
        assert abs(r.loss - (r.supervised + cfg_lam * r.semantic_replay + cfg_beta * r.consolidation)) < 1e-9


def test_identical_models_have_zero_replay_and_consolidation_terms():
    learner, _ = train("synergy", steps=10, r_f=1.0)
    learner.semantic.model.load_flat(learner.net.flat())
    replay = learner.buffer.sample(8)
    out = learner.net(replay.inputs).data
    assert np.mean((out - learner.semantic.model(replay.inputs).data) ** 2) == 0.0
    assert consolidation_loss(learner.net, learner.semantic.model, learner.fisher.f_adj).item() == 0.0


def test_semantic_memory_moves_only_by_ema():
    learner, _ = train("synergy", steps=5, r_s=0.0)
    init = RunStreams.from_seed(3)
    fresh = build_mlp(6, 4, hidden=7, rng=init.init)
    # r_s = 0: the semantic memory is still the initial working model
    assert np.array_equal(learner.semantic.model.flat(), fresh.flat())
    assert all(not p.requires_grad for p in learner.semantic.model.parameters())


def test_fisher_used_is_from_previous_step():
    config = SynergyConfig(batch_size=8, buffer_size=20, r_f=1.0, beta=1.0)
    streams = RunStreams.from_seed(0)
    learner = make_learner("synergy", build_mlp(6, 4, hidden=7, rng=streams.init), config, streams)
    it = batches(3)
    r1 = learner.step(*next(it))
    assert not r1.fisher_updated  # the buffer is filled only after the Fisher gate
    r2 = learner.step(*next(it))
    assert r2.fisher_updated and r2.consolidation == 0.0
    r3 = learner.step(*next(it))
    assert r3.consolidation > 0.0


def test_predict_paths():
    config = SynergyConfig(batch_size=8, buffer_size=20)
    streams = RunStreams.from_seed(0)
    learner = make_learner("synergy", build_mlp(6, 4, hidden=7, rng=streams.init), config, streams)
    x = DATA.inputs[:10]
    assert np.array_equal(learner.predict(x), learner.predict(x, use_semantic=False))
    sgd = make_learner("sgd", build_mlp(6, 4, hidden=7, rng=0), config)
    assert np.array_equal(sgd.predict(x, use_semantic=True), sgd.predict(x, use_semantic=False))
    trained, _ = train("synergy")
    whole = trained.predict(x)
    parts = np.concatenate([trained.predict(x[i:i + 1]) for i in range(10)])
    assert np.allclose(whole, parts, rtol=0, atol=1e-14)
    before = trained.net.flat().copy()
    trained.predict(x)
    assert np.array_equal(before, trained.net.flat())


def test_derpp_consistency_zero_for_matching_logits():
    learner, _ = train("derpp", steps=10)
    # rewrite stored logits with the current ones; the consistency term must vanish
    x_all, _, _ = learner.buffer.contents()
    learner.buffer.logits[:len(learner.buffer)] = learner.net(x_all).data
    r = learner.buffer.sample(8)
    assert np.mean((learner.net(r.inputs).data - r.logits) ** 2) == 0.0


def test_derpp_stores_logits():
    learner, reports = train("derpp", steps=10)
    assert learner.buffer.logits is not None and learner.buffer.logits.shape[1] == 4
    assert any(r.consistency > 0 for r in reports[1:])


def _oewc(steps=20):
    config = SynergyConfig(batch_size=8, buffer_size=20, beta=1.5, r_s=0.5)
    streams = RunStreams.from_seed(0)
    learner = make_learner("mean-er-oewc", build_mlp(6, 4, hidden=7, rng=streams.init), config, streams)
    reports = [learner.step(x, y) for x, y in batches(steps)]
    return learner, reports


def test_oewc_penalty_lifecycle():
    learner, reports = _oewc()
    assert all(r.consolidation == 0.0 for r in reports)
    learner.end_task([(DATA.inputs[:40], DATA.labels[:40])])
    x, y = next(batches(1))
    r = learner.step(x, y)
    assert r.consolidation == 0.0  # anchor equals the weights the step started from
    r = learner.step(x, y)
    assert r.consolidation > 0.0
    f1 = learner.oewc_fisher.copy()
    learner.end_task([(DATA.inputs[40:80], DATA.labels[40:80])])
    assert (learner.oewc_fisher >= f1).all()


def test_oewc_penalty_gradient():
    learner, _ = _oewc()
    learner.end_task([(DATA.inputs[:40], DATA.labels[:40])])
    for x, y in batches(3):
        learner.step(x, y)
    anchor, f = learner._penalty_terms()
    net = learner.net
    with Tape() as tape:
        loss = consolidation_loss(net, anchor, f)
    tape.backward(loss)
    grad = np.concatenate([p.grad.ravel() for p in net.parameters()])
    net.zero_grad()
    closed = 2 * f * (net.flat() - anchor.flat())
    start = net.flat().copy()

    def value(v):
        net.load_flat(v)
        return consolidation_loss(net, anchor, f).item()
    fd = numeric_grad(value, [start.copy()], 0)
    net.load_flat(start)
    assert rel_error(grad, closed) < 1e-12 and rel_error(fd, closed) < 1e-6


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        SynergyConfig(r_s=1.5)
    with pytest.raises(ConfigurationError):
        SynergyConfig(eta=-1)
    with pytest.raises(ConfigurationError):
        SynergyConfig(precision="f16")
    with pytest.raises(ConfigurationError):
        SynergyConfig.from_dict({"gamma": 1})
    cfg = SynergyConfig(lam=0.3, buffer_size=0)
    d = cfg.to_dict()
    assert d["lambda"] == 0.3 and "lam" not in d
    assert SynergyConfig.from_dict(d) == cfg


def test_float32_training_runs():
    learner, reports = train("synergy", precision="f32")
    assert learner.net.dtype == np.float64  # network dtype comes from the builder
    config = SynergyConfig(precision="f32", batch_size=8, buffer_size=20, r_f=1.0)
    streams = RunStreams.from_seed(0)
    net = build_mlp(6, 4, hidden=7, rng=streams.init, dtype=config.dtype)
    l32 = make_learner("synergy", net, config, streams)
    for x, y in batches(10):
        r = l32.step(x, y)
    assert net.dtype == np.float32 and np.isfinite(r.loss)


def test_working_fisher_ablation_uses_stream_batch():
    learner, reports = train("synergy-working-fisher", r_f=1.0)
    assert reports[0].fisher_updated  # the stream batch is available even when the buffer is empty
    assert learner.fisher.initialized


def test_cnn_learner_step():
    config = SynergyConfig(batch_size=4, buffer_size=8, r_f=1.0, r_s=1.0)
    streams = RunStreams.from_seed(0)
    learner = make_learner("synergy", build_small_cnn(1, 3, image_size=8, rng=streams.init), config, streams)
    rng = np.random.default_rng(0)
    for _ in range(4):
        r = learner.step(rng.random((4, 1, 8, 8)), rng.integers(0, 3, 4))
    assert r.consolidation > 0 and np.isfinite(r.loss)
