"""Training-step logic for SYNERgy, its ablations and the replay baselines.

Every learner exposes ``step(x, y)`` for one stream minibatch; none of them
accepts a task id. The task-boundary baseline (Mean-ER + oEWC) additionally
provides ``end_task(chunks)``, which only the experiment harness calls.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields

import numpy as np

from .consolidation import FisherState, consolidation_loss, fisher_diagonal, fisher_from_chunks
from .memory import EpisodicBuffer, SemanticMemory
from .seeding import RunStreams
from .tensor import Tape, mse, sgd_step, softmax_cross_entropy


class ConfigurationError(ValueError):
    """Invalid or inconsistent run configuration."""


class Method(str, enum.Enum):
    SGD = "sgd"
    ER = "er"
    DERPP = "derpp"
    MEAN_ER = "mean-er"
    MEAN_ER_OEWC = "mean-er-oewc"
    SYNERGY = "synergy"
    SYNERGY_NO_ADJ = "synergy-noadj"
    SYNERGY_WORKING_FISHER = "synergy-working-fisher"

    @property
    def has_semantic_memory(self):
        return self in (Method.MEAN_ER, Method.MEAN_ER_OEWC, Method.SYNERGY,
                        Method.SYNERGY_NO_ADJ, Method.SYNERGY_WORKING_FISHER)

    @property
    def needs_boundaries(self):
        return self is Method.MEAN_ER_OEWC

    @property
    def label(self):
        return _LABELS[self]


_LABELS = {
    Method.SGD: "SGD", Method.ER: "ER", Method.DERPP: "DER++", Method.MEAN_ER: "Mean-ER",
    Method.MEAN_ER_OEWC: "Mean-ER + oEWC", Method.SYNERGY: "SYNERgy",
    Method.SYNERGY_NO_ADJ: "SYNERgy -F_adj", Method.SYNERGY_WORKING_FISHER: "SYNERgy -M,theta_s",
}


@dataclass
class SynergyConfig:
    eta: float = 0.1
    lam: float = 0.1  # semantic replay weight; "lambda" in JSON
    beta: float = 1.0
    alpha_s: float = 0.999
    r_s: float = 0.5
    alpha_f: float = 0.999
    r_f: float = 0.01
    batch_size: int = 32
    replay_batch_size: int | None = None  # None: same as batch_size
    epochs: int = 1
    buffer_size: int = 500
    precision: str = "f64"
    seed: int = 0
    fisher_batch_size: int = 512
    strict_fisher_ema: bool = False
    derpp_alpha: float = 0.5
    derpp_beta: float = 1.0
    oewc_gamma: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("alpha_s", "r_s", "alpha_f", "r_f"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("eta", "lam", "beta", "derpp_alpha", "derpp_beta", "oewc_gamma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.buffer_size < 0:
            raise ConfigurationError("buffer_size must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be 'f32' or 'f64', got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def replay_size(self):
        return self.batch_size if self.replay_batch_size is None else self.replay_batch_size

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class StepReport:
    step: int
    loss: float
    ce_stream: float
    ce_replay: float = 0.0
    semantic_replay: float = 0.0
    consolidation: float = 0.0
    consistency: float = 0.0
    semantic_updated: bool = False
    fisher_updated: bool = False
    stored: int = 0

    @property
    def supervised(self):
        return self.ce_stream + self.ce_replay

    def to_dict(self):
        return asdict(self)


class Learner:
    """Plain SGD on the stream: no buffer, no semantic memory."""

    method = Method.SGD

    def __init__(self, net, config, streams=None):
        self.config = config
        self.streams = streams or RunStreams.from_seed(config.seed)
        self.net = net
        self.steps = 0
        self.buffer = EpisodicBuffer(0, self.streams.buffer)
        self.semantic = None

    def _cast(self, x):
        return np.asarray(x, dtype=self.net.dtype)

    def step(self, x, y):
        x, y = self._cast(x), np.asarray(y)
        with Tape() as tape:
            ce_b = softmax_cross_entropy(self.net(x), y)
        tape.backward(ce_b)
        sgd_step(self.net.parameters(), self.config.eta)
        return self._report(ce_b.item(), ce_b.item())

    def _report(self, loss, ce_stream, **kw):
        self.steps += 1
        return StepReport(step=self.steps, loss=loss, ce_stream=ce_stream, **kw)

    def eval_model(self, use_semantic=True):
        if use_semantic and self.semantic is not None:
            return self.semantic.model
        return self.net

    def predict(self, x, use_semantic=True, batch_size=2048):
        """Logits of the semantic memory (default) or working model; no state changes."""
        model = self.eval_model(use_semantic)
        x = self._cast(x)
        if len(x) == 0:
            return np.zeros((0, self.net.layers[-1].out_features), dtype=self.net.dtype)
        return np.concatenate([model(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)])


class ERLearner(Learner):
    """Experience replay: stream CE plus CE on a reservoir minibatch."""

    method = Method.ER

    def __init__(self, net, config, streams=None):
        super().__init__(net, config, streams)
        self.buffer = EpisodicBuffer(config.buffer_size, self.streams.buffer)

    def _replay(self):
        if self.buffer.is_empty():
            return None
        return self.buffer.sample(self.config.replay_size)

    def step(self, x, y):
        x, y = self._cast(x), np.asarray(y)
        replay = self._replay()
        with Tape() as tape:
            ce_b = softmax_cross_entropy(self.net(x), y)
            loss = ce_b
            ce_m = None
            if replay is not None:
                ce_m = softmax_cross_entropy(self.net(self._cast(replay.inputs)), replay.labels)
                loss = loss + ce_m
        tape.backward(loss)
        sgd_step(self.net.parameters(), self.config.eta)
        stored = self.buffer.add_batch(x, y)
        return self._report(loss.item(), ce_b.item(),
                            ce_replay=0.0 if ce_m is None else ce_m.item(), stored=stored)


class DERppLearner(ERLearner):
    """ER plus an MSE consistency term against logits stored at insertion time."""

    method = Method.DERPP

    def step(self, x, y):
        x, y = self._cast(x), np.asarray(y)
        cfg = self.config
        with Tape() as tape:
            out_b = self.net(x)
            ce_b = softmax_cross_entropy(out_b, y)
            loss = ce_b
            ce_m = cons = None
            if not self.buffer.is_empty():
                r1 = self.buffer.sample(cfg.replay_size)
                ce_m = softmax_cross_entropy(self.net(self._cast(r1.inputs)), r1.labels)
                loss = loss + cfg.derpp_beta * ce_m
                r2 = self.buffer.sample(cfg.replay_size)
                cons = mse(self.net(self._cast(r2.inputs)), r2.logits)
                loss = loss + cfg.derpp_alpha * cons
        tape.backward(loss)
        sgd_step(self.net.parameters(), cfg.eta)
        stored = self.buffer.add_batch(x, y, logits=out_b.data.astype(np.float64))
        return self._report(loss.item(), ce_b.item(),
                            ce_replay=0.0 if ce_m is None else ce_m.item(),
                            consistency=0.0 if cons is None else cons.item(), stored=stored)


def _frozen_clone(net):
    twin = net.clone()
    for p in twin.parameters():
        p.requires_grad = False
    return twin


class SynergyLearner(ERLearner):
    """Dual-memory replay with stochastic Fisher consolidation.

    One step: sample replay, build ``L_sl + lam * L_sr + beta * L_sc``, take an
    SGD step on the working model, then (each behind its own gate) update the
    semantic memory and the running Fisher, and finally offer the stream
    batch to the reservoir. The Fisher used at step t is therefore the one
    available after step t-1. Terms with a zero weight are left off the tape.
    """

    method = Method.SYNERGY
    fisher_source = "buffer"  # "buffer": theta_s on M; "stream": theta_w on the incoming batch
    adjust = True
    consolidate = True

    def __init__(self, net, config, streams=None):
        super().__init__(net, config, streams)
        self.semantic = SemanticMemory(net, config.alpha_s, config.r_s, self.streams.semantic)
        for p in self.semantic.model.parameters():
            p.requires_grad = False
        self.fisher = None
        if self.consolidate:
            self.fisher = FisherState(net.n_params, config.alpha_f, config.r_f, self.streams.fisher,
                                      filter_map=net.filter_map(), adjust=self.adjust,
                                      strict_ema=config.strict_fisher_ema)

    # anchor and importance used by the consolidation term; None disables it
    def _penalty_terms(self):
        if self.fisher is None or not self.fisher.initialized:
            return None
        return self.semantic.model, self.fisher.f_adj

    def step(self, x, y):
        x, y = self._cast(x), np.asarray(y)
        cfg = self.config
        replay = self._replay()
        penalty = self._penalty_terms()
        l_sr_val = l_sc_val = 0.0
        with Tape() as tape:
            ce_b = softmax_cross_entropy(self.net(x), y)
            loss = ce_b
            ce_m = None
            if replay is not None:
                xm = self._cast(replay.inputs)
                out_m = self.net(xm)
                ce_m = softmax_cross_entropy(out_m, replay.labels)
                loss = loss + ce_m
                target = self.semantic.model(xm).data
                if cfg.lam != 0:
                    l_sr = mse(out_m, target)
                    loss = loss + cfg.lam * l_sr
                    l_sr_val = l_sr.item()
                else:
                    l_sr_val = float(np.mean(np.square(out_m.data - target)))
            if penalty is not None:
                anchor, importance = penalty
                if cfg.beta != 0:
                    l_sc = consolidation_loss(self.net, anchor, importance)
                    loss = loss + cfg.beta * l_sc
                    l_sc_val = l_sc.item()
                else:
                    l_sc_val = float(np.sum(importance * np.square(self.net.flat() - anchor.flat())))
        tape.backward(loss)
        sgd_step(self.net.parameters(), cfg.eta)
        sem_updated = self.semantic.maybe_update(self.net)
        fisher_updated = self._update_fisher(x, y)
        stored = self.buffer.add_batch(x, y)
        return self._report(loss.item(), ce_b.item(), ce_replay=0.0 if ce_m is None else ce_m.item(),
                            semantic_replay=l_sr_val, consolidation=l_sc_val,
                            semantic_updated=sem_updated, fisher_updated=fisher_updated, stored=stored)

    def _update_fisher(self, x, y):
        if self.fisher is None:
            return False
        if self.fisher_source == "stream":
            if not self.fisher.gate():
                return False
            self.fisher.update(fisher_diagonal(self.net, x, y, self.config.fisher_batch_size))
            return True
        return self.fisher.maybe_update(self.semantic.model, self.buffer, self.config.fisher_batch_size)


class SynergyNoAdjLearner(SynergyLearner):
    """Ablation: per-parameter Fisher, no filter-level averaging."""

    method = Method.SYNERGY_NO_ADJ
    adjust = False


class SynergyWorkingFisherLearner(SynergyLearner):
    """Ablation: Fisher from the working model on the incoming stream batch."""

    method = Method.SYNERGY_WORKING_FISHER
    fisher_source = "stream"


class MeanERLearner(SynergyLearner):
    """Semantic-memory replay without synaptic consolidation."""

    method = Method.MEAN_ER
    consolidate = False


class MeanEROEWCLearner(MeanERLearner):
    """Mean-ER plus online EWC anchored at task boundaries.

    At each boundary the working model is snapshotted as the anchor and the
    Fisher of the working model on the finished task's data is merged as
    ``f <- gamma * f + F``.
    """

    method = Method.MEAN_ER_OEWC

    def __init__(self, net, config, streams=None):
        super().__init__(net, config, streams)
        self.oewc_fisher = None
        self.oewc_anchor = None

    def _penalty_terms(self):
        if self.oewc_fisher is None:
            return None
        return self.oewc_anchor, self.oewc_fisher

    def end_task(self, chunks):
        """Boundary event: ``chunks`` iterates ``(inputs, labels)`` of the finished task."""
        fisher = fisher_from_chunks(self.net, ((self._cast(x), y) for x, y in chunks))
        if self.oewc_fisher is None:
            self.oewc_fisher = fisher
        else:
            self.oewc_fisher = self.config.oewc_gamma * self.oewc_fisher + fisher
        self.oewc_anchor = _frozen_clone(self.net)


_LEARNERS = {
    Method.SGD: Learner,
    Method.ER: ERLearner,
    Method.DERPP: DERppLearner,
    Method.MEAN_ER: MeanERLearner,
    Method.MEAN_ER_OEWC: MeanEROEWCLearner,
    Method.SYNERGY: SynergyLearner,
    Method.SYNERGY_NO_ADJ: SynergyNoAdjLearner,
    Method.SYNERGY_WORKING_FISHER: SynergyWorkingFisherLearner,
}


def make_learner(method, net, config, streams=None):
    return _LEARNERS[Method(method)](net, config, streams)
