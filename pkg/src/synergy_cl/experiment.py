"""Multi-seed experiment runner, configuration handling and result tables."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import load_mnist, synthetic_gaussians
from .learner import ConfigurationError, Method, SynergyConfig, make_learner
from .models import build_mlp, build_small_cnn
from .seeding import RunStreams
from .streams import StreamSpec, build_stream, exposes_boundaries
from .tensor import softmax

log = logging.getLogger(__name__)

_HP_KEYS = ("batch_size", "epochs", "eta", "lam", "beta", "alpha_s", "r_s", "alpha_f", "r_f")


def _rows(batch, epochs, eta, lam, beta, alpha, r_s, r_f):
    """Three buffer sizes (200, 500, 1000) sharing everything but the per-buffer entries."""
    out = {}
    for i, buf in enumerate((200, 500, 1000)):
        pick = lambda v: v[i] if isinstance(v, tuple) else v
        out[buf] = dict(zip(_HP_KEYS, (batch, epochs, eta, pick(lam), beta, alpha, pick(r_s), alpha, pick(r_f))))
    return out


# Selected SYNERgy hyperparameters per benchmark and buffer size.
HYPERPARAMS = {
    "s-cifar10": _rows(32, 50, 0.05, 0.2, 5.0, 0.999, (0.2, 0.4, 0.9), (0.01, 0.007, 0.001)),
    "s-tinyimg": _rows(32, 50, 0.05, 0.1, 0.1, 0.999, 0.05, (0.0005, 0.0004, 0.0004)),
    "r-mnist": _rows(128, 1, 0.2, 1.0, 1.0, 0.99, 1.0, (0.4, 0.8, 0.4)),
    "mnist-360": _rows(16, 1, 0.2, (1.0, 1.0, 0.8), 1.0, 0.99, 0.8, (0.9, 0.8, 0.8)),
    "gcil-u": _rows(32, 50, 0.05, 0.2, 1.0, 0.999, (0.3, 0.3, 0.4), 0.005),
    "gcil-l": _rows(32, 50, 0.05, 0.2, 1.0, 0.999, (0.2, 0.2, 0.4), 0.005),
}


def benchmark_key(stream):
    """Row of the hyperparameter table matching a stream, or None (e.g. synthetic data)."""
    if stream.scenario == "rotated-mnist" and stream.dataset == "mnist":
        return "r-mnist"
    if stream.scenario == "mnist-360" and stream.dataset == "mnist":
        return "mnist-360"
    if stream.scenario == "gcil" and stream.dataset != "synthetic":
        return "gcil-u" if stream.weighting == "uniform" else "gcil-l"
    if stream.scenario == "class-il" and stream.dataset in ("cifar10", "tinyimg"):
        return "s-" + stream.dataset
    return None


def table_defaults(stream, buffer_size):
    key = benchmark_key(stream)
    if key is None or buffer_size not in HYPERPARAMS[key]:
        return {}
    return dict(HYPERPARAMS[key][buffer_size])


SCENARIO_LABELS = {"r-mnist": "R-MNIST", "mnist-360": "MNIST-360", "gcil-u": "GCIL-U", "gcil-l": "GCIL-L",
                   "s-cifar10": "S-CIFAR-10", "s-tinyimg": "S-TinyImg"}


@dataclass
class RunConfig:
    method: str = "synergy"
    stream: StreamSpec = field(default_factory=StreamSpec)
    synergy: SynergyConfig = field(default_factory=SynergyConfig)
    n_seeds: int = 1
    seeds: list | None = None  # explicit seed list; overrides n_seeds
    output_dir: str = "runs"
    eval_cadence: str = "per_task"
    log_level: str = "INFO"
    data_dir: str = "data/mnist"
    model: str = "mlp"
    hidden: int = 100
    eval_working: bool = False
    log_every: int = 50

    def __post_init__(self):
        try:
            Method(self.method)
        except ValueError:
            raise ConfigurationError(f"method: unknown method {self.method!r}") from None
        if self.n_seeds < 1:
            raise ConfigurationError("n_seeds must be at least 1")
        if self.eval_cadence not in ("per_task", "end_only"):
            raise ConfigurationError(f"eval_cadence must be 'per_task' or 'end_only', got {self.eval_cadence!r}")
        if self.model not in ("mlp", "cnn"):
            raise ConfigurationError(f"model must be 'mlp' or 'cnn', got {self.model!r}")

    @property
    def seed_list(self):
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.synergy.seed + k for k in range(self.n_seeds)]

    @property
    def label(self):
        key = benchmark_key(self.stream)
        name = SCENARIO_LABELS.get(key, f"{self.stream.scenario}/{self.stream.dataset}")
        return f"{name} ({self.synergy.buffer_size})"

    def to_dict(self):
        return {
            "method": self.method, "stream": self.stream.to_dict(), "synergy": self.synergy.to_dict(),
            "n_seeds": self.n_seeds, "seeds": self.seeds, "output_dir": self.output_dir,
            "eval_cadence": self.eval_cadence, "log_level": self.log_level, "data_dir": self.data_dir,
            "model": self.model, "hidden": self.hidden, "eval_working": self.eval_working,
            "log_every": self.log_every,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d, overrides=None):
        """Build a config with precedence: built-ins < hyperparameter table < ``d`` < ``overrides``.

        ``overrides`` uses the same nested layout as ``d``.
        """
        merged = _merge(d or {}, overrides or {})
        top_known = set(cls.__dataclass_fields__)
        unknown = set(merged) - top_known
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        try:
            stream = StreamSpec.from_dict(merged.get("stream", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"stream: {exc}") from None
        syn_given = dict(merged.get("synergy", {}))
        if "lambda" in syn_given:
            syn_given["lam"] = syn_given.pop("lambda")
        buffer_size = syn_given.get("buffer_size", SynergyConfig.buffer_size)
        syn = {**table_defaults(stream, buffer_size), **syn_given}
        synergy = SynergyConfig.from_dict(syn)
        rest = {k: v for k, v in merged.items() if k not in ("stream", "synergy")}
        return cls(stream=stream, synergy=synergy, **rest)

    @classmethod
    def load(cls, path, overrides=None):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), overrides)


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------- data


def load_datasets(config):
    spec = config.stream
    if spec.dataset == "synthetic":
        s = spec.synthetic
        seed = int(s.get("seed", 0))
        train = synthetic_gaussians(s["classes"], s["dim"], s["per_class"], s["separation"], seed=seed)
        test = synthetic_gaussians(s["classes"], s["dim"], s["test_per_class"], s["separation"], seed=seed + 1)
        return train, test
    if spec.dataset == "mnist":
        path = Path(config.data_dir)
        if not path.is_dir():
            raise FileNotFoundError(f"data directory not found: {path}")
        return load_mnist(path, "train"), load_mnist(path, "test")
    raise ConfigurationError(f"stream.dataset: no loader for {spec.dataset!r}")


def build_model(config, stream, rng):
    shape = stream.input_shape
    dtype = config.synergy.dtype
    if config.model == "cnn":
        if len(shape) != 3:
            raise ConfigurationError("model: the CNN needs C x H x W inputs")
        return build_small_cnn(shape[0], stream.n_classes, shape[1], rng=rng, dtype=dtype)
    return build_mlp(int(np.prod(shape)), stream.n_classes, config.hidden, rng=rng, dtype=dtype)


# ---------------------------------------------------------------- training


@dataclass
class SeedResult:
    seed: int
    matrix: M.TaskMatrix
    metrics: dict
    working_matrix: M.TaskMatrix | None = None


def _accuracy(logits, labels):
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(logits.argmax(axis=1) == labels))


def _evaluate_row(learner, stream, row, use_semantic):
    accs, logits, labels = [], [], []
    for j in range(row + 1):
        x, y = stream.test_set(j)
        out = learner.predict(x, use_semantic=use_semantic)
        accs.append(_accuracy(out, y))
        logits.append(out)
        labels.append(y)
    return accs, logits, labels


def _summary(matrix, final_logits, final_labels, task_of_class, snapshots):
    T = matrix.T
    out = {"avg_accuracy": M.average_accuracy(matrix)}
    if matrix.n_tasks >= 2:
        s = M.stability(matrix)
        diag = np.diag(T)
        p = None if np.isnan(diag).any() else M.plasticity(matrix)
        out.update(stability=s, plasticity=p, tradeoff=None if p is None else M.tradeoff(s, p))
    else:
        out.update(stability=None, plasticity=M.plasticity(matrix), tradeoff=None)
    logits = np.concatenate(final_logits)
    labels = np.concatenate(final_labels)
    probs = softmax(logits.astype(np.float64))
    ece_value, bins = M.ece(probs, labels)
    out["ece"] = ece_value
    out["reliability"] = bins.to_dict()
    out["task_probs"] = None if task_of_class is None else M.task_probabilities(probs, task_of_class).tolist()
    out["drift_matrix"] = M.drift_matrix(snapshots).tolist() if len(snapshots) > 1 else None
    return out


def check_boundaries(config):
    method = Method(config.method)
    if method.needs_boundaries and not exposes_boundaries(config.stream.scenario):
        raise ConfigurationError(f"method {method.value!r} needs task boundaries, "
                                 f"which the {config.stream.scenario!r} stream does not expose")


def run_seed(config, seed, train, test, log_fh=None):
    """Train and evaluate one seed; returns a :class:`SeedResult`."""
    method = Method(config.method)
    streams = RunStreams.from_seed(seed)
    spec = StreamSpec.from_dict({**config.stream.to_dict(), "seed": seed,
                                 "batch_size": config.synergy.batch_size, "epochs": config.synergy.epochs})
    stream = build_stream(spec, train, test, streams.stream)
    check_boundaries(config)
    net = build_model(config, stream, streams.init)
    syn = SynergyConfig.from_dict({**config.synergy.to_dict(), "seed": seed})
    learner = make_learner(method, net, syn, streams)

    n_rows = stream.n_eval_tasks
    matrix = M.TaskMatrix(n_rows)
    working = M.TaskMatrix(n_rows) if config.eval_working else None
    snapshots = []
    final_logits = final_labels = None

    def evaluate(row):
        nonlocal final_logits, final_labels
        accs, logits, labels = _evaluate_row(learner, stream, row, use_semantic=True)
        matrix.set_row(row, accs)
        if working is not None:
            working.set_row(row, _evaluate_row(learner, stream, row, use_semantic=False)[0])
        snapshots.append(learner.eval_model().clone())
        final_logits, final_labels = logits, labels
        _log(log_fh, {"seed": seed, "event": "eval", "after_task": row, "accuracies": accs})

    segments = list(stream.segments())
    for seg in segments:
        for batch in seg.batches():
            report = learner.step(batch.inputs, batch.labels)
            if config.log_every and report.step % config.log_every == 0:
                _log(log_fh, {"seed": seed, "event": "step", **report.to_dict()})
        if not stream.boundaries:
            continue
        if method.needs_boundaries:
            learner.end_task(seg.chunks())
        if config.eval_cadence == "per_task" or seg.index == len(segments) - 1:
            evaluate(seg.index)
    if not stream.boundaries:
        evaluate(0)

    summary = _summary(matrix, final_logits, final_labels, stream.task_of_class, snapshots)
    if working is not None:
        summary["working_avg_accuracy"] = M.average_accuracy(working)
    return SeedResult(seed, matrix, summary, working)


def _log(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------- aggregation


_SCALARS = ("avg_accuracy", "stability", "plasticity", "tradeoff", "ece", "working_avg_accuracy")


def aggregate(config, per_seed):
    """Mean and population standard deviation over seeds of every scalar metric."""
    out = {"method": config.method, "method_label": Method(config.method).label,
           "scenario": config.label, "seeds": [r["seed"] for r in per_seed], "metrics": {}}
    for key in _SCALARS:
        vals = [r[key] for r in per_seed if r.get(key) is not None]
        if vals:
            out["metrics"][key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    probs = [r["task_probs"] for r in per_seed if r.get("task_probs") is not None]
    if probs:
        out["metrics"]["task_probs"] = {"mean": np.mean(probs, axis=0).tolist(), "std": np.std(probs, axis=0).tolist()}
    return out


@dataclass
class ExperimentReport:
    config: RunConfig
    per_seed: list
    aggregate: dict
    output_dir: Path | None = None

    def metric(self, name):
        return [r[name] for r in self.per_seed]


def run_experiment(config, datasets=None, write=True):
    """Run every seed of ``config``; write per-seed and aggregate outputs under ``output_dir``."""
    logging.getLogger("synergy_cl").setLevel(config.log_level)
    check_boundaries(config)
    train, test = datasets if datasets is not None else load_datasets(config)
    out_dir = Path(config.output_dir)
    log_fh = None
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(config.dumps() + "\n")
        log_fh = open(out_dir / "training.log.jsonl", "w")
    per_seed = []
    try:
        for k, seed in enumerate(config.seed_list):
            start = time.perf_counter()
            result = run_seed(config, seed, train, test, log_fh)
            record = {"seed": seed, **result.metrics}
            per_seed.append(record)
            elapsed = time.perf_counter() - start
            _log(log_fh, {"seed": seed, "event": "done", "seconds": round(elapsed, 3),
                          "avg_accuracy": record["avg_accuracy"]})
            log.info("%s seed %d: avg accuracy %.2f (%.1fs)", config.method, seed, record["avg_accuracy"], elapsed)
            if write:
                seed_dir = out_dir / f"seed_{k}"
                seed_dir.mkdir(exist_ok=True)
                (seed_dir / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
                (seed_dir / "task_matrix.csv").write_text(result.matrix.to_csv())
                if result.working_matrix is not None:
                    (seed_dir / "task_matrix_working.csv").write_text(result.working_matrix.to_csv())
    finally:
        if log_fh is not None:
            log_fh.close()
    agg = aggregate(config, per_seed)
    report = ExperimentReport(config, per_seed, agg, out_dir if write else None)
    if write:
        (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        (out_dir / "table.md").write_text(emit_tables([agg]))
    return report


# ---------------------------------------------------------------- tables


def _cell(agg, metric):
    m = agg.get("metrics", {}).get(metric)
    if m is None or m.get("mean") is None:
        return "—"
    return f"{m['mean']:.2f}±{m['std']:.2f}"


def emit_tables(reports, metric="avg_accuracy", fmt="markdown"):
    """Methods as rows, scenarios as columns, ``mean±std`` cells (``—`` where missing)."""
    aggs = [r.aggregate if isinstance(r, ExperimentReport) else r for r in reports]
    if not aggs:
        raise ValueError("no reports to tabulate")
    methods = list(dict.fromkeys(a["method_label"] for a in aggs))
    scenarios = list(dict.fromkeys(a["scenario"] for a in aggs))
    cells = {(a["method_label"], a["scenario"]): _cell(a, metric) for a in aggs}
    rows = [[m] + [cells.get((m, s), "—") for s in scenarios] for m in methods]
    header = ["Method"] + scenarios
    if fmt == "csv":
        return "\n".join(",".join(r) for r in [header] + rows) + "\n"
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


ABLATION_METHODS = (Method.SYNERGY, Method.SYNERGY_NO_ADJ, Method.SYNERGY_WORKING_FISHER,
                    Method.MEAN_ER, Method.MEAN_ER_OEWC, Method.ER)


def run_ablation(config, datasets=None, write=True):
    """Every ablation variant on one stream; boundary-only variants are skipped on boundary-free streams."""
    if datasets is None:
        datasets = load_datasets(config)
    reports = []
    for method in ABLATION_METHODS:
        if method.needs_boundaries and not exposes_boundaries(config.stream.scenario):
            log.warning("skipping %s: the stream has no task boundaries", method.value)
            continue
        sub = RunConfig.from_dict(config.to_dict(), {"method": method.value,
                                                     "output_dir": str(Path(config.output_dir) / method.value)})
        reports.append(run_experiment(sub, datasets, write))
    if write:
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.output_dir) / "table.md").write_text(emit_tables(reports))
    return reports
