"""Experiment driver: simulate a participant, attack its gradient, score the result.

An experiment is described by a versioned key-value document (YAML or JSON)::

    version: 1
    name: short-tag
    model: {preset: tiny, max_seq_len: 32}     # any ModelConfig field may be set
    init: {kind: normal, std: 0.01, seed: 0}
    attack: {mode: tag, lr: 0.05, max_iters: 1000, alpha0: 0.01, gamma: 0.85}
    data:
      corpus: short            # bundled style, or a path together with `style`
      num_sentences: 10        # first N usable sentences
      vocab_size: 2000         # prefix of the bundled vocab (or `vocab: path`)
      sentence_length: null    # keep sentences with at least this many tokens, cut to it
    seeds: [0, 1]
    out: results/short-tag     # optional

The model's ``vocab_size`` always follows the vocab.  Weights are drawn once per
experiment from ``init``; each seed drives the dummy initialisation.  Results
are ordered by (sentence index, seed) however many workers run them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from tagleak.attack import AttackConfig, AttackTrace, run_attack
from tagleak.metrics import EvalReport, embedding_similarity, evaluate
from tagleak.model import PRESETS, ConfigError, GradientSet, ModelConfig, TransformerClassifier, model_gradient, preset
from tagleak.text import Vocab, bundled_corpus, bundled_vocab, load_corpus, load_vocab, tokenize
from tagleak.weights import InitSpec, init_weights

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUMMARY_FIELDS = ["model", "dataset", "recover_rate", "rouge1", "rouge2", "rougeL", "runtime_s"]
METRIC_FIELDS = SUMMARY_FIELDS[2:]
SWEEP_AXES = ("weight-distribution", "vocab-size", "sentence-length", "model-size", "distance-mode")


class ExperimentError(RuntimeError):
    """A sentence/seed run failed; the message names which one."""


@dataclass(frozen=True)
class DataConfig:
    corpus: str = "short"
    style: Optional[str] = None
    num_sentences: int = 10
    vocab: Optional[str] = None
    vocab_size: Optional[int] = None
    sentence_length: Optional[int] = None

    def __post_init__(self):
        if self.num_sentences < 1:
            raise ConfigError(f"num_sentences must be >= 1, got {self.num_sentences}")
        if self.sentence_length is not None and self.sentence_length < 1:
            raise ConfigError(f"sentence_length must be >= 1, got {self.sentence_length}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    model_name: str = "tiny"
    model: ModelConfig = field(default_factory=ModelConfig)
    init: InitSpec = field(default_factory=InitSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: tuple[int, ...] = (0,)
    out: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        return {
            "version": SCHEMA_VERSION,
            "name": self.name,
            "model": {"preset": self.model_name, **model},
            "init": self.init.to_dict(),
            "attack": self.attack.to_dict(),
            "data": asdict(self.data),
            "seeds": list(self.seeds),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
        unknown = set(d) - {"name", "model", "init", "attack", "data", "seeds", "out"}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        model = _typed(ModelConfig, d.get("model"))
        model_name = model.pop("preset", "tiny")
        try:
            return cls(
                name=d.get("name", "experiment"),
                model_name=model_name,
                model=preset(model_name, **model) if model_name in PRESETS else ModelConfig(**model),
                init=InitSpec(**_typed(InitSpec, d.get("init"))),
                attack=AttackConfig(**_typed(AttackConfig, d.get("attack"))),
                data=DataConfig(**(d.get("data") or {})),
                seeds=tuple(int(s) for s in d.get("seeds", (0,))),
                out=d.get("out"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None


def _typed(cls, d: dict | None) -> dict:
    # YAML 1.1 reads exponent-only floats such as 1e-12 as strings
    d = dict(d or {})
    defaults = {f.name: f.default for f in fields(cls)}
    for k, v in d.items():
        if isinstance(v, str) and isinstance(defaults.get(k), float):
            try:
                d[k] = float(v)
            except ValueError:
                raise ConfigError(f"{cls.__name__}.{k}: {v!r} is not a number") from None
    return d


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text)  # JSON documents parse as YAML too
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(doc)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# results

@dataclass
class SentenceResult:
    index: int
    seed: int
    text: str
    label: int
    truth: list[int]
    recovered: list[int]
    recovered_label: int
    final_loss: float
    iterations: int
    report: EvalReport

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    sentences: list[SentenceResult]

    @property
    def dataset(self) -> str:
        data = self.config.data
        return Path(data.corpus).stem if data.style else data.corpus

    def aggregate(self) -> dict[str, float]:
        """Arithmetic mean of each metric over all (sentence, seed) runs."""
        out = {}
        for key in METRIC_FIELDS:
            vals = [getattr(s.report, key) for s in self.sentences]
            out[key] = float(np.mean(vals))
        return out

    def summary_row(self) -> dict[str, Any]:
        return {"model": self.config.model_name, "dataset": self.dataset, **self.aggregate()}


@dataclass
class SweepResult:
    axis: str
    values: list
    results: list[ExperimentResult]

    def rows(self) -> list[dict[str, Any]]:
        return [{self.axis: _value_label(v), **r.summary_row()} for v, r in zip(self.values, self.results)]


def _value_label(v) -> str:
    if isinstance(v, dict):
        return ";".join(f"{k}={v[k]}" for k in sorted(v))
    return str(v)


# ---------------------------------------------------------------------------
# the pipeline

def simulate_participant(model: TransformerClassifier, sentence: Sequence[int], label: int) -> GradientSet:
    """The gradient a participant would share after one step on ``(sentence, label)``."""
    return model_gradient(model, list(sentence), int(label))


def resolve_vocab(data: DataConfig) -> Vocab:
    vocab = load_vocab(data.vocab) if data.vocab else bundled_vocab()
    if data.vocab_size is not None:
        vocab = vocab.truncated(data.vocab_size)
    return vocab


def prepare_sentences(config: ExperimentConfig, vocab: Vocab) -> list[tuple[int, str, list[int], int]]:
    """(corpus index, text, token ids, label) for the sentences the experiment attacks."""
    data = config.data
    corpus = load_corpus(data.corpus, data.style) if data.style else bundled_corpus(data.corpus)
    corpus.check_labels(config.model.num_classes)
    picked = []
    for i, ex in enumerate(corpus.examples):
        ids = tokenize(ex.text, vocab)
        if data.sentence_length is not None:
            if len(ids) < data.sentence_length:
                continue
            ids = ids[: data.sentence_length]
        if len(ids) > config.model.max_seq_len:
            raise ExperimentError(
                f"sentence {i} of {corpus.name} has {len(ids)} tokens, more than max_seq_len={config.model.max_seq_len}"
            )
        picked.append((i, ex.text, ids, ex.label))
        if len(picked) == data.num_sentences:
            break
    if len(picked) < data.num_sentences:
        raise ExperimentError(f"{corpus.name} has only {len(picked)} usable sentences, {data.num_sentences} requested")
    return picked


def build_model(config: ExperimentConfig, vocab: Vocab) -> TransformerClassifier:
    model_cfg = replace(config.model, vocab_size=len(vocab))
    return TransformerClassifier(model_cfg, init_weights(model_cfg, config.init))


@dataclass
class Job:
    config: ExperimentConfig
    index: int
    text: str
    ids: list[int]
    label: int
    seed: int


def run_job(job: Job) -> tuple[SentenceResult, AttackTrace]:
    # each worker rebuilds its own model; weights depend only on the config
    vocab = resolve_vocab(job.config.data)
    model = build_model(job.config, vocab)
    try:
        target = simulate_participant(model, job.ids, job.label)
        cfg = replace(job.config.attack, seed=job.seed, seq_len=len(job.ids))
        trace = run_attack(model, target, cfg, oracle_tokens=job.ids)
    except Exception as exc:
        raise ExperimentError(f"sentence {job.index} seed {job.seed}: {exc}") from exc
    emb = model.word_embeddings.data
    sim = embedding_similarity(trace.final_x, emb[job.ids]) if len(job.ids) > 1 else None
    report = evaluate(trace.tokens, job.ids, runtime_s=trace.runtime_s, embedding_similarity=sim)
    result = SentenceResult(
        index=job.index,
        seed=job.seed,
        text=job.text,
        label=job.label,
        truth=list(job.ids),
        recovered=list(trace.tokens),
        recovered_label=trace.label,
        final_loss=trace.records[-1].loss,
        iterations=len(trace.records),
        report=report,
    )
    return result, trace


def run_experiment(config: ExperimentConfig, workers: int = 1, out: str | Path | None = None) -> ExperimentResult:
    vocab = resolve_vocab(config.data)
    sentences = prepare_sentences(config, vocab)
    jobs = [Job(config, i, text, ids, label, seed) for i, text, ids, label in sentences for seed in config.seeds]
    log.info("%s: %d sentence(s) x %d seed(s)", config.name, len(sentences), len(config.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_job, jobs))  # map keeps submission order
    else:
        outcomes = [run_job(job) for job in jobs]
    outcomes.sort(key=lambda o: (o[0].index, o[0].seed))
    result = ExperimentResult(config, [o[0] for o in outcomes])
    out = out if out is not None else config.out
    if out is not None:
        write_outputs(result, [o[1] for o in outcomes], out)
    return result


def sweep(config: ExperimentConfig, axis: str, values: Sequence, workers: int = 1, out: str | Path | None = None) -> SweepResult:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("a sweep needs at least one value")
    results = []
    for v in values:
        cfg = apply_axis(config, axis, v)
        sub = None if out is None else Path(out) / f"{axis}={_value_label(v)}"
        results.append(run_experiment(cfg, workers=workers, out=sub))
    res = SweepResult(axis, list(values), results)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "sweep.csv").write_text(to_csv([axis] + SUMMARY_FIELDS, res.rows()), encoding="utf-8")
    return res


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "weight-distribution":
        if isinstance(value, str):
            spec = replace(parse_init(value), seed=config.init.seed)
        else:
            spec = InitSpec(**{"seed": config.init.seed, **value})
        return replace(config, init=spec)
    if axis == "vocab-size":
        return replace(config, data=replace(config.data, vocab_size=int(value)))
    if axis == "sentence-length":
        length = int(value)
        model = config.model
        if length > model.max_seq_len:
            model = replace(model, max_seq_len=length)
        return replace(config, model=model, data=replace(config.data, sentence_length=length))
    if axis == "model-size":
        keep = {"max_seq_len": config.model.max_seq_len, "num_classes": config.model.num_classes}
        return replace(config, model_name=str(value), model=preset(str(value), **keep))
    if axis == "distance-mode":
        return replace(config, attack=replace(config.attack, mode=str(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def parse_init(text: str) -> InitSpec:
    """``normal:0.02`` / ``uniform:0.01`` / ``file:weights.glkw`` shorthand."""
    kind, _, arg = text.partition(":")
    if kind == "normal":
        return InitSpec("normal", std=float(arg or 0.02))
    if kind == "uniform":
        return InitSpec("uniform", range=float(arg or 0.02))
    if kind == "file":
        return InitSpec("file", path=arg)
    raise ConfigError(f"cannot parse weight distribution {text!r}")


# ---------------------------------------------------------------------------
# outputs

def to_csv(fields: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in fields})
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def trace_lines(trace: AttackTrace) -> str:
    return "".join(json.dumps(r.to_json()) + "\n" for r in trace.records)


def loss_curve_csv(trace: AttackTrace) -> str:
    return "iteration,D\n" + "".join(f"{r.iter},{r.loss!r}\n" for r in trace.records)


def write_outputs(result: ExperimentResult, traces: Sequence[AttackTrace], out) -> Path:
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "loss_curves").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(result.config), encoding="utf-8")
    for s, trace in zip(result.sentences, traces):
        stem = f"s{s.index:03d}_seed{s.seed}"
        (out / "traces" / f"{stem}.jsonl").write_text(trace_lines(trace), encoding="utf-8")
        (out / "loss_curves" / f"{stem}.csv").write_text(loss_curve_csv(trace), encoding="utf-8")
    (out / "reports.jsonl").write_text("".join(json.dumps(s.to_dict()) + "\n" for s in result.sentences), encoding="utf-8")
    (out / "summary.csv").write_text(to_csv(SUMMARY_FIELDS, [result.summary_row()]), encoding="utf-8")
    return out
