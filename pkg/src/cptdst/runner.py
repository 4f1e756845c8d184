"""Experiment orchestration: backbone manufacture, continual runs, baselines and summaries."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .backward import accept_update, backward_transfer_task
from .codec import SEP, build_query, sentinel
from .data import Item, batch_loss, dataset_loss, minibatches, task_jga, task_pairs
from .errors import ContractError
from .forward import Flags, PromptBank, Schedule, cl_init, select_init, train_task
from .metrics import AccuracyMatrix, metrics_report
from .model import Backbone, ModelConfig, PretrainConfig, count_tunable_params, init_prompt_random, pretrain_backbone
from .stream import (GeneratorConfig, MemoryBuffer, TaskStream, generate_stream, generator_lexicon,
                     ingest_schema_corpus, proportional_budget, sample_memory, stable_seed)
from .vocab import Vocab

log = logging.getLogger(__name__)

METHODS = ("prompt_tuning", "cpt", "cpt_mem", "cpt_mem_back", "finetune", "replay")

PRESETS = {
    "prompt_tuning": Flags(msr=True, init="random", qf=False, mr=False),
    "cpt": Flags(msr=True, init="cl", qf=True, mr=False),
    "cpt_mem": Flags(msr=True, init="cl", qf=True, mr=True),
    "cpt_mem_back": Flags(msr=True, init="cl", qf=True, mr=True),
}

BASELINES = ("finetune", "replay")

# read-only checkpoints shipped with the package, named like cache entries
BUNDLED = Path(__file__).parent / "assets"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StreamSource:
    source: str = "generate"
    path: str | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    last_k: int | None = None  # keep only the last k tasks of each order (curriculum-suffix studies)

    def __post_init__(self):
        if self.source not in ("generate", "ingest"):
            raise ContractError(f"unknown stream source {self.source!r}")
        if self.source == "ingest" and not self.path:
            raise ContractError("an ingest stream needs a corpus path")
        if self.last_k is not None and self.last_k < 1:
            raise ContractError("last_k must be positive")


@dataclass
class BackboneSpec:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 160
    prompt_length: int = 20
    d_ff: int = 0
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=12000))
    pretrain_streams: int = 8
    pretrain_services: int = 45
    pretrain_dialogs: int = 50
    seed: int = 0
    path: str | None = None

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len,
                           self.prompt_length, self.d_ff)


@dataclass
class ExperimentConfig:
    method: str = "cpt"
    flags: dict[str, Any] = field(default_factory=dict)
    stream: StreamSource = field(default_factory=StreamSource)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    schedule: Schedule = field(default_factory=Schedule)
    memory_size: int = 50
    memory_mode: str = "fixed"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    orders: list[list[str]] | None = None
    output_dir: str = "runs"
    workers: int = 1  # concurrent (seed, order) runs

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.memory_mode not in ("fixed", "proportional"):
            raise ContractError(f"unknown memory mode {self.memory_mode!r}")
        if self.memory_size < 0:
            raise ContractError("memory size must be non-negative")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        if self.workers < 1:
            raise ContractError("workers must be at least 1")
        if self.orders is not None and len(self.orders) != len(self.seeds):
            raise ContractError("explicit task orders must pair one-to-one with seeds")
        if self.method in BASELINES:
            if self.flags:
                raise ContractError("ablation flags apply to prompt methods only")
        else:
            self.resolved_flags()
        if (self.uses_memory or self.backward) and self.memory_size == 0:
            raise ContractError("memory replay and backward transfer need a memory budget > 0")

    def resolved_flags(self) -> Flags:
        base = asdict(PRESETS.get(self.method, Flags()))
        unknown = set(self.flags) - set(base)
        if unknown:
            raise ContractError(f"unknown flags {sorted(unknown)}")
        base.update(self.flags)
        return Flags(**base)

    @property
    def backward(self) -> bool:
        return self.method == "cpt_mem_back"

    @property
    def uses_memory(self) -> bool:
        if self.method == "replay":
            return True
        return self.method not in BASELINES and self.resolved_flags().mr

    @property
    def sequential(self) -> bool:
        """Whether prompts depend on earlier tasks (otherwise FWT/BWT are reported blank)."""
        if self.method in BASELINES:
            return True
        f = self.resolved_flags()
        return f.init != "random" or f.qf or f.mr or self.backward

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Mapping[str, Any]) -> "ExperimentConfig":
        record = dict(record)
        stream = dict(record.pop("stream", {}) or {})
        if "generator" in stream:
            gen = dict(stream["generator"])
            for key in ("slots_per_service", "samples_per_service"):
                if key in gen:
                    gen[key] = tuple(gen[key])
            stream["generator"] = _build(GeneratorConfig, gen, "stream.generator")
        backbone = dict(record.pop("backbone", {}) or {})
        if "pretrain" in backbone:
            backbone["pretrain"] = _build(PretrainConfig, backbone["pretrain"], "backbone.pretrain")
        schedule = record.pop("schedule", {}) or {}
        return _build(cls, dict(record, stream=_build(StreamSource, stream, "stream"),
                                backbone=_build(BackboneSpec, backbone, "backbone"),
                                schedule=_build(Schedule, schedule, "schedule")), "config")


def _build(cls, record: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(record) - known
    if unknown:
        raise ContractError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**record)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read an experiment config from a JSON or TOML file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        record = tomllib.loads(text)
    else:
        record = json.loads(text)
    return ExperimentConfig.from_dict(record)


# ---------------------------------------------------------------------------
# streams and the backbone


def load_stream(source: StreamSource) -> TaskStream:
    if source.source == "ingest":
        return ingest_schema_corpus(source.path, seed=source.generator.seed)
    return generate_stream(source.generator)


def build_vocab(stream: TaskStream | None = None) -> Vocab:
    texts = list(generator_lexicon())
    if stream is not None:
        texts += list(stream.texts())
    return Vocab.build(texts)


def pretrain_corpus(spec: BackboneSpec, vocab: Vocab, extra: TaskStream | None = None):
    """Denoising documents plus salient-span pairs from held-out generator streams.

    The held-out streams use their own seeds, so their slot-description pairings
    and templates differ from the evaluation stream; several streams are pooled
    so the backbone cannot simply memorize a few services. Each document is a
    dialog followed by ``description : value .`` statements for the mentioned
    slots; the salient-span pairs mask those statement values with sentinels.
    Unmentioned slots never appear, so the ``None`` convention is left for the
    prompts.
    """
    corpus, pairs = [], []
    for n in range(spec.pretrain_streams):
        gen = GeneratorConfig(n_services=spec.pretrain_services, seed=stable_seed(spec.seed, "pretrain-stream", n),
                              samples_per_service=(spec.pretrain_dialogs, spec.pretrain_dialogs))
        for service in generate_stream(gen).services:
            for d in service.dialogs:
                stated = [(s.description, d.values[s.name]) for s in service.slots if s.name in d.values]
                text = d.text
                if stated:
                    text += f" {SEP} " + " ".join(f"{a} : {b} ." for a, b in stated)
                    src = f"{d.text} {SEP} " + " ".join(f"{a} : {sentinel(i)} ." for i, (a, _) in
                                                         enumerate(stated, start=1))
                    tgt = " ".join(f"{sentinel(i)} {b}" for i, (_, b) in enumerate(stated, start=1))
                    pairs.append((vocab.encode(src), vocab.encode(tgt)))
                corpus.append(vocab.encode(text))
    if extra is not None:
        for t in extra.task_ids:
            corpus += [vocab.encode(d.text) for d in extra.train(t)]
    return corpus, pairs


def backbone_key(spec: BackboneSpec, vocab: Vocab) -> str:
    record = asdict(spec)
    record.pop("path", None)
    record["vocab"] = hashlib.sha256("\n".join(vocab.tokens).encode()).hexdigest()
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_from_spec(spec: BackboneSpec, vocab: Vocab, extra: TaskStream | None = None) -> Backbone:
    corpus, pairs = pretrain_corpus(spec, vocab, extra)
    return pretrain_backbone(corpus, spec.model_config(len(vocab)), spec.seed, vocab, spec.pretrain, pairs)


def obtain_backbone(spec: BackboneSpec, vocab: Vocab, cache_dir: str | os.PathLike | None = None,
                    extra: TaskStream | None = None) -> Backbone:
    """Load ``spec.path`` if given, else a bundled or cached backbone keyed by spec and vocabulary, else pretrain."""
    if spec.path:
        model = Backbone.load(spec.path)
        if model.vocab.tokens != vocab.tokens:
            raise ContractError(f"backbone {spec.path} was built for a different vocabulary")
        return model
    name = f"backbone_{backbone_key(spec, vocab)}.json"
    if (BUNDLED / name).exists():
        return Backbone.load(BUNDLED / name)
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / name
        if cache.exists():
            return Backbone.load(cache)
    model = pretrain_from_spec(spec, vocab, extra)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        model.save(cache)
    return model


def task_order(stream: TaskStream, seed: int, last_k: int | None = None) -> list[str]:
    """Seeded random permutation of the stream's tasks (optionally its last ``last_k``)."""
    rng = np.random.default_rng(stable_seed(seed, "order"))
    order = [stream.task_ids[i] for i in rng.permutation(len(stream.task_ids))]
    return order[-last_k:] if last_k else order


def memory_capacities(config: ExperimentConfig, stream: TaskStream, order: Sequence[str]) -> dict[str, int]:
    if config.memory_mode == "proportional":
        return proportional_budget({t: len(stream.splits[t].train) for t in order}, config.memory_size)
    return {t: config.memory_size for t in order}


# ---------------------------------------------------------------------------
# one (seed, order) run


class RunState:
    """Everything persisted after each completed task; a run resumes from it."""

    def __init__(self, directory: Path, header: dict):
        self.dir = directory
        self.header = header
        self.completed = 0
        self.matrix = AccuracyMatrix(len(header["task_order"]))
        self.memory = MemoryBuffer()
        self.bank = PromptBank()

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def load_or_start(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        if not self.manifest_path.exists():
            for name in ("train_log.jsonl", "gate_log.jsonl", "accept_log.jsonl"):
                (self.dir / name).write_text("")
            return
        manifest = json.loads(self.manifest_path.read_text())
        if manifest["header"] != self.header:
            raise ContractError(f"{self.dir} holds a run with a different configuration")
        self.completed = manifest["completed"]
        self.matrix = AccuracyMatrix.from_dict(len(self.header["task_order"]), manifest["matrix"])
        self.memory = MemoryBuffer.from_dict(manifest["memory"])
        if (self.dir / "bank" / "index.json").exists():
            self.bank = PromptBank.load(self.dir / "bank")
        # drop log lines written by a task that did not complete
        for name in ("train_log.jsonl", "gate_log.jsonl", "accept_log.jsonl"):
            path = self.dir / name
            if path.exists():
                kept = [line for line in path.read_text().splitlines()
                        if json.loads(line).get("k", 0) <= self.completed]
                path.write_text("".join(line + "\n" for line in kept))

    def append(self, name: str, records: Sequence[dict], k: int) -> None:
        with open(self.dir / name, "a") as fh:
            for r in records:
                fh.write(json.dumps(dict(r, k=k), sort_keys=True) + "\n")

    def checkpoint(self, k: int, save_bank: bool = True) -> None:
        self.completed = k
        if save_bank:
            self.bank.save(self.dir / "bank")
        manifest = {"header": self.header, "completed": k, "matrix": self.matrix.to_dict(),
                    "memory": self.memory.to_dict()}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        tmp.replace(self.manifest_path)


def run_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / "runs" / config.method / f"seed{seed}"


def _header(config: ExperimentConfig, seed: int, order: Sequence[str], model: Backbone) -> dict:
    return {"method": config.method, "seed": seed, "task_order": list(order),
            "flags": None if config.method in BASELINES else asdict(config.resolved_flags()),
            "schedule": asdict(config.schedule), "memory_size": config.memory_size,
            "memory_mode": config.memory_mode, "backbone": model.digest()}


def run_one(config: ExperimentConfig, model: Backbone, stream: TaskStream, seed: int,
            order: Sequence[str] | None = None, stop_after: int | None = None) -> dict:
    """Run (or resume) one seed; returns the metrics report (also written to disk).

    ``stop_after`` interrupts the run after that many tasks (used to exercise resumption).
    """
    order = list(order) if order is not None else task_order(stream, seed, config.stream.last_k)
    state = RunState(run_dir(config, seed), _header(config, seed, order, model))
    state.load_or_start()
    if config.method in BASELINES:
        _run_baseline(config, model, stream, seed, order, state, stop_after)
    else:
        _run_prompts(config, model, stream, seed, order, state, stop_after)
    if state.completed < len(order):
        return {}
    report = metrics_report(state.matrix, seed, order, config.sequential)
    report["method"] = config.method
    report["params"] = parameter_report(config, model, len(order))
    (state.dir / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (state.dir / "matrix.csv").write_text(state.matrix.to_csv())
    return report


def _run_prompts(config: ExperimentConfig, model: Backbone, stream: TaskStream, seed: int,
                 order: list[str], state: RunState, stop_after: int | None) -> None:
    if not model.frozen:
        raise ContractError("prompt methods need a frozen backbone")
    flags, schedule = config.resolved_flags(), config.schedule
    caps = memory_capacities(config, stream, order)
    digest = model.digest()
    T = len(order)
    for k, tid in enumerate(order, start=1):
        if k <= state.completed:
            continue
        if stop_after is not None and k > stop_after:
            return
        test = stream.test(tid)
        if config.sequential and k > 1:
            state.matrix[k - 1, k] = task_jga(model, state.bank.last(), stream, tid, test, flags.msr)
        init_seed = stable_seed(seed, "init", tid)
        if flags.init == "cl":
            prompt = cl_init(state.bank, k, model, init_seed, tid)
        elif flags.init == "select":
            val_pairs = task_pairs(model, stream, tid, stream.val(tid), flags.msr)
            prompt = select_init(state.bank, model, val_pairs, init_seed, tid)
        else:
            prompt = init_prompt_random(model, init_seed, tid)
        memory_items = []
        if flags.mr:
            memory_items = [Item(t, d) for t in order[:k - 1] for d in state.memory.examples(stream, t)]
        before = {t: state.bank.get(t).digest() for t in state.bank.task_ids()}
        result = train_task(model, prompt, stream, tid, memory_items, flags, schedule,
                            stable_seed(seed, "train", tid), seen_tasks=order[:k - 1])
        for t, d in before.items():
            if state.bank.get(t).digest() != d:
                raise ContractError(f"forward training on {tid} changed the banked prompt of {t}")
        state.bank.add(tid, result.prompt)
        state.append("train_log.jsonl", result.log, k)
        state.matrix[k, k] = task_jga(model, state.bank.get(tid), stream, tid, test, flags.msr)
        if config.backward and k > 1:
            _backward_pass(config, model, stream, seed, order, k, state)
        if config.uses_memory or config.backward:
            state.memory.add(tid, sample_memory(stream, tid, caps[tid], seed), caps[tid])
        if k == T:
            for i, t in enumerate(order[:-1], start=1):
                state.matrix[T, i] = task_jga(model, state.bank.get(t), stream, t, stream.test(t), flags.msr)
        if model.digest() != digest:
            raise ContractError("the frozen backbone changed during a prompt run")
        state.checkpoint(k)


def _backward_pass(config: ExperimentConfig, model: Backbone, stream: TaskStream, seed: int,
                   order: list[str], k: int, state: RunState) -> None:
    """Gated retraining of every earlier prompt on D_k, accepted on that task's memory."""
    tid = order[k - 1]
    new_pairs = task_pairs(model, stream, tid, stream.train(tid))
    gates, accepts = [], []
    for prev in order[:k - 1]:
        memory = state.memory.examples(stream, prev)
        if not memory:
            continue
        memory_pairs = task_pairs(model, stream, prev, memory)
        old = state.bank.get(prev)
        res = backward_transfer_task(model, old, new_pairs, memory_pairs, config.schedule.backward_epochs,
                                     stable_seed(seed, "backward", tid, prev), config.schedule, prev_task=prev)
        gates += res.gate_log
        decision = accept_update(model, old, res.candidate, memory, build_query(stream.service(prev).slots),
                                 state.bank, prev)
        accepts.append(dict(decision.to_dict(), after_task=tid))
    state.append("gate_log.jsonl", gates, k)
    state.append("accept_log.jsonl", accepts, k)


def _run_baseline(config: ExperimentConfig, model: Backbone, stream: TaskStream, seed: int,
                  order: list[str], state: RunState, stop_after: int | None) -> None:
    """Fine-tuning / Replay: one shared, fully tunable model in the name format."""
    replay = config.method == "replay"
    caps = memory_capacities(config, stream, order)
    ckpt = state.dir / "model.json"
    shared = Backbone.load(ckpt) if state.completed and ckpt.exists() else model.clone()
    shared.unfreeze()
    T = len(order)
    for k, tid in enumerate(order, start=1):
        if k <= state.completed:
            continue
        if stop_after is not None and k > stop_after:
            return
        test = stream.test(tid)
        if k > 1:
            state.matrix[k - 1, k] = task_jga(shared, None, stream, tid, test, msr=False)
        extra = []
        if replay:
            extra = [(t, d) for t in order[:k - 1] for d in state.memory.examples(stream, t)]
        log_entries = baseline_train_task(shared, stream, tid, extra, config.schedule,
                                          stable_seed(seed, "finetune", tid))
        state.append("train_log.jsonl", log_entries, k)
        state.matrix[k, k] = task_jga(shared, None, stream, tid, test, msr=False)
        if replay:
            state.memory.add(tid, sample_memory(stream, tid, caps[tid], seed), caps[tid])
        if k == T:
            for i, t in enumerate(order[:-1], start=1):
                state.matrix[T, i] = task_jga(shared, None, stream, t, stream.test(t), msr=False)
        shared.save(ckpt)
        state.checkpoint(k, save_bank=False)


def baseline_train_task(shared: Backbone, stream: TaskStream, task_id: str, extra: Sequence[tuple],
                        schedule: Schedule, seed: int) -> list[dict]:
    """Train every backbone weight on D_k (plus replayed ``(task, dialog)`` pairs).

    Early stopping on D_k's validation loss; the best weights are restored.
    """
    rng = np.random.default_rng(seed)
    pairs = task_pairs(shared, stream, task_id, stream.train(task_id), msr=False)
    for t, d in extra:
        pairs += task_pairs(shared, stream, t, [d], msr=False)
    val_pairs = task_pairs(shared, stream, task_id, stream.val(task_id), msr=False)
    opt = ad.make_optimizer("adam", schedule.finetune_lr, schedule.clip_norm)
    best = dataset_loss(shared, None, val_pairs)
    best_params = {n: t.data.copy() for n, t in shared.params.items()}
    stall, entries = 0, []
    for epoch in range(schedule.finetune_epochs):
        total = 0.0
        for idx in minibatches(len(pairs), schedule.finetune_batch_size, rng):
            loss = batch_loss(shared, None, [pairs[i] for i in idx])
            total += loss.item() * len(idx)
            ad.backward(loss)
            opt.step(shared.groups)
        val = dataset_loss(shared, None, val_pairs)
        entries.append({"task": task_id, "phase": "finetune", "epoch": epoch,
                        "train_loss": total / len(pairs), "val_loss": val})
        if val < best:
            best, stall = val, 0
            best_params = {n: t.data.copy() for n, t in shared.params.items()}
        else:
            stall += 1
            if stall >= schedule.patience:
                break
    for n, t in shared.params.items():
        t.data[...] = best_params[n]
    return entries


# ---------------------------------------------------------------------------
# whole experiments and summaries


def parameter_report(config: ExperimentConfig, model: Backbone, n_tasks: int) -> dict:
    backbone = model.num_params()
    if config.method in BASELINES:
        tunable = backbone
        stored = backbone
    else:
        tunable = count_tunable_params(model.config)
        stored = tunable * n_tasks
    return {"backbone_params": backbone, "tunable_per_task": tunable,
            "tunable_fraction": tunable / backbone, "stored_params": stored,
            "memory_per_task": config.memory_size if (config.uses_memory or config.backward) else 0}


def prepare(config: ExperimentConfig) -> tuple[Backbone, TaskStream]:
    stream = load_stream(config.stream)
    extra = stream if config.stream.source == "ingest" else None
    vocab = build_vocab(extra)
    model = obtain_backbone(config.backbone, vocab, Path(config.output_dir) / "backbones", extra)
    return model, stream


def run_experiment(config: ExperimentConfig, model: Backbone | None = None,
                   stream: TaskStream | None = None) -> dict:
    """Run every seed of ``config``; returns ``{"runs": [...], "summary": {...}}``."""
    if model is None or stream is None:
        model, stream = prepare(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs" / config.method).mkdir(parents=True, exist_ok=True)
    (out / "runs" / config.method / "config.json").write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=1, default=list) + "\n")
    jobs = [(seed, config.orders[n] if config.orders is not None else None) for n, seed in enumerate(config.seeds)]
    if config.workers > 1 and len(jobs) > 1:
        reports = run_many([(config, seed, order) for seed, order in jobs], model, stream, config.workers)
    else:
        reports = []
        for seed, order in jobs:
            log.info("%s seed %d", config.method, seed)
            reports.append(run_one(config, model, stream, seed, order))
    return {"runs": reports, "summary": summarize_reports(reports)}


def run_many(jobs: Sequence[tuple[ExperimentConfig, int, Sequence[str] | None]], model: Backbone,
             stream: TaskStream, workers: int) -> list[dict]:
    """Run independent ``(config, seed, order)`` jobs in a process pool, results in job order.

    Every run owns its directory and derives all randomness from its own seed,
    so the reports equal those of sequential execution.
    """
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), initializer=_worker_init,
                             initargs=(model, stream)) as pool:
        futures = [pool.submit(_worker_run, config, seed, order) for config, seed, order in jobs]
        return [f.result() for f in futures]


_WORKER: dict[str, Any] = {}


def _worker_init(model: Backbone, stream: TaskStream) -> None:
    _WORKER["model"], _WORKER["stream"] = model, stream


def _worker_run(config: ExperimentConfig, seed: int, order: Sequence[str] | None) -> dict:
    log.info("%s seed %d", config.method, seed)
    return run_one(config, _WORKER["model"], _WORKER["stream"], seed, order)


def _mean_std(values: Sequence[float | None]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": statistics.fmean(vals), "std": statistics.stdev(vals) if len(vals) >= 2 else None,
            "n": len(vals)}


def summarize_reports(reports: Sequence[dict]) -> dict:
    reports = [r for r in reports if r]
    by_method: dict[str, list[dict]] = {}
    for r in reports:
        by_method.setdefault(r["method"], []).append(r)
    out = {}
    for method, rs in sorted(by_method.items()):
        out[method] = {m: _mean_std([r[m] for r in rs]) for m in ("avg_jga", "fwt", "bwt")}
        out[method]["params"] = rs[0]["params"]
        out[method]["seeds"] = [r["seed"] for r in rs]
    return out


def collect_reports(directory: str | os.PathLike) -> list[dict]:
    root = Path(directory)
    paths = sorted(root.glob("runs/*/seed*/metrics.json")) or sorted(root.glob("**/metrics.json"))
    return [json.loads(p.read_text()) for p in paths]


def summarize(directory: str | os.PathLike) -> tuple[str, str, dict]:
    """Text table, CSV and the summary dict for every finished run under ``directory``."""
    reports = collect_reports(directory)
    if not reports:
        raise ContractError(f"no finished runs under {directory}")
    summary = summarize_reports(reports)
    show_std = any(s[m]["std"] is not None for s in summary.values() for m in ("avg_jga", "fwt", "bwt"))

    def cell(stat: dict) -> str:
        if stat["mean"] is None:
            return "-"
        text = f"{100 * stat['mean']:.1f}"
        if show_std and stat["std"] is not None:
            text += f" ± {100 * stat['std']:.1f}"
        return text

    header = ["method", "runs", "avg_jga", "fwt", "bwt", "tune_params", "tune_fraction", "stored_params", "memory"]
    rows = []
    for method, s in summary.items():
        p = s["params"]
        rows.append([method, str(len(s["seeds"])), cell(s["avg_jga"]), cell(s["fwt"]), cell(s["bwt"]),
                     f"{p['tunable_per_task']:,}", f"{100 * p['tunable_fraction']:.3f}%",
                     f"{p['stored_params']:,}", str(p["memory_per_task"])])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [header] + rows)

    csv_header = ["method", "runs"]
    for m in ("avg_jga", "fwt", "bwt"):
        csv_header += [f"{m}_mean"] + ([f"{m}_std"] if show_std else [])
    csv_header += ["tunable_per_task", "tunable_fraction", "stored_params", "memory_per_task"]
    lines = [",".join(csv_header)]
    for method, s in summary.items():
        row = [method, str(len(s["seeds"]))]
        for m in ("avg_jga", "fwt", "bwt"):
            row.append("" if s[m]["mean"] is None else repr(s[m]["mean"]))
            if show_std:
                row.append("" if s[m]["std"] is None else repr(s[m]["std"]))
        p = s["params"]
        row += [str(p["tunable_per_task"]), repr(p["tunable_fraction"]), str(p["stored_params"]),
                str(p["memory_per_task"])]
        lines.append(",".join(row))
    return text, "\n".join(lines) + "\n", summary


def check_run_invariants(directory: str | os.PathLike) -> list[str]:
    """Re-verify logged invariants of finished runs; returns a list of violations."""
    problems = []
    for mdir in sorted(Path(directory).glob("runs/*/seed*")):
        for name, rule in (("gate_log.jsonl", lambda r: not r["applied"] or r["dot"] > 0),
                           ("accept_log.jsonl", lambda r: not r["accepted"] or
                            (r["new_loss"] < r["old_loss"] and r["new_jga"] >= r["old_jga"]))):
            path = mdir / name
            if not path.exists():
                continue
            for n, line in enumerate(path.read_text().splitlines(), start=1):
                if not rule(json.loads(line)):
                    problems.append(f"{path}:{n}: invariant violated")
        metrics = mdir / "metrics.json"
        if metrics.exists():
            report = json.loads(metrics.read_text())
            if report["method"] in ("prompt_tuning", "cpt", "cpt_mem") and report["bwt"] not in (None, 0.0):
                problems.append(f"{metrics}: BWT {report['bwt']} without backward transfer")
    return problems


def bwt_warnings(directory: str | os.PathLike) -> list[str]:
    """Negative BWT under gated backward transfer. Acceptance is judged on memory, BWT on test data,
    so this is an empirical outcome rather than a logged invariant."""
    out = []
    for metrics in sorted(Path(directory).glob("runs/cpt_mem_back/seed*/metrics.json")):
        bwt = json.loads(metrics.read_text())["bwt"]
        if bwt is not None and bwt < 0:
            out.append(f"warning: {metrics}: negative BWT {bwt} with gated backward transfer")
    return out
