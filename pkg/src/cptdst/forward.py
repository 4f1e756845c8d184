"""Forward transfer: prompt initialization, query fusion, memory replay, per-task training."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .codec import Query, Slot, build_query
from .data import Item, Pair, batch_loss, dataset_loss, encode_for, minibatches, task_jga, task_pairs
from .errors import ContractError, NonFiniteError
from .model import Backbone, SoftPrompt, init_prompt_random
from .stream import TaskStream

log = logging.getLogger(__name__)


class PromptBank:
    """Frozen copies of every completed task's prompt, in completion order."""

    def __init__(self):
        self._prompts: dict[str, SoftPrompt] = {}

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._prompts

    def __len__(self) -> int:
        return len(self._prompts)

    def task_ids(self) -> list[str]:
        return list(self._prompts)

    def get(self, task_id: str) -> SoftPrompt:
        return self._prompts[task_id]

    def last(self) -> SoftPrompt:
        return self._prompts[self.task_ids()[-1]]

    @staticmethod
    def _frozen_copy(prompt: SoftPrompt, task_id: str) -> SoftPrompt:
        stored = SoftPrompt(task_id, ad.Tensor(prompt.embeddings.data.copy()))
        stored.embeddings.data.setflags(write=False)
        return stored

    def add(self, task_id: str, prompt: SoftPrompt) -> None:
        if task_id in self._prompts:
            raise ContractError(f"task {task_id!r} already has a banked prompt")
        self._prompts[task_id] = self._frozen_copy(prompt, task_id)

    def replace(self, task_id: str, prompt: SoftPrompt) -> None:
        """Only the backward-transfer acceptance path calls this."""
        if task_id not in self._prompts:
            raise KeyError(task_id)
        self._prompts[task_id] = self._frozen_copy(prompt, task_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        for tid, p in self._prompts.items():
            h.update(tid.encode())
            h.update(p.embeddings.data.tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "index.json").write_text(json.dumps(self.task_ids()))
        for n, tid in enumerate(self.task_ids()):
            self._prompts[tid].save(directory / f"prompt_{n:03d}.json")

    @classmethod
    def load(cls, directory: str | Path) -> "PromptBank":
        directory = Path(directory)
        bank = cls()
        for n, tid in enumerate(json.loads((directory / "index.json").read_text())):
            bank.add(tid, SoftPrompt.load(directory / f"prompt_{n:03d}.json"))
        return bank


# ---------------------------------------------------------------------------
# initialization


def cl_init(bank: PromptBank, k: int, model: Backbone, seed: int, task_id: str = "") -> SoftPrompt:
    """Copy of the previous task's prompt; random vocabulary rows for the first task."""
    if k < 1:
        raise ContractError("task position k is 1-based")
    if k == 1 or not len(bank):
        return init_prompt_random(model, seed, task_id)
    return bank.last().copy(task_id)


def select_init(bank: PromptBank, model: Backbone, val_pairs: Sequence[Pair], seed: int,
                task_id: str = "") -> SoftPrompt:
    """Copy of the banked prompt with the lowest mean per-token validation loss.

    Ties go to the most recently completed task; an empty bank falls back to
    random initialization.
    """
    if not val_pairs:
        raise ContractError("SelectInit needs a non-empty validation set")
    if not len(bank):
        return init_prompt_random(model, seed, task_id)
    best_id, best = None, None
    for tid in bank.task_ids():
        loss = dataset_loss(model, bank.get(tid), val_pairs)
        if best is None or loss <= best:
            best_id, best = tid, loss
    return bank.get(best_id).copy(task_id)


# ---------------------------------------------------------------------------
# query fusion


@dataclass
class FusionSample:
    n1: int
    n2: int
    slots: tuple[Slot, ...]
    injected: frozenset[Slot]
    query: Query

    def check(self, n_current: int) -> None:
        if self.injected and not 1 <= self.n2 <= self.n1 <= n_current:
            raise ContractError(f"fusion bounds violated: n1={self.n1} n2={self.n2} |S|={n_current}")


def fuse_query(current_slots: Sequence[Slot], previous_slots: Sequence[Slot],
               rng: np.random.Generator) -> FusionSample:
    """Three-step fusion: keep n1 current slots, inject n2 previous slots, shuffle.

    n1 ~ U{1..|S_k|}, n2 ~ U{1..n1} (clamped to the pool size). Previous slots
    whose description coincides with a current slot's are not injectable since
    they would carry contradictory targets. Without a pool the plain query is
    returned.
    """
    current = tuple(current_slots)
    if not current:
        raise ContractError("fusion needs at least one current slot")
    taken = {s.description for s in current}
    pool = []
    for s in previous_slots:
        if s.description not in taken:
            taken.add(s.description)
            pool.append(s)
    if not pool:
        return FusionSample(len(current), 0, current, frozenset(), build_query(current))
    n1 = int(rng.integers(1, len(current) + 1))
    kept = [current[i] for i in sorted(rng.choice(len(current), size=n1, replace=False))]
    n2 = min(int(rng.integers(1, n1 + 1)), len(pool))
    injected = [pool[i] for i in rng.choice(len(pool), size=n2, replace=False)]
    mixed = kept + injected
    slots = tuple(mixed[i] for i in rng.permutation(len(mixed)))
    return FusionSample(n1, n2, slots, frozenset(injected), build_query(slots))


def fuse_memory_queries(task_id: str, seen_slots: Mapping[str, Sequence[Slot]],
                        rng: np.random.Generator) -> FusionSample:
    """Fusion for a memory example of ``task_id``: inject from every other seen task."""
    if task_id not in seen_slots:
        raise ContractError(f"memory task {task_id!r} is not among the seen tasks")
    pool = [s for tid, slots in seen_slots.items() if tid != task_id for s in slots]
    return fuse_query(seen_slots[task_id], pool, rng)


# ---------------------------------------------------------------------------
# per-task training


@dataclass
class Flags:
    msr: bool = True
    init: str = "cl"
    qf: bool = True
    mr: bool = False

    def __post_init__(self):
        if self.init not in ("random", "cl", "select"):
            raise ContractError(f"unknown init strategy {self.init!r}")
        if self.qf and not self.msr:
            raise ContractError("query fusion needs the masked-span formulation")


@dataclass
class Schedule:
    phase_a_epochs: int = 10
    phase_b_epochs: int = 10
    batch_size: int = 16
    lr: float = 0.3
    optimizer: str = "adam"
    clip_norm: float | None = 1.0
    patience: int = 5
    log_val_jga: bool = False
    backward_epochs: int = 5
    backward_lr: float = 0.3
    backward_optimizer: str = "sgd"
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 8


@dataclass
class TrainResult:
    prompt: SoftPrompt
    log: list[dict] = field(default_factory=list)
    stopped_early: dict[str, bool] = field(default_factory=dict)
    fusion_samples: list[FusionSample] = field(default_factory=list)
    pairs_seen: list[tuple[str, str, list[int], list[int]]] = field(default_factory=list)


def _phase_pairs(model: Backbone, stream: TaskStream, items: Sequence[Item], task_id: str,
                 seen_slots: Mapping[str, Sequence[Slot]], fused: bool, msr: bool,
                 rng: np.random.Generator, samples: list[FusionSample] | None) -> list[tuple[Item, Pair]]:
    """Encode one epoch's examples; fused queries are redrawn for every example."""
    prev_pool = [s for tid, slots in seen_slots.items() if tid != task_id for s in slots]
    out = []
    for item in items:
        if fused:
            if item.task_id == task_id:
                sample = fuse_query(stream.service(task_id).slots, prev_pool, rng)
            else:
                sample = fuse_memory_queries(item.task_id, seen_slots, rng)
            sample.check(len(stream.service(item.task_id).slots))
            if samples is not None:
                samples.append(sample)
            out.append((item, encode_for(model, stream, item.task_id, item.dialog, msr, sample.query)))
        else:
            out.append((item, encode_for(model, stream, item.task_id, item.dialog, msr)))
    return out


def train_task(model: Backbone, prompt: SoftPrompt, stream: TaskStream, task_id: str,
               memory: Sequence[Item], flags: Flags, schedule: Schedule, seed: int,
               seen_tasks: Sequence[str] = (), record_pairs: bool = False) -> TrainResult:
    """Two-phase prompt training for one task.

    Phase A runs over D_k (plus the replay memory when ``flags.mr``) with fused
    queries when ``flags.qf``; phase B runs over D_k with the task's own query.
    Each phase stops early after ``schedule.patience`` epochs without a better
    validation loss. The prompt with the best validation loss is returned.
    """
    if flags.mr is False and memory:
        raise ContractError("memory given but memory replay is disabled")
    rng = np.random.default_rng(seed)
    prompt = prompt.copy(task_id)
    group = prompt.group()
    opt = ad.make_optimizer(schedule.optimizer, schedule.lr, schedule.clip_norm)
    own = [Item(task_id, d) for d in stream.train(task_id)]
    val_dialogs = stream.val(task_id)
    val_pairs = task_pairs(model, stream, task_id, val_dialogs, flags.msr)
    seen_slots = {t: stream.service(t).slots for t in list(seen_tasks) + [task_id]}
    result = TrainResult(prompt)
    best_loss, best_data = dataset_loss(model, prompt, val_pairs), prompt.embeddings.data.copy()

    phases = [("A", schedule.phase_a_epochs, list(own) + list(memory) if flags.mr else own, flags.qf),
              ("B", schedule.phase_b_epochs, own, False)]
    for phase, epochs, items, fused in phases:
        stall, phase_best = 0, float("inf")
        result.stopped_early[phase] = False
        for epoch in range(epochs):
            t0 = time.perf_counter()
            samples = result.fusion_samples if record_pairs else None
            pairs = _phase_pairs(model, stream, items, task_id, seen_slots, fused, flags.msr, rng, samples)
            if record_pairs:
                result.pairs_seen.extend((phase, it.task_id, p[0], p[1]) for it, p in pairs)
            total, count = 0.0, 0
            for idx in minibatches(len(pairs), schedule.batch_size, rng):
                batch = [pairs[i][1] for i in idx]
                loss = batch_loss(model, prompt, batch)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"task {task_id} phase {phase} epoch {epoch}: loss {value}")
                ad.backward(loss)
                opt.step([group])
                total += value * len(idx)
                count += len(idx)
            val_loss = dataset_loss(model, prompt, val_pairs)
            entry = {
                "task": task_id, "phase": phase, "epoch": epoch,
                "train_loss": total / max(count, 1), "val_loss": val_loss,
                "val_jga": (task_jga(model, prompt, stream, task_id, val_dialogs, flags.msr)
                            if schedule.log_val_jga else None),
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            }
            result.log.append(entry)
            if val_loss < best_loss:
                best_loss, best_data = val_loss, prompt.embeddings.data.copy()
            if val_loss < phase_best:
                phase_best, stall = val_loss, 0
            else:
                stall += 1
                if stall >= schedule.patience:
                    result.stopped_early[phase] = True
                    break
    prompt.embeddings.data[...] = best_data
    return result
