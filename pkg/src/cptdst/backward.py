"""Memory-guided backward transfer: gated retraining of earlier prompts on new data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .codec import Query
from .data import Pair, batch_loss, dataset_loss, encode_all, evaluate_jga, minibatches
from .errors import ContractError, NonFiniteError
from .forward import PromptBank, Schedule
from .model import Backbone, SoftPrompt
from .stream import Dialog


@dataclass(frozen=True)
class GateDecision:
    dot: float
    applied: bool


def gated_gradient(g_ori: np.ndarray, g_ref: np.ndarray) -> tuple[np.ndarray, GateDecision]:
    """Keep ``g_ori`` only when it has a strictly positive inner product with ``g_ref``."""
    g_ori = np.asarray(g_ori, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g_ori.shape != g_ref.shape:
        raise ContractError(f"gradient shapes differ: {g_ori.shape} vs {g_ref.shape}")
    if not (np.isfinite(g_ori).all() and np.isfinite(g_ref).all()):
        raise NonFiniteError("gated_gradient got non-finite entries")
    dot = float(g_ori.reshape(-1) @ g_ref.reshape(-1))
    if dot > 0:
        return g_ori.copy(), GateDecision(dot, True)
    return np.zeros_like(g_ori), GateDecision(dot, False)


@dataclass
class BackwardResult:
    candidate: SoftPrompt
    gate_log: list[dict] = field(default_factory=list)

    @property
    def applied_fraction(self) -> float:
        if not self.gate_log:
            return 0.0
        return sum(e["applied"] for e in self.gate_log) / len(self.gate_log)


def _prompt_grad(model: Backbone, prompt: SoftPrompt, batch: Sequence[Pair]) -> np.ndarray:
    prompt.embeddings.grad = None
    ad.backward(batch_loss(model, prompt, batch))
    grad = prompt.embeddings.grad
    prompt.embeddings.grad = None
    return grad


def backward_transfer_task(model: Backbone, prompt: SoftPrompt, new_pairs: Sequence[Pair],
                           memory_pairs: Sequence[Pair], epochs: int, seed: int,
                           schedule: Schedule | None = None, prev_task: str = "",
                           on_step=None) -> BackwardResult:
    """Retrain a copy of an earlier task's prompt on the new task's data.

    Every step draws one batch from ``new_pairs`` (giving g_ori) and one from
    ``memory_pairs`` (giving g_ref); the gated gradient drives the update and a
    rejected step leaves the candidate untouched. ``memory_pairs`` are cycled
    with reshuffling. ``on_step(candidate, decision)`` is called after each step.
    """
    if not memory_pairs:
        raise ContractError("backward transfer needs a non-empty memory for the earlier task")
    schedule = schedule or Schedule()
    rng = np.random.default_rng(seed)
    candidate = prompt.copy()
    group = candidate.group()
    opt = ad.make_optimizer(schedule.backward_optimizer, schedule.backward_lr, schedule.clip_norm)
    result = BackwardResult(candidate)
    mem_order, mem_pos = rng.permutation(len(memory_pairs)), 0
    step = 0
    for _ in range(epochs):
        for idx in minibatches(len(new_pairs), schedule.batch_size, rng):
            take = []
            while len(take) < min(schedule.batch_size, len(memory_pairs)):
                if mem_pos == len(mem_order):
                    mem_order, mem_pos = rng.permutation(len(memory_pairs)), 0
                take.append(mem_order[mem_pos])
                mem_pos += 1
            g_ori = _prompt_grad(model, candidate, [new_pairs[i] for i in idx])
            g_ref = _prompt_grad(model, candidate, [memory_pairs[i] for i in take])
            g, decision = gated_gradient(g_ori, g_ref)
            result.gate_log.append({"prev_task": prev_task, "step": step, "dot": decision.dot,
                                    "applied": decision.applied})
            if decision.applied:
                candidate.embeddings.grad = g
                opt.step([group])
            if on_step is not None:
                on_step(candidate, decision)
            step += 1
    return result


@dataclass(frozen=True)
class AcceptDecision:
    prev_task: str
    old_loss: float
    new_loss: float
    old_jga: float
    new_jga: float
    accepted: bool

    def to_dict(self) -> dict:
        return {"prev_task": self.prev_task, "old_loss": self.old_loss, "new_loss": self.new_loss,
                "old_jga": self.old_jga, "new_jga": self.new_jga, "accepted": self.accepted}


def accept_rule(old_loss: float, new_loss: float, old_jga: float, new_jga: float) -> bool:
    """Strictly lower memory loss and no lower memory JGA."""
    return new_loss < old_loss and new_jga >= old_jga


def accept_update(model: Backbone, prompt: SoftPrompt, candidate: SoftPrompt, memory: Sequence[Dialog],
                  query: Query, bank: PromptBank | None = None, task_id: str | None = None) -> AcceptDecision:
    """Accept iff memory loss strictly drops and memory JGA does not drop.

    On acceptance the bank entry for ``task_id`` is replaced by ``candidate``.
    """
    pairs = encode_all(model, memory, query)
    old_loss = dataset_loss(model, prompt, pairs, per_token=False)
    new_loss = dataset_loss(model, candidate, pairs, per_token=False)
    old_jga = evaluate_jga(model, prompt, query, memory)
    new_jga = evaluate_jga(model, candidate, query, memory)
    accepted = accept_rule(old_loss, new_loss, old_jga, new_jga)
    tid = task_id if task_id is not None else prompt.task_id
    if accepted and bank is not None:
        bank.replace(tid, candidate)
    return AcceptDecision(tid, old_loss, new_loss, old_jga, new_jga, accepted)
