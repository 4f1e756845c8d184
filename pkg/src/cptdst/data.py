"""Encoding, batching and evaluation helpers shared by the training loops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .codec import (NONE_VALUE, Query, build_query, format_example, name_format_example, padded_values,
                    parse_name_format, parse_prediction)
from .metrics import joint_goal_accuracy
from .model import Backbone, SoftPrompt
from .stream import Dialog, TaskStream

EVAL_BATCH = 64


@dataclass(frozen=True)
class Item:
    """A dialog tagged with the task it was drawn from."""

    task_id: str
    dialog: Dialog


Pair = tuple[list[int], list[int]]


def task_query(stream: TaskStream, task_id: str) -> Query:
    return build_query(stream.service(task_id).slots)


def encode(model: Backbone, dialog: Dialog, query: Query, service_id: str | None = None) -> Pair:
    fe = format_example(dialog.text, dialog.values, query, service_id)
    return model.vocab.encode(fe.input_text), model.vocab.encode(fe.target_text, add_eos=True)


def encode_all(model: Backbone, dialogs: Sequence[Dialog], query: Query) -> list[Pair]:
    return [encode(model, d, query) for d in dialogs]


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batch_loss(model: Backbone, prompt: SoftPrompt | None, pairs: Sequence[Pair]) -> ad.Tensor:
    """Summed token NLL over the batch, divided by the number of examples."""
    loss = model.loss([p[0] for p in pairs], [p[1] for p in pairs], prompt)
    return loss * (1.0 / len(pairs))


def dataset_loss(model: Backbone, prompt: SoftPrompt | None, pairs: Sequence[Pair],
                 per_token: bool = True) -> float:
    """Loss over a whole dataset without recording a graph."""
    total, tokens = 0.0, 0
    with ad.no_grad():
        for idx in minibatches(len(pairs), EVAL_BATCH, None):
            chunk = [pairs[i] for i in idx]
            total += model.loss([p[0] for p in chunk], [p[1] for p in chunk], prompt).item()
            tokens += sum(len(p[1]) for p in chunk)
    return total / tokens if per_token else total


def max_target_len(query: Query) -> int:
    return min(4 * len(query.slots) + 4, 64)


def predict(model: Backbone, prompt: SoftPrompt | None, query: Query, dialogs: Sequence[Dialog]) -> list[dict]:
    inputs = [encode(model, d, query)[0] for d in dialogs]
    out = []
    for idx in minibatches(len(inputs), EVAL_BATCH, None):
        for ids in model.generate([inputs[i] for i in idx], prompt, max_target_len(query)):
            out.append(parse_prediction(model.vocab.decode(ids), query))
    return out


def evaluate_jga(model: Backbone, prompt: SoftPrompt | None, query: Query, dialogs: Sequence[Dialog]) -> float:
    preds = predict(model, prompt, query, dialogs)
    golds = [padded_values(d.values, query) for d in dialogs]
    return joint_goal_accuracy(preds, golds)


# ---------------------------------------------------------------------------
# task-level helpers that switch between the masked-span and name formats


def encode_named(model: Backbone, dialog: Dialog, service_name: str) -> Pair:
    fe = name_format_example(dialog.text, service_name, dialog.values)
    return model.vocab.encode(fe.input_text), model.vocab.encode(fe.target_text, add_eos=True)


def encode_for(model: Backbone, stream: TaskStream, task_id: str, dialog: Dialog, msr: bool = True,
               query: Query | None = None) -> Pair:
    """Training pair for ``dialog`` of ``task_id``; ``query`` overrides the task query (fusion)."""
    if not msr:
        return encode_named(model, dialog, stream.service(task_id).name)
    return encode(model, dialog, query or task_query(stream, task_id), task_id if query is not None else None)


def task_pairs(model: Backbone, stream: TaskStream, task_id: str, dialogs: Sequence[Dialog],
               msr: bool = True) -> list[Pair]:
    return [encode_for(model, stream, task_id, d, msr) for d in dialogs]


def predict_named(model: Backbone, prompt: SoftPrompt | None, stream: TaskStream, task_id: str,
                  dialogs: Sequence[Dialog]) -> list[dict]:
    service = stream.service(task_id)
    names = [s.name for s in service.slots]
    inputs = [encode_named(model, d, service.name)[0] for d in dialogs]
    out = []
    for idx in minibatches(len(inputs), EVAL_BATCH, None):
        for ids in model.generate([inputs[i] for i in idx], prompt, min(6 * len(names) + 4, 64)):
            parsed = parse_name_format(model.vocab.decode(ids))
            out.append({n: parsed.get(n, NONE_VALUE) for n in names})
    return out


def task_jga(model: Backbone, prompt: SoftPrompt | None, stream: TaskStream, task_id: str,
             dialogs: Sequence[Dialog], msr: bool = True) -> float:
    """JGA of ``dialogs`` under the task's own (unfused) query or the name format."""
    if msr:
        return evaluate_jga(model, prompt, task_query(stream, task_id), dialogs)
    query = task_query(stream, task_id)
    golds = [padded_values(d.values, query) for d in dialogs]
    return joint_goal_accuracy(predict_named(model, prompt, stream, task_id, dialogs), golds)
