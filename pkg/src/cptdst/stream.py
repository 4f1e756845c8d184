"""Task streams: synthetic generation, corpus ingest/export, splits and memory."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import lexicon
from .codec import NONE_VALUE, SEP, Slot
from .errors import ContractError, CorpusError

log = logging.getLogger(__name__)

SPLIT_RATIO = (7, 1, 2)


@dataclass
class Dialog:
    text: str
    values: dict[str, str] = field(default_factory=dict)


@dataclass
class Service:
    id: str
    name: str
    slots: list[Slot]
    dialogs: list[Dialog] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate slot names in service {self.id!r}")
        known = set(names)
        for d in self.dialogs:
            stray = set(d.values) - known
            if stray:
                raise ContractError(f"dialog references unknown slots {sorted(stray)} in {self.id!r}")


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class TaskStream:
    services: list[Service]
    splits: dict[str, Split]
    seed: int = 0
    skipped: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.services]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate service ids in stream")

    @property
    def task_ids(self) -> list[str]:
        return [s.id for s in self.services]

    def service(self, task_id: str) -> Service:
        for s in self.services:
            if s.id == task_id:
                return s
        raise KeyError(task_id)

    def part(self, task_id: str, split: str) -> list[Dialog]:
        dialogs = self.service(task_id).dialogs
        return [dialogs[i] for i in getattr(self.splits[task_id], split)]

    def train(self, task_id: str) -> list[Dialog]:
        return self.part(task_id, "train")

    def val(self, task_id: str) -> list[Dialog]:
        return self.part(task_id, "val")

    def test(self, task_id: str) -> list[Dialog]:
        return self.part(task_id, "test")

    def reorder(self, order: Sequence[str]) -> "TaskStream":
        if sorted(order) != sorted(self.task_ids):
            raise ContractError("task order must be a permutation of the stream's tasks")
        return TaskStream([self.service(t) for t in order], self.splits, self.seed, self.skipped)

    def subset(self, task_ids: Sequence[str]) -> "TaskStream":
        return TaskStream([self.service(t) for t in task_ids],
                          {t: self.splits[t] for t in task_ids}, self.seed, self.skipped)

    def texts(self) -> Iterable[str]:
        for s in self.services:
            yield s.name
            for slot in s.slots:
                yield slot.name
                yield slot.description
            for d in s.dialogs:
                yield d.text
                yield from d.values.values()

    def to_corpus(self) -> dict:
        """Corpus-file payload; split membership is carried per dialog."""
        out = []
        for s in self.services:
            membership = {}
            for part in ("train", "val", "test"):
                for i in getattr(self.splits[s.id], part):
                    membership[i] = part
            out.append({
                "id": s.id,
                "name": s.name,
                "slots": [{"name": sl.name, "description": sl.description} for sl in s.slots],
                "dialogs": [{"text": d.text, "values": dict(d.values), "split": membership[i]}
                            for i, d in enumerate(s.dialogs)],
            })
        return {"services": out}

    def export(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_corpus(), indent=1))

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "task_order": self.task_ids,
            "splits": {t: {"train": sp.train, "val": sp.val, "test": sp.test} for t, sp in self.splits.items()},
        }


# ---------------------------------------------------------------------------
# splitting and seeding


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed from mixed parts (independent of PYTHONHASHSEED)."""
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode())


def split_indices(n: int, seed: int, ratio: Sequence[int] = SPLIT_RATIO) -> Split:
    """Seeded shuffle then ratio cut; every part non-empty when n >= 3."""
    perm = np.random.default_rng(seed).permutation(n).tolist()
    total = sum(ratio)
    n_train = round(n * ratio[0] / total)
    n_val = round(n * ratio[1] / total)
    if n >= 3:
        n_val = max(1, n_val)
        n_train = min(max(1, n_train), n - n_val - 1)
    return Split(sorted(perm[:n_train]), sorted(perm[n_train:n_train + n_val]), sorted(perm[n_train + n_val:]))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    n_services: int = 15
    slots_per_service: tuple[int, int] = (2, 5)
    slot_pool_size: int = 12
    templates_per_service: int = 3
    samples_per_service: tuple[int, int] = (183, 731)
    mention_prob: float = 0.6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.slots_per_service
        s_lo, s_hi = self.samples_per_service
        if min(self.n_services, self.slot_pool_size, self.templates_per_service, lo) < 1:
            raise ContractError("generator counts must be positive")
        if not 2 <= lo <= hi <= 10:
            raise ContractError("slots per service must lie within [2, 10]")
        if not 32 <= s_lo <= s_hi <= 4096:
            raise ContractError("samples per service must lie within [32, 4096]")
        if self.slot_pool_size > len(lexicon.SLOT_TYPES):
            raise ContractError(f"slot pool is limited to {len(lexicon.SLOT_TYPES)} types")
        if self.n_services > 3 * len(lexicon.DOMAINS):
            raise ContractError(f"at most {3 * len(lexicon.DOMAINS)} services can be generated")
        if not 0 < self.mention_prob <= 1:
            raise ContractError("mention_prob must lie in (0, 1]")


def generator_lexicon() -> list[str]:
    """Every text fragment the generator can emit (for building a closed vocabulary)."""
    texts = list(lexicon.MARKERS) + list(lexicon.SYSTEM_LINES) + list(lexicon.USER_CLOSERS) + [SEP, NONE_VALUE]
    for spec in lexicon.SLOT_TYPES.values():
        texts += spec["names"] + spec["values"]
        texts += [f.replace("{v}", "") for f in spec["fragments"]]
        texts += [d.replace("{noun}", "") for d in spec["descriptions"]]
    for name, dom in lexicon.DOMAINS.items():
        texts += [dom["noun"]] + dom["intents"] + [f"{name}_{i}" for i in range(1, 4)]
    return texts


def _service_specs(config: GeneratorConfig, rng: np.random.Generator) -> list[tuple[str, str, list[str]]]:
    """(service id, domain, slot types) for each generated service."""
    pool = sorted(lexicon.SLOT_TYPES)
    pool = [pool[i] for i in sorted(rng.choice(len(pool), size=config.slot_pool_size, replace=False))]
    domains = sorted(lexicon.DOMAINS)
    candidates = [(d, v) for v in range(1, 4) for d in domains]
    chosen = [candidates[i] for i in rng.permutation(len(candidates))]
    specs = []
    for domain, version in chosen:
        if len(specs) == config.n_services:
            break
        allowed = [t for t in lexicon.DOMAINS[domain]["types"] if t in pool]
        lo, hi = config.slots_per_service
        if len(allowed) < lo:
            continue
        k = int(rng.integers(lo, min(hi, len(allowed)) + 1))
        types = [allowed[i] for i in sorted(rng.choice(len(allowed), size=k, replace=False))]
        specs.append((f"{domain}_{version}", domain, types))
    if len(specs) < config.n_services:
        raise ContractError("slot pool too small for the requested number of services")
    return specs


def _make_service(sid: str, domain: str, types: list[str], config: GeneratorConfig,
                  rng: np.random.Generator) -> Service:
    dom = lexicon.DOMAINS[domain]
    slots, fragments = [], {}
    for t in types:
        spec = lexicon.SLOT_TYPES[t]
        variant = int(rng.integers(len(spec["names"])))
        desc = spec["descriptions"][int(rng.integers(len(spec["descriptions"])))].format(noun=dom["noun"])
        slots.append(Slot(spec["names"][variant], desc, sid))
        fragments[slots[-1].name] = (t, spec["fragments"])
    intents = [dom["intents"][i % len(dom["intents"])] for i in rng.permutation(len(dom["intents"]))]
    templates = [(intents[i % len(intents)], lexicon.SYSTEM_LINES[int(rng.integers(len(lexicon.SYSTEM_LINES)))])
                 for i in range(config.templates_per_service)]
    n = int(rng.integers(config.samples_per_service[0], config.samples_per_service[1] + 1))
    dialogs = [_make_dialog(slots, fragments, templates, config, rng) for _ in range(n)]
    return Service(sid, sid, slots, dialogs)


def _make_dialog(slots, fragments, templates, config, rng) -> Dialog:
    intent, system = templates[int(rng.integers(len(templates)))]
    mentioned = [s for s in slots if rng.random() < config.mention_prob]
    order = [mentioned[i] for i in rng.permutation(len(mentioned))]
    values, phrases = {}, []
    for slot in order:
        t, frags = fragments[slot.name]
        value = lexicon.SLOT_TYPES[t]["values"][int(rng.integers(len(lexicon.SLOT_TYPES[t]["values"])))]
        values[slot.name] = value
        phrases.append(frags[int(rng.integers(len(frags)))].format(v=value))
    cut = int(rng.integers(0, len(phrases) + 1))
    first = " ".join([intent] + phrases[:cut])
    text = f"user : {first} . system : {system}"
    if cut < len(phrases):
        text += " user : " + " ".join(phrases[cut:]) + " ."
    else:
        text += f" user : {lexicon.USER_CLOSERS[int(rng.integers(len(lexicon.USER_CLOSERS)))]} ."
    return Dialog(text, {s.name: values[s.name] for s in slots if s.name in values})


def generate_stream(config: GeneratorConfig) -> TaskStream:
    rng = np.random.default_rng(config.seed)
    services = [_make_service(sid, dom, types, config, rng) for sid, dom, types in _service_specs(config, rng)]
    splits = {s.id: split_indices(len(s.dialogs), stable_seed(config.seed, "split", s.id)) for s in services}
    return TaskStream(services, splits, config.seed)


def validate_stream(stream: TaskStream) -> None:
    """Exhaustive check that every non-None gold value occurs verbatim in its dialog."""
    for s in stream.services:
        for i, d in enumerate(s.dialogs):
            for name, value in d.values.items():
                if value != NONE_VALUE and value not in d.text:
                    raise ContractError(f"{s.id}[{i}]: value {value!r} for {name!r} not in dialog")


# ---------------------------------------------------------------------------
# corpus ingest


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise CorpusError(f"{where}: {msg}")


def ingest_schema_corpus(path: str | Path, seed: int = 0) -> TaskStream:
    """Load a schema-style JSON corpus.

    Dialogs tagged with more than one service (``"services": [...]``) are
    skipped and counted in ``TaskStream.skipped``. Dialogs carrying a
    ``"split"`` field keep it; otherwise splits come from a seeded 7:1:2 cut.
    """
    text = Path(path).read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    _require(isinstance(payload, dict) and isinstance(payload.get("services"), list), "$", "expected {services: [...]}")
    services, splits, skipped = [], {}, 0
    for si, raw in enumerate(payload["services"]):
        where = f"services[{si}]"
        _require(isinstance(raw, dict), where, "expected an object")
        _require(isinstance(raw.get("name"), str) and raw["name"].strip(), f"{where}.name", "missing service name")
        sid = raw.get("id", raw["name"])
        _require(isinstance(raw.get("slots"), list) and raw["slots"], f"{where}.slots", "expected a non-empty list")
        slots, seen = [], set()
        for j, sl in enumerate(raw["slots"]):
            w = f"{where}.slots[{j}]"
            _require(isinstance(sl, dict) and isinstance(sl.get("name"), str), f"{w}.name", "missing slot name")
            _require(isinstance(sl.get("description"), str) and sl["description"].strip(),
                     f"{w}.description", "missing slot description")
            _require(sl["name"] not in seen, f"{w}.name", f"duplicate slot name {sl['name']!r}")
            seen.add(sl["name"])
            slots.append(Slot(sl["name"], sl["description"], sid))
        dialogs, membership = [], {}
        for j, dg in enumerate(raw.get("dialogs", [])):
            w = f"{where}.dialogs[{j}]"
            _require(isinstance(dg, dict) and isinstance(dg.get("text"), str), f"{w}.text", "missing dialog text")
            if len(dg.get("services", [sid])) > 1:
                skipped += 1
                continue
            values = dg.get("values", {})
            _require(isinstance(values, dict), f"{w}.values", "expected an object")
            stray = set(values) - seen
            _require(not stray, f"{w}.values", f"unknown slots {sorted(stray)}")
            if "split" in dg:
                _require(dg["split"] in ("train", "val", "test"), f"{w}.split", f"bad split {dg['split']!r}")
                membership[len(dialogs)] = dg["split"]
            dialogs.append(Dialog(dg["text"], {k: str(v) for k, v in values.items()}))
        _require(bool(dialogs), f"{where}.dialogs", "no single-service dialogs")
        if len(membership) == len(dialogs):
            splits[sid] = Split(*[[i for i, p in membership.items() if p == part] for part in ("train", "val", "test")])
        else:
            splits[sid] = split_indices(len(dialogs), stable_seed(seed, "split", sid))
        services.append(Service(sid, raw["name"], slots, dialogs))
    if skipped:
        log.warning("skipped %d multi-service dialogs", skipped)
    return TaskStream(services, splits, seed, skipped)


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryBuffer:
    """Per-task lists of training-split positions (indices into ``stream.train(task)``)."""

    entries: dict[str, list[int]] = field(default_factory=dict)
    capacities: dict[str, int] = field(default_factory=dict)

    def add(self, task_id: str, indices: Sequence[int], capacity: int) -> None:
        if len(indices) > capacity:
            raise ContractError("memory entry exceeds its capacity")
        self.entries[task_id] = list(indices)
        self.capacities[task_id] = capacity

    def examples(self, stream: TaskStream, task_id: str) -> list[Dialog]:
        train = stream.train(task_id)
        return [train[i] for i in self.entries.get(task_id, [])]

    def tasks(self) -> list[str]:
        return list(self.entries)

    def to_dict(self) -> dict:
        return {"entries": self.entries, "capacities": self.capacities}

    @classmethod
    def from_dict(cls, record: Mapping) -> "MemoryBuffer":
        return cls({k: list(v) for k, v in record["entries"].items()}, dict(record["capacities"]))


def sample_memory(stream: TaskStream, task_id: str, capacity: int, seed: int) -> list[int]:
    """Uniform sample without replacement from the task's training split."""
    if capacity < 0:
        raise ContractError("memory capacity must be non-negative")
    n = len(stream.splits[task_id].train)
    if capacity >= n:
        return list(range(n))
    rng = np.random.default_rng(stable_seed(seed, "memory", task_id))
    return sorted(rng.choice(n, size=capacity, replace=False).tolist())


def proportional_budget(stream_or_sizes, total_budget: int) -> dict[str, int]:
    """Memory capacities proportional to training-split sizes (largest remainder, each >= 1)."""
    if isinstance(stream_or_sizes, TaskStream):
        sizes = {t: len(stream_or_sizes.splits[t].train) for t in stream_or_sizes.task_ids}
    else:
        sizes = dict(stream_or_sizes)
    if total_budget < len(sizes):
        raise ContractError("budget must give every task at least one slot")
    total = sum(sizes.values())
    quotas = {t: total_budget * n / total for t, n in sizes.items()}
    caps = {t: max(1, int(np.floor(q))) for t, q in quotas.items()}
    # trim from the tasks that overshoot their quota the most when the floor of 1 overshoots
    while sum(caps.values()) > total_budget:
        t = max((t for t in caps if caps[t] > 1), key=lambda t: (caps[t] - quotas[t], t))
        caps[t] -= 1
    leftover = total_budget - sum(caps.values())
    for t in sorted(caps, key=lambda t: (-(quotas[t] - caps[t]), t))[:leftover]:
        caps[t] += 1
    return caps
