"""Text transforms between dialogs with slot values and seq2seq input/target strings.

Two formats are supported:

* masked spans: ``"<dialog> <sep> desc_1 : <M1> . desc_2 : <M2> ."`` with target
  ``"<M1> v_1 <M2> v_2"``; absent values are the literal ``None``.
* name format (fine-tuning baselines): ``"<dialog> <sep> <service name>"`` with
  target ``"slot_1 = v_1 ; slot_2 = v_2"`` over filled slots only.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ContractError

NONE_VALUE = "None"
SEP = "<sep>"
PAD = "<pad>"
EOS = "</s>"
SENTINEL_ALPHABET = 16

_SENTINEL_RE = re.compile(r"<M(\d+)>")


def sentinel(i: int) -> str:
    return f"<M{i}>"


@dataclass(frozen=True)
class Slot:
    name: str
    description: str
    service_id: str = ""

    def __post_init__(self):
        if not self.description.strip():
            raise ContractError(f"slot {self.name!r} has an empty description")


@dataclass(frozen=True)
class Query:
    slots: tuple[Slot, ...]
    text: str

    @property
    def sentinels(self) -> list[str]:
        return [sentinel(i) for i in range(1, len(self.slots) + 1)]


@dataclass
class FormattedExample:
    input_text: str
    target_text: str
    alignment: dict[str, Slot] = field(default_factory=dict)


def build_query(slots: Sequence[Slot]) -> Query:
    slots = tuple(slots)
    if not slots:
        raise ContractError("a query needs at least one slot")
    if len(slots) > SENTINEL_ALPHABET:
        raise ContractError(f"{len(slots)} slots exceed the sentinel alphabet of {SENTINEL_ALPHABET}")
    text = " ".join(f"{s.description} : {sentinel(i)} ." for i, s in enumerate(slots, start=1))
    return Query(slots, text)


def _lookup(values: Mapping[str, str], slot: Slot, service_id: str | None) -> str:
    if service_id is not None and slot.service_id != service_id:
        return NONE_VALUE
    value = values.get(slot.name)
    if value is None or not str(value).strip():
        return NONE_VALUE
    return str(value).strip()


def format_example(dialog: str, values: Mapping[str, str], query: Query,
                   service_id: str | None = None) -> FormattedExample:
    """Render one example under ``query``.

    When ``service_id`` is given, query slots belonging to another service are
    targeted as ``None`` regardless of ``values`` (fused queries).
    """
    parts = []
    alignment = {}
    for i, slot in enumerate(query.slots, start=1):
        tag = sentinel(i)
        parts.append(f"{tag} {_lookup(values, slot, service_id)}")
        alignment[tag] = slot
    return FormattedExample(f"{dialog} {SEP} {query.text}", " ".join(parts), alignment)


def parse_spans(generated: str, n_slots: int) -> list[str]:
    """Value after each sentinel ``<M1>..<Mn>``, position by position; never raises.

    Text before the first sentinel is dropped, missing sentinels give ``None``
    and the first occurrence of a repeated sentinel wins.
    """
    out = [NONE_VALUE] * n_slots
    matches = list(_SENTINEL_RE.finditer(generated))
    filled: set[int] = set()
    for j, m in enumerate(matches):
        idx = int(m.group(1))
        end = matches[j + 1].start() if j + 1 < len(matches) else len(generated)
        if not 1 <= idx <= n_slots or idx in filled:
            continue
        filled.add(idx)
        out[idx - 1] = " ".join(generated[m.end():end].split()) or NONE_VALUE
    return out


def parse_prediction(generated: str, query: Query) -> dict[str, str]:
    """Inverse of the masked-span target rendering, keyed by slot name.

    Fused queries may hold two services' slots under one name; use
    ``parse_spans`` when positions matter.
    """
    out = {}
    for slot, value in zip(query.slots, parse_spans(generated, len(query.slots))):
        out.setdefault(slot.name, value)
    return out


def padded_values(values: Mapping[str, str], query: Query, service_id: str | None = None) -> dict[str, str]:
    """The value map a perfect parser would recover: every query slot, ``None`` where absent."""
    out = {}
    for slot, value in zip(query.slots, padded_spans(values, query, service_id)):
        out.setdefault(slot.name, value)
    return out


def padded_spans(values: Mapping[str, str], query: Query, service_id: str | None = None) -> list[str]:
    """Positional counterpart of ``padded_values``."""
    return [_lookup(values, slot, service_id) for slot in query.slots]


def name_format_example(dialog: str, service_name: str, values: Mapping[str, str]) -> FormattedExample:
    pairs = [f"{k} = {' '.join(str(v).split())}" for k, v in values.items()
             if v is not None and str(v).strip() and str(v).strip() != NONE_VALUE]
    return FormattedExample(f"{dialog} {SEP} {service_name}", " ; ".join(pairs))


def parse_name_format(generated: str) -> dict[str, str]:
    out = {}
    for chunk in generated.split(" ; "):
        if " = " not in chunk:
            continue
        name, value = chunk.split(" = ", 1)
        name, value = name.strip(), " ".join(value.split())
        if name and value and name not in out:
            out[name] = value
    return out


_PUNCT = string.punctuation


def normalize_value(value: str | None) -> str:
    """Lowercase, collapse whitespace and strip surrounding punctuation."""
    if value is None:
        return NONE_VALUE.lower()
    text = " ".join(str(value).lower().split()).strip(_PUNCT + " ")
    return text or NONE_VALUE.lower()
