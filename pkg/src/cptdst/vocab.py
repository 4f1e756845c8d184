"""Closed word-level vocabulary with reserved control and sentinel tokens."""

from __future__ import annotations

from typing import Iterable, Sequence

from .codec import EOS, NONE_VALUE, PAD, SENTINEL_ALPHABET, SEP, sentinel
from .errors import ContractError

RESERVED = [PAD, EOS, SEP, NONE_VALUE] + [sentinel(i) for i in range(1, SENTINEL_ALPHABET + 1)]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(RESERVED)]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for text in texts:
            words.update(text.split())
        words.difference_update(RESERVED)
        return cls(RESERVED + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    def sentinel_ids(self) -> list[int]:
        return [self.index[sentinel(i)] for i in range(1, SENTINEL_ALPHABET + 1)]

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        try:
            ids = [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise ContractError(f"unknown token {exc.args[0]!r}") from None
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            words.append(self.tokens[i])
        return " ".join(words)
