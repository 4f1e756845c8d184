"""Joint goal accuracy and continual-learning summary metrics.

Task indices in :class:`AccuracyMatrix` are 1-based: ``a[j, i]`` is the JGA on
task ``i``'s test split right after training on task ``j``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .codec import NONE_VALUE, normalize_value
from .errors import ContractError


def joint_goal_accuracy(predictions: Sequence[Mapping[str, str]], golds: Sequence[Mapping[str, str]]) -> float:
    """Fraction of examples whose every slot matches after normalization."""
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions for {len(golds)} gold states")
    if not golds:
        raise ContractError("joint goal accuracy of an empty set is undefined")
    hits = 0
    for pred, gold in zip(predictions, golds):
        slots = set(pred) | set(gold)
        if all(normalize_value(pred.get(s, NONE_VALUE)) == normalize_value(gold.get(s, NONE_VALUE)) for s in slots):
            hits += 1
    return hits / len(golds)


@dataclass
class AccuracyMatrix:
    T: int
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        j, i = key
        if not (1 <= j <= self.T and 1 <= i <= self.T):
            raise ContractError(f"entry ({j}, {i}) outside a {self.T}-task matrix")
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"accuracy {value} outside [0, 1]")
        self.entries[(j, i)] = float(value)

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.entries[key]

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self.entries

    def final_row(self) -> list[float]:
        missing = [i for i in range(1, self.T + 1) if (self.T, i) not in self.entries]
        if missing:
            raise ContractError(f"final row incomplete, missing tasks {missing}")
        return [self.entries[(self.T, i)] for i in range(1, self.T + 1)]

    def to_dict(self) -> dict[str, float]:
        return {f"{j},{i}": v for (j, i), v in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, T: int, record: Mapping[str, float]) -> "AccuracyMatrix":
        m = cls(T)
        for key, v in record.items():
            j, i = (int(x) for x in key.split(","))
            m[j, i] = v
        return m

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{i}" for i in range(1, self.T + 1)])
        for j in range(1, self.T + 1):
            writer.writerow([j] + [repr(self.entries[(j, i)]) if (j, i) in self.entries else ""
                                   for i in range(1, self.T + 1)])
        return buf.getvalue()


def avg_jga(matrix: AccuracyMatrix) -> float:
    row = matrix.final_row()
    return sum(row) / matrix.T


def fwt(matrix: AccuracyMatrix) -> float | None:
    """Mean zero-shot accuracy on each task before training on it; ``None`` when undefined."""
    if matrix.T < 2:
        return None
    missing = [i for i in range(2, matrix.T + 1) if (i - 1, i) not in matrix]
    if missing:
        return None
    return sum(matrix[i - 1, i] for i in range(2, matrix.T + 1)) / (matrix.T - 1)


def bwt(matrix: AccuracyMatrix) -> float | None:
    """Mean change from just-trained to final accuracy; ``None`` when undefined."""
    if matrix.T < 2:
        return None
    T = matrix.T
    missing = [i for i in range(1, T) if (i, i) not in matrix or (T, i) not in matrix]
    if missing:
        raise ContractError(f"BWT needs diagonal and final-row entries, missing tasks {missing}")
    return sum(matrix[T, i] - matrix[i, i] for i in range(1, T)) / (T - 1)


def metrics_report(matrix: AccuracyMatrix, seed: int, task_order: Sequence[str],
                   sequential: bool = True) -> dict:
    """JSON-ready report. FWT/BWT are blank (None) for order-agnostic methods."""
    return {
        "seed": seed,
        "task_order": list(task_order),
        "avg_jga": avg_jga(matrix),
        "fwt": fwt(matrix) if sequential else None,
        "bwt": bwt(matrix) if sequential else None,
        "matrix": matrix.to_dict(),
    }
