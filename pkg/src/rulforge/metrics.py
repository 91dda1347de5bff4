"""RMSE, R^2 and cycle-life-normalised MAPE.

MAPE divides each absolute error by the record's cycle life rather than by
its true RUL, so records at end of life (RUL 0) are well defined.
Sums use ``math.fsum``, which makes every metric independent of record order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, InsufficientDataError


@dataclass(frozen=True)
class EvalRecord:
    y_true: float
    y_pred: float
    cycle_life: float
    cell_id: str = ""

    def __post_init__(self):
        if not self.cycle_life > 0:
            raise ContractError(f"cycle life must be positive, got {self.cycle_life}")
        if self.y_true > self.cycle_life:
            raise ContractError(f"true RUL {self.y_true} exceeds cycle life {self.cycle_life}")


def records_from_arrays(y_true, y_pred, cycle_life, cell_ids=None) -> list[EvalRecord]:
    y_true, y_pred, cycle_life = (np.asarray(a, dtype=np.float64).reshape(-1)
                                  for a in (y_true, y_pred, cycle_life))
    if not (len(y_true) == len(y_pred) == len(cycle_life)):
        raise ContractError("metric inputs must have equal lengths")
    ids = cell_ids if cell_ids is not None else [""] * len(y_true)
    return [EvalRecord(float(a), float(b), float(c), str(d))
            for a, b, c, d in zip(y_true, y_pred, cycle_life, ids)]


def rmse(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ContractError("rmse of an empty record set")
    return math.sqrt(math.fsum((r.y_true - r.y_pred) ** 2 for r in records) / len(records))


def mape(records: Sequence[EvalRecord]) -> float:
    """Mean of ``|y_i - yhat_i| / cycle_life`` in percent."""
    if not records:
        raise ContractError("mape of an empty record set")
    if any(not r.cycle_life > 0 for r in records):
        raise ContractError("mape needs a positive cycle life for every record")
    return math.fsum(abs(r.y_true - r.y_pred) / r.cycle_life for r in records) / len(records) * 100.0


def r2(records: Sequence[EvalRecord]) -> float:
    if len(records) < 2:
        raise InsufficientDataError("r2 needs at least 2 records")
    ybar = math.fsum(r.y_true for r in records) / len(records)
    ss_tot = math.fsum((r.y_true - ybar) ** 2 for r in records)
    if ss_tot == 0:
        raise InsufficientDataError("r2 is undefined when every true value is equal")
    ss_res = math.fsum((r.y_true - r.y_pred) ** 2 for r in records)
    return 1.0 - ss_res / ss_tot


def evaluate(records: Iterable[EvalRecord]) -> dict[str, float]:
    records = list(records)
    return {"rmse": rmse(records), "r2": r2(records), "mape_percent": mape(records)}
