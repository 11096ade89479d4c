"""Evaluation formulas: accuracy, ConsistSyn, coefficient of variation, NI.

Undefined values (empty correct-before set, zero mean, zero baseline) are
returned as ``None`` so callers can report them as missing data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ContractError

VARIANTS = ("original", "ft", "carma")


@dataclass(frozen=True)
class RunRecord:
    variant: str
    task: str
    intervention: str
    seed: int | None
    value: float

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if not math.isfinite(self.value):
            raise ContractError(f"run value must be finite, got {self.value}")


def accuracy(preds: Sequence[int], targets: Sequence[int]) -> float:
    """Exact-match percentage."""
    if len(preds) != len(targets):
        raise ContractError(f"{len(preds)} predictions for {len(targets)} targets")
    if not len(preds):
        raise ContractError("accuracy of an empty prediction set")
    hits = sum(int(p) == int(t) for p, t in zip(preds, targets))
    return 100.0 * hits / len(preds)


def consist_syn(correct_before: int, correct_after: int) -> float | None:
    """Share (%) of originally-correct predictions still correct after substitution."""
    if correct_after < 0 or correct_after > correct_before:
        raise ContractError(f"correct_after={correct_after} must lie in [0, correct_before={correct_before}]")
    if correct_before == 0:
        return None
    return 100.0 * correct_after / correct_before


def cv(values: Sequence[float], ddof: int = 0) -> float | None:
    """sigma / mu across runs.  ``ddof=0`` is the population estimator."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if len(vals) < 2:
        raise ContractError(f"cv needs at least 2 values, got {len(vals)}")
    mu = vals.mean()
    if mu == 0:
        return None
    return float(vals.std(ddof=ddof) / mu)


def ni(carma_cs: float, baseline_cs: float) -> float | None:
    """Normalised improvement (%) of ``carma_cs`` over ``baseline_cs``."""
    if baseline_cs is None or carma_cs is None or baseline_cs == 0:
        return None
    return 100.0 * (carma_cs - baseline_cs) / baseline_cs
