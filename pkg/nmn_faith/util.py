from __future__ import annotations

import json
import math
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from collections.abc import Callable
    from typing import TypeVar

    T = TypeVar('T')
    U = TypeVar('U')
    V = TypeVar('V')

__all__ = ('map_or', 'harmonic_mean', 'safe_ratio', 'dumps_record', 'is_probability')


def map_or(value: T | None, default: U, func: Callable[[T], V]) -> V | U:
    """Return func(value) if value is not None, otherwise return default."""
    if value is None:
        return default
    return func(value)


def harmonic_mean(precision: float, recall: float) -> float:
    """F1 of precision and recall. 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def safe_ratio(numerator: float, denominator: float, empty: float = 1.0) -> float:
    """numerator / denominator, or `empty` when the denominator is 0."""
    if denominator == 0:
        return empty
    return numerator / denominator


def dumps_record(record: Any) -> str:
    """Serialize one record to a canonical single-line JSON string.

    Keys are sorted and separators fixed, so equal records always produce equal bytes.
    """
    return json.dumps(record, sort_keys=True, separators=(',', ':'), ensure_ascii=False, allow_nan=False)


def is_probability(value: float, tol: float = 0.0) -> bool:
    """value is finite and lies in [0, 1] (with tolerance)."""
    return math.isfinite(value) and -tol <= value <= 1 + tol
