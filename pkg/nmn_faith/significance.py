from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .errors import ValidationError
from .faithfulness import OVERALL

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.typing import ArrayLike, NDArray

    from .faithfulness import FaithfulnessReport

    Aggregator = Callable[[NDArray[np.float64]], NDArray[np.float64] | float]

__all__ = (
    'Alternative',
    'PermutationResult',
    'permutation_test',
    'paired_scores',
)

logger = logging.getLogger(__name__)

TRIAL_CHUNK = 10_000
_TIE_TOLERANCE = 1e-12


class Alternative(Enum):
    TWO_SIDED = 'two-sided'
    GREATER = 'greater'
    LESS = 'less'


class PermutationResult(NamedTuple):
    p_value: float
    observed: float
    trials: int
    seed: int


def _mean_last(scores: NDArray[np.float64]) -> NDArray[np.float64] | float:
    return np.mean(scores, axis=-1)


def _exceeding(
    chunk: int,
    size: int,
    a: NDArray[np.float64],
    b: NDArray[np.float64],
    observed: float,
    seed: int,
    aggregator: Aggregator,
    alternative: Alternative,
) -> int:
    # chunk i owns the counter block i, so results never depend on how chunks are scheduled
    rng = np.random.Generator(np.random.Philox(seed).jumped(chunk))
    swap = rng.random((size, a.size)) < 0.5
    delta = np.asarray(aggregator(np.where(swap, b, a))) - np.asarray(aggregator(np.where(swap, a, b)))
    match alternative:
        case Alternative.TWO_SIDED:
            hits = np.abs(delta) >= abs(observed) - _TIE_TOLERANCE
        case Alternative.GREATER:
            hits = delta >= observed - _TIE_TOLERANCE
        case Alternative.LESS:
            hits = delta <= observed + _TIE_TOLERANCE
    return int(np.count_nonzero(hits))


def permutation_test(
    a: ArrayLike,
    b: ArrayLike,
    n_trials: int = 100_000,
    seed: int = 0,
    aggregator: Aggregator | None = None,
    alternative: Alternative | str = Alternative.TWO_SIDED,
    workers: int = 1,
) -> PermutationResult:
    """Paired permutation test on per-example scores of two systems.

    Each trial swaps every pair (a_i, b_i) with probability 1/2 and recomputes
    Δ = aggregator(a') - aggregator(b'). The p-value is the fraction of trials at least as extreme as the
    observed Δ: |Δ'| >= |Δ| for the two-sided test, Δ' >= Δ for `greater` and Δ' <= Δ for `less`.

    Args:
        a (ArrayLike): scores of system A, one per example.
        b (ArrayLike): scores of system B, paired with a.
        n_trials (int, optional): number of random swaps. Defaults to 100_000.
        seed (int, optional): seed of the counter-based generator. Defaults to 0.
        aggregator (Aggregator, optional): reduces the last axis of a score array. Defaults to the mean.
        alternative (Alternative | str, optional): Defaults to two-sided.
        workers (int, optional): threads sharing the trial chunks; the result does not depend on it. Defaults to 1.

    Returns:
        PermutationResult: p-value, observed Δ, trial count and seed.

    Raises:
        ValueError: unpaired or empty inputs, or n_trials < 1.
    """
    a_arr = np.asarray(a, dtype=np.float64).reshape(-1)
    b_arr = np.asarray(b, dtype=np.float64).reshape(-1)
    if a_arr.size != b_arr.size:
        raise ValueError(f'paired scores differ in length: {a_arr.size} vs {b_arr.size}')
    if a_arr.size == 0:
        raise ValueError('permutation test needs at least one pair')
    if n_trials < 1:
        raise ValueError(f'n_trials must be at least 1, got {n_trials}')
    alternative = Alternative(alternative)
    aggregator = aggregator or _mean_last

    observed = float(np.asarray(aggregator(a_arr)) - np.asarray(aggregator(b_arr)))
    chunks = [(i, min(TRIAL_CHUNK, n_trials - i * TRIAL_CHUNK)) for i in range(math.ceil(n_trials / TRIAL_CHUNK))]

    def run(chunk: tuple[int, int]) -> int:
        return _exceeding(*chunk, a_arr, b_arr, observed, seed, aggregator, alternative)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            exceeding = sum(pool.map(run, chunks))
    else:
        exceeding = sum(map(run, chunks))

    p_value = exceeding / n_trials
    logger.debug('permutation test: observed %.6g, %d/%d trials as extreme', observed, exceeding, n_trials)
    return PermutationResult(p_value, observed, n_trials, seed)


def paired_scores(
    report_a: FaithfulnessReport, report_b: FaithfulnessReport, module: str = OVERALL, metric: str = 'f1'
) -> tuple[list[str], NDArray[np.float64], NDArray[np.float64]]:
    """Per-example scores of two reports, paired by example id.

    Returns:
        tuple[list[str], NDArray, NDArray]: sorted example ids and the aligned scores of A and B.

    Raises:
        ValidationError: the reports do not cover the same examples, or neither has the module.
    """
    try:
        scores_a = report_a.example_scores(module, metric)
        scores_b = report_b.example_scores(module, metric)
    except KeyError as e:
        raise ValidationError(str(e.args[0])) from e
    if scores_a.keys() != scores_b.keys():
        only_a = sorted(scores_a.keys() - scores_b.keys())
        only_b = sorted(scores_b.keys() - scores_a.keys())
        raise ValidationError(f'example ids do not match: only in A {only_a[:5]}, only in B {only_b[:5]}')
    if not scores_a:
        raise ValidationError(f'no per-example {metric} scores for module {module!r}')
    ids = sorted(scores_a)
    return ids, np.asarray([scores_a[i] for i in ids]), np.asarray([scores_b[i] for i in ids])
