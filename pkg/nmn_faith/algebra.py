from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import ndtr

from .errors import AlgebraError

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import NDArray

__all__ = (
    'DEFAULT_MAX_COUNT',
    'Comparison',
    'BoolOp',
    'ArithOp',
    'DistOp',
    'TruthProb',
    'NumberValue',
    'CategoricalCount',
    'ValueDist',
    'make_number',
    'discretize',
    'compare',
    'bool_combine',
    'gaussian_arith',
    'value_dist_arith',
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_COUNT = 72
"""Largest count value a categorical count supports."""

_PROB_TOLERANCE = 1e-9
_DIST_TOLERANCE = 1e-6
_UNSTABLE_DIVISOR = 1e-6


class Comparison(Enum):
    EQUAL = 'equal'
    LESS = 'less'
    GREATER = 'greater'
    LESS_EQUAL = 'less-equal'
    GREATER_EQUAL = 'greater-equal'


class BoolOp(Enum):
    AND = 'and'
    OR = 'or'


class ArithOp(Enum):
    SUM = 'sum'
    DIFFERENCE = 'difference'
    DIVISION = 'division'


class DistOp(Enum):
    ADDITION = 'addition'
    SUBTRACTION = 'subtraction'


@dataclass(frozen=True)
class TruthProb:
    """Probability that a Boolean denotation is true."""

    value: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.value) and -_PROB_TOLERANCE <= self.value <= 1 + _PROB_TOLERANCE):
            raise AlgebraError(f'truth probability must lie in [0, 1], got {self.value}')
        object.__setattr__(self, 'value', min(1.0, max(0.0, float(self.value))))

    def __float__(self) -> float:
        return self.value

    def decide(self, threshold: float = 0.5) -> bool:
        """Boolean decision: True iff value > threshold."""
        return self.value > threshold


@dataclass(frozen=True)
class NumberValue:
    """Normal-distributed number. var = 0 is an exact point value."""

    mean: float
    var: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean) or not math.isfinite(self.var):
            raise AlgebraError(f'number parameters must be finite, got mean={self.mean}, var={self.var}')
        if self.var < 0:
            raise AlgebraError(f'variance must be nonnegative, got {self.var}')

    @classmethod
    def point(cls, value: float) -> NumberValue:
        return cls(float(value), 0.0)

    @property
    def is_point(self) -> bool:
        return self.var == 0


def make_number(mean: float, var: float) -> NumberValue:
    """`number(m, v)`: a Normal(mean=m, var=v) value.

    Raises:
        AlgebraError: if var is negative.
    """
    return NumberValue(float(mean), float(var))


@dataclass(frozen=True, eq=False)
class CategoricalCount:
    """Distribution over the counts {0..K}."""

    probs: NDArray[np.float64]

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise AlgebraError('categorical count needs at least the support {0, 1}')
        if np.any(probs < 0) or abs(probs.sum() - 1) > _PROB_TOLERANCE:
            raise AlgebraError('categorical count probabilities must be nonnegative and sum to 1')
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    @property
    def K(self) -> int:
        return self.probs.size - 1

    @classmethod
    def point(cls, k: int, K: int) -> CategoricalCount:
        probs = np.zeros(K + 1)
        probs[min(max(k, 0), K)] = 1.0
        return cls(probs)

    def expectation(self) -> float:
        return float(np.dot(np.arange(self.K + 1), self.probs))


def discretize(number: NumberValue, K: int = DEFAULT_MAX_COUNT) -> CategoricalCount:
    """Turn a Normal number into a categorical over {0..K}.

    Pr[X=0] = Φ(0.5), Pr[X=k] = Φ(k+0.5) - Φ(k-0.5) for 1 <= k <= K-1 and Pr[X=K] = 1 - Φ(K-0.5),
    with Φ the CDF of Normal(mean, var). Zero variance gives a point mass at the nearest count
    (halves round up), clamped into {0..K}.
    """
    if K < 1:
        raise AlgebraError(f'max count must be at least 1, got {K}')
    if number.is_point:
        return CategoricalCount.point(math.floor(number.mean + 0.5), K)
    edges = np.arange(K, dtype=np.float64) + 0.5
    cdf = ndtr((edges - number.mean) / math.sqrt(number.var))
    # telescoping differences: the total is exactly 1 - 0 up to rounding
    probs = np.diff(np.concatenate(([0.0], cdf, [1.0])))
    return CategoricalCount(np.clip(probs, 0.0, None))


def compare(
    kind: Comparison | str, a: NumberValue, b: NumberValue, K: int = DEFAULT_MAX_COUNT
) -> TruthProb:
    """Probability that an ordered comparison holds between independent numbers.

    equal = Σ_k Pr[a=k]Pr[b=k], less = Σ_k Pr[a=k]Pr[b>k], greater = Σ_k Pr[a=k]Pr[b<k];
    the `-equal` variants add `equal`.

    Args:
        kind (Comparison | str): comparison name.
        a (NumberValue): left operand.
        b (NumberValue): right operand.
        K (int, optional): max count of the shared discretization. Defaults to 72.

    Returns:
        TruthProb: probability the comparison holds.
    """
    kind = Comparison(kind)
    qa = discretize(a, K).probs
    qb = discretize(b, K).probs

    equal = float(np.dot(qa, qb))
    if kind is Comparison.EQUAL:
        return TruthProb(min(equal, 1.0))

    b_below = np.concatenate(([0.0], np.cumsum(qb)[:-1]))
    b_above = np.concatenate((np.cumsum(qb[::-1])[::-1][1:], [0.0]))
    match kind:
        case Comparison.LESS:
            value = float(np.dot(qa, b_above))
        case Comparison.GREATER:
            value = float(np.dot(qa, b_below))
        case Comparison.LESS_EQUAL:
            value = float(np.dot(qa, b_above)) + equal
        case Comparison.GREATER_EQUAL:
            value = float(np.dot(qa, b_below)) + equal
    return TruthProb(min(max(value, 0.0), 1.0))


def bool_combine(kind: BoolOp | str, a: TruthProb, b: TruthProb) -> TruthProb:
    """and = a*b, or = a+b-a*b."""
    match BoolOp(kind):
        case BoolOp.AND:
            return TruthProb(a.value * b.value)
        case BoolOp.OR:
            return TruthProb(a.value + b.value - a.value * b.value)


def gaussian_arith(kind: ArithOp | str, a: NumberValue, b: NumberValue) -> NumberValue:
    """Closed-form sum, difference or (approximate) division of independent Normal numbers.

    Division uses mean = a_mean/b_mean + b_var*a_mean/b_mean^3 and
    var = (a_mean^2/b_mean^2) * (a_var/a_mean^2 + b_var/b_mean^2). The formula is propagated as is;
    a small but nonzero b_mean yields a very large variance.

    Raises:
        AlgebraError: division with a zero-mean operand.
    """
    match ArithOp(kind):
        case ArithOp.SUM:
            return NumberValue(a.mean + b.mean, a.var + b.var)
        case ArithOp.DIFFERENCE:
            return NumberValue(a.mean - b.mean, a.var + b.var)
        case ArithOp.DIVISION:
            if b.mean == 0 or a.mean == 0:
                raise AlgebraError(f'division needs nonzero operand means, got {a.mean} / {b.mean}')
            if abs(b.mean) < _UNSTABLE_DIVISOR:
                logger.warning('division by a number with mean %g; variance is unstable', b.mean)
            ratio = a.mean / b.mean
            mean = ratio + b.var * a.mean / b.mean**3
            var = ratio**2 * (a.var / a.mean**2 + b.var / b.mean**2)
            return NumberValue(mean, var)


@dataclass(frozen=True, eq=False)
class ValueDist:
    """Distribution over numbers mentioned in a passage."""

    support: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.support) != len(self.probs) or not self.support:
            raise AlgebraError('support and probs must be nonempty and of equal length')
        if len(set(self.support)) != len(self.support):
            raise AlgebraError('support entries must be distinct')
        if any(not math.isfinite(p) or p < 0 for p in self.probs) or abs(math.fsum(self.probs) - 1) > _DIST_TOLERANCE:
            raise AlgebraError('probabilities must be nonnegative and sum to 1')

    @classmethod
    def from_mapping(cls, mapping: Mapping[float, float]) -> ValueDist:
        items = sorted(mapping.items())
        return cls(tuple(float(v) for v, _ in items), tuple(float(p) for _, p in items))

    @classmethod
    def from_pairs(cls, support: Sequence[float], probs: Sequence[float]) -> ValueDist:
        return cls(tuple(float(v) for v in support), tuple(float(p) for p in probs))

    def as_mapping(self) -> dict[float, float]:
        return dict(zip(self.support, self.probs, strict=True))

    def expectation(self) -> float:
        return math.fsum(v * p for v, p in zip(self.support, self.probs, strict=True))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ValueDist):
            return NotImplemented
        return self.as_mapping() == other.as_mapping()

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.as_mapping().items())))


def value_dist_arith(kind: DistOp | str, x: ValueDist, y: ValueDist) -> ValueDist:
    """Distribution of Z = X + Y (addition) or Z = X - Y (subtraction) for independent X, Y.

    Pr[Z=z] = Σ_{x op y = z} Pr[X=x] Pr[Y=y]; sums are grouped after rounding to 9 decimals so
    float noise does not split one value in two.
    """
    xs, ys = np.asarray(x.support), np.asarray(y.support)
    match DistOp(kind):
        case DistOp.ADDITION:
            values = np.add.outer(xs, ys)
        case DistOp.SUBTRACTION:
            values = np.subtract.outer(xs, ys)
    mass = np.outer(np.asarray(x.probs), np.asarray(y.probs))
    support, inverse = np.unique(np.round(values.ravel(), 9), return_inverse=True)
    probs = np.bincount(inverse, weights=mass.ravel(), minlength=support.size)
    return ValueDist.from_pairs(support.tolist(), probs.tolist())
