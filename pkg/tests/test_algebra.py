from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import norm

from nmn_faith.algebra import (
    Comparison,
    NumberValue,
    TruthProb,
    ValueDist,
    bool_combine,
    compare,
    discretize,
    gaussian_arith,
    make_number,
    value_dist_arith,
)
from nmn_faith.errors import AlgebraError


def random_numbers(rng: np.random.Generator, size: int) -> list[tuple[NumberValue, NumberValue]]:
    means = rng.uniform(-3, 80, size=(size, 2))
    variances = rng.choice([0.0, 0.01, 0.25, 1.0, 9.0], size=(size, 2))
    return [
        (NumberValue(float(ma), float(va)), NumberValue(float(mb), float(vb)))
        for (ma, mb), (va, vb) in zip(means, variances, strict=True)
    ]


class TestNumber:
    def test_make_number(self):
        assert make_number(3, 0).is_point
        assert make_number(2.6, 0.25) == NumberValue(2.6, 0.25)
        assert make_number(-1, 0.25).mean == -1

    def test_negative_variance(self):
        with pytest.raises(AlgebraError):
            make_number(1, -0.1)

    def test_truth_range(self):
        with pytest.raises(AlgebraError):
            TruthProb(1.5)
        assert TruthProb(0.7).decide()
        assert not TruthProb(0.5).decide()


class TestDiscretize:
    def test_point_mass(self):
        probs = discretize(NumberValue(3, 0)).probs
        assert probs[3] == 1.0
        assert probs.sum() == 1.0

    def test_point_mass_clamps(self):
        assert discretize(NumberValue(-2, 0), K=5).probs[0] == 1.0
        assert discretize(NumberValue(100, 0), K=5).probs[5] == 1.0
        assert discretize(NumberValue(2.5, 0), K=5).probs[3] == 1.0

    def test_standard_normal_zero_bin(self):
        probs = discretize(NumberValue(0, 1)).probs
        assert probs[0] == pytest.approx(norm.cdf(0.5), abs=1e-12)
        assert probs[1] == pytest.approx(norm.cdf(1.5) - norm.cdf(0.5), abs=1e-12)

    def test_normalization(self):
        rng = np.random.default_rng(0)
        for mean, var, K in zip(rng.uniform(-10, 90, 500), rng.uniform(1e-4, 50, 500), rng.integers(1, 100, 500)):
            probs = discretize(NumberValue(float(mean), float(var)), int(K)).probs
            assert probs.size == K + 1
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1) <= 1e-12


class TestCompare:
    def test_points(self):
        three = NumberValue.point(3)
        assert compare('equal', three, three).value == 1.0
        assert compare('less', NumberValue.point(2), NumberValue.point(5)).value == 1.0
        assert compare('greater', NumberValue.point(2), NumberValue.point(5)).value == 0.0

    def test_equal_is_sum_of_squares(self):
        a = NumberValue(1, 0.25)
        q = discretize(a).probs
        assert compare(Comparison.EQUAL, a, a).value == pytest.approx(float(np.sum(q**2)), abs=1e-12)

    def test_order_partition(self):
        rng = np.random.default_rng(1)
        for a, b in random_numbers(rng, 1000):
            less = compare('less', a, b).value
            equal = compare('equal', a, b).value
            greater = compare('greater', a, b).value
            assert less + equal + greater == pytest.approx(1, abs=1e-9)
            assert compare('greater-equal', a, b).value + less == pytest.approx(1, abs=1e-9)
            assert compare('less-equal', a, b).value + greater == pytest.approx(1, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for a, b in random_numbers(rng, 200):
            assert compare('equal', a, b).value == pytest.approx(compare('equal', b, a).value, abs=1e-12)

    def test_monotone_shift(self):
        b = NumberValue(4, 0.5)
        values = [compare('greater', NumberValue(m, 0.5), b).value for m in np.linspace(-2, 12, 60)]
        assert all(x <= y + 1e-12 for x, y in zip(values, values[1:]))


class TestBoolCombine:
    def test_values(self):
        assert bool_combine('and', TruthProb(0.9), TruthProb(0.5)).value == pytest.approx(0.45)
        assert bool_combine('or', TruthProb(0.5), TruthProb(0.5)).value == pytest.approx(0.75)

    def test_de_morgan(self):
        rng = np.random.default_rng(3)
        for a, b in rng.random((100, 2)):
            lhs = bool_combine('or', TruthProb(a), TruthProb(b)).value
            rhs = 1 - bool_combine('and', TruthProb(1 - a), TruthProb(1 - b)).value
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestGaussianArith:
    def test_sum_and_difference(self):
        assert gaussian_arith('sum', NumberValue(2, 1), NumberValue(3, 4)) == NumberValue(5, 5)
        assert gaussian_arith('difference', NumberValue(3, 1), NumberValue(3, 1)) == NumberValue(0, 2)

    def test_division(self):
        out = gaussian_arith('division', NumberValue(4, 0.1), NumberValue(2, 0.1))
        assert out.mean == pytest.approx(2.05, abs=1e-12)
        assert out.var == pytest.approx(0.125, abs=1e-12)

    @pytest.mark.parametrize(
        ('a', 'b'), [(NumberValue(4, 0.1), NumberValue(0, 0.1)), (NumberValue(0, 1), NumberValue(2, 1))]
    )
    def test_division_by_degenerate_operand(self, a, b):
        with pytest.raises(AlgebraError):
            gaussian_arith('division', a, b)

    def test_unstable_divisor_warns(self, caplog):
        gaussian_arith('division', NumberValue(1, 0.1), NumberValue(1e-8, 0.1))
        assert 'unstable' in caplog.text


class TestValueDist:
    def test_point_masses(self):
        two, three = ValueDist.from_mapping({2: 1}), ValueDist.from_mapping({3: 1})
        assert value_dist_arith('addition', two, three) == ValueDist.from_mapping({5: 1})
        ten = ValueDist.from_mapping({10: 1})
        assert value_dist_arith('subtraction', ten, three) == ValueDist.from_mapping({7: 1})

    def test_uniform_addition(self):
        uniform = ValueDist.from_mapping({1: 0.5, 2: 0.5})
        out = value_dist_arith('addition', uniform, uniform)
        assert out.as_mapping() == pytest.approx({2.0: 0.25, 3.0: 0.5, 4.0: 0.25})

    def test_mass_and_commutativity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = ValueDist.from_pairs(rng.choice(50, 5, replace=False).tolist(), rng.dirichlet(np.ones(5)).tolist())
            y = ValueDist.from_pairs(rng.choice(50, 4, replace=False).tolist(), rng.dirichlet(np.ones(4)).tolist())
            xy = value_dist_arith('addition', x, y)
            assert math.fsum(xy.probs) == pytest.approx(1, abs=1e-9)
            assert xy.as_mapping() == pytest.approx(value_dist_arith('addition', y, x).as_mapping())

    def test_invalid(self):
        with pytest.raises(AlgebraError):
            ValueDist((1.0, 1.0), (0.5, 0.5))
        with pytest.raises(AlgebraError):
            ValueDist((1.0, 2.0), (0.5, 0.4))
