from __future__ import annotations

import time

import numpy as np
import pytest

from nmn_faith.errors import ValidationError
from nmn_faith.faithfulness import FaithfulnessReport
from nmn_faith.significance import Alternative, paired_scores, permutation_test


class TestPermutationTest:
    def test_identical_scores(self):
        scores = np.random.default_rng(0).random(30)
        result = permutation_test(scores, scores.copy(), n_trials=5_000)
        assert result.p_value == 1.0
        assert result.observed == 0.0

    def test_constant_gap_is_significant(self):
        rng = np.random.default_rng(1)
        b = rng.uniform(0, 0.7, size=50)
        start = time.perf_counter()
        result = permutation_test(b + 0.3, b, n_trials=100_000, seed=0)
        assert time.perf_counter() - start < 10
        assert result.observed == pytest.approx(0.3)
        assert result.p_value < 0.001
        assert result.trials == 100_000

    def test_null_simulations(self):
        passed = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = rng.random(40)
            b = rng.random(40)
            passed += permutation_test(a, b, n_trials=2_000, seed=seed).p_value > 0.05
        assert passed >= 90

    def test_reproducible_and_independent_of_workers(self):
        rng = np.random.default_rng(2)
        a, b = rng.random(25), rng.random(25)
        serial = permutation_test(a, b, n_trials=35_000, seed=11)
        parallel = permutation_test(a, b, n_trials=35_000, seed=11, workers=4)
        assert serial == parallel

    def test_one_sided(self):
        rng = np.random.default_rng(3)
        b = rng.random(30)
        a = b + 0.05
        assert permutation_test(a, b, n_trials=10_000, alternative='greater').p_value < 0.01
        assert permutation_test(a, b, n_trials=10_000, alternative=Alternative.LESS).p_value > 0.99

    def test_custom_aggregator(self):
        a = np.asarray([1.0, 1.0, 1.0, 0.0])
        b = np.asarray([0.0, 0.0, 0.0, 0.0])
        result = permutation_test(a, b, n_trials=1_000, aggregator=lambda s: np.median(s, axis=-1))
        assert result.observed == 1.0

    @pytest.mark.parametrize(('a', 'b', 'trials'), [([1.0], [1.0, 2.0], 10), ([], [], 10), ([1.0], [0.0], 0)])
    def test_invalid(self, a, b, trials):
        with pytest.raises(ValueError):
            permutation_test(a, b, n_trials=trials)


def report(scores: dict[str, float]) -> FaithfulnessReport:
    return FaithfulnessReport(
        kind='visual',
        scheme='examplewise',
        modules={},
        overall={'precision': 1.0, 'recall': 1.0, 'f1': 1.0},
        examples=len(scores),
        per_example={eid: {'overall': {'precision': 1.0, 'recall': 1.0, 'f1': f1}} for eid, f1 in scores.items()},
    )


class TestPairedScores:
    def test_pairs_by_example_id(self):
        ids, a, b = paired_scores(report({'y': 0.2, 'x': 0.9}), report({'x': 0.5, 'y': 0.1}))
        assert ids == ['x', 'y']
        np.testing.assert_array_equal(a, [0.9, 0.2])
        np.testing.assert_array_equal(b, [0.5, 0.1])

    def test_mismatched_examples(self):
        with pytest.raises(ValidationError, match='do not match'):
            paired_scores(report({'x': 0.5}), report({'y': 0.5}))

    def test_unknown_module(self):
        with pytest.raises(ValidationError, match='no per-example'):
            paired_scores(report({'x': 0.5}), report({'x': 0.5}), module='filter')

    def test_unknown_metric(self):
        with pytest.raises(ValidationError):
            paired_scores(report({'x': 0.5}), report({'x': 0.5}), metric='cross_entropy')
