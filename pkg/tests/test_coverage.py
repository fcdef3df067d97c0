"""Tests for the entity–relation coverage matrix and structural uncertainty."""

import math

import numpy as np
import pytest

from cagp.errors import InvalidInputError
from cagp.schemas.run_config import CoverageMode
from cagp.services.coverage import (
    build_coverage,
    continuous_coverage,
    continuous_uncertainty_batch,
    coverage_frame,
    structural_uncertainty,
    structural_uncertainty_batch,
    write_coverage_csv,
)
from cagp.services.graph import Triple, build_graph

A, B, C, D = 0, 1, 2, 3
R1, R2, R3 = 0, 1, 2


# ---------------------------------------------------------------------------
# 1. Coverage matrix
# ---------------------------------------------------------------------------

class TestCoverageMatrix:
    def test_observed_pairs(self, tiny_coverage):
        assert tiny_coverage.observed_pairs() == [
            (A, R1), (A, R3), (B, R1), (B, R2), (C, R1), (C, R2), (C, R3),
        ]

    def test_counts(self, tiny_coverage):
        assert tiny_coverage.count(A, R1) == 2
        assert tiny_coverage.count(C, R3) == 1
        assert tiny_coverage.count(D, R1) == 0

    def test_relation_totals(self, tiny_coverage):
        # r1 is seen with A, B, C; r2 with B, C; r3 with A, C
        np.testing.assert_array_equal(tiny_coverage.relation_totals, [3, 2, 2])

    def test_coverage_frame_sorted_with_names(self, tiny_coverage, tiny_kg):
        frame = coverage_frame(tiny_coverage, tiny_kg)
        assert list(frame.columns) == [
            "entity", "entity_name", "relation", "relation_name", "count",
        ]
        assert frame["entity_name"].tolist() == ["A", "A", "B", "B", "C", "C", "C"]
        assert frame["count"].sum() == 8

    def test_write_coverage_csv(self, tiny_coverage, tiny_kg, tmp_path):
        path = write_coverage_csv(tiny_coverage, tmp_path / "out" / "coverage.csv", tiny_kg)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "entity,entity_name,relation,relation_name,count"
        assert lines[1] == "0,A,0,r1,2"
        assert len(lines) == 8


# ---------------------------------------------------------------------------
# 2. Structural uncertainty
# ---------------------------------------------------------------------------

class TestStructuralUncertainty:
    @pytest.mark.parametrize("triple,expected", [
        (Triple(A, R1, B), 0),    # both slots covered
        (Triple(A, R2, B), 1),    # (A, r2) never seen
        (Triple(A, R2, D), 2),    # neither slot covered
        (Triple(C, R2, D), 1),    # D is unseen in training
    ])
    def test_values(self, tiny_coverage, triple, expected):
        assert structural_uncertainty(tiny_coverage, triple) == expected

    def test_batch_matches_single(self, tiny_coverage, tiny_kg):
        test = tiny_kg.split("test")
        batch = structural_uncertainty_batch(tiny_coverage, test)
        single = [structural_uncertainty(tiny_coverage, Triple(*t)) for t in test]
        assert batch.tolist() == single
        assert batch.tolist() == [0, 0, 1, 1]

    def test_range(self, synth):
        coverage = build_coverage(synth.kg)
        u = structural_uncertainty_batch(coverage, synth.kg.split("test"))
        assert set(np.unique(u)) <= {0, 1, 2}


# ---------------------------------------------------------------------------
# 3. Continuous coverage variants
# ---------------------------------------------------------------------------

class TestContinuousCoverage:
    def test_binary_mode_equals_structural(self, tiny_coverage, tiny_kg):
        test = tiny_kg.split("test")
        np.testing.assert_array_equal(
            continuous_uncertainty_batch(tiny_coverage, test, CoverageMode.BINARY),
            structural_uncertainty_batch(tiny_coverage, test).astype(float),
        )

    def test_log_scaled_max_pair_counts_as_full(self, tiny_coverage):
        # n(A, r1) = 2 is the maximum count, so g(A, r1) = 1 on both slots
        assert continuous_coverage(tiny_coverage, Triple(A, R1, A), CoverageMode.LOG_SCALED) == 0.0

    def test_log_scaled_single_occurrence(self, tiny_coverage):
        # g(B, r1) = g(C, r1) = ln 2 / ln 3
        expected = 2.0 - 2.0 * math.log(2) / math.log(3)
        value = continuous_coverage(tiny_coverage, Triple(B, R1, C), CoverageMode.LOG_SCALED)
        assert value == pytest.approx(expected)

    def test_uncovered_slot_contributes_one(self, tiny_coverage):
        for mode in (CoverageMode.LOG_SCALED, CoverageMode.TFIDF):
            assert continuous_coverage(tiny_coverage, Triple(D, R1, D), mode) == 2.0

    def test_log_scaled_decreases_with_count(self):
        # Entity k is the head of k triples under relation 0, each to a fresh tail
        heads = np.repeat(np.arange(1, 6), np.arange(1, 6))
        tails = np.arange(6, 6 + heads.size)
        train = np.stack([heads, np.zeros_like(heads), tails], axis=1)
        kg = build_graph([f"e{i}" for i in range(6 + heads.size)], ["r"], {"train": train})
        coverage = build_coverage(kg)
        values = [
            continuous_coverage(coverage, Triple(k, 0, k), CoverageMode.LOG_SCALED)
            for k in range(0, 6)
        ]
        assert values[0] == 2.0
        assert values[-1] == 0.0
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_log_scaled_weights_follow_counts(self, synth):
        coverage = build_coverage(synth.kg)
        coo = coverage.counts.tocoo()
        weights = np.asarray(coverage.log_scaled_weights[coo.row, coo.col]).ravel()
        order = np.argsort(coo.data, kind="stable")
        assert np.all(np.diff(weights[order]) >= 0)

    def test_tfidf_within_range(self, tiny_coverage, tiny_kg):
        u = continuous_uncertainty_batch(tiny_coverage, tiny_kg.split("valid"), CoverageMode.TFIDF)
        assert np.all((u >= 0.0) & (u <= 2.0))

    def test_weights_rejects_binary(self, tiny_coverage):
        with pytest.raises(InvalidInputError, match="No continuous weights"):
            tiny_coverage.weights(CoverageMode.BINARY)
