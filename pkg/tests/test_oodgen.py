"""Tests for OOD partitions, random corruptions, frequency matching and the synthetic graph.

Covers:
- partition — emerging / novel context / ID on the tiny graph
- partition invariants on a random graph (disjoint, covering, class rules)
- random_corruptions — labels, replacement tails, sampling
- verify_a3 — Chebyshev frequency matching, including a counterexample
- synth_theorem_kg — ground truth agrees with the partition rules
"""

import math

import numpy as np
import pytest

from cagp.errors import InvalidInputError
from cagp.schemas.run_config import SynthKnobs
from cagp.services.coverage import build_coverage, structural_uncertainty_batch
from cagp.services.graph import build_graph
from cagp.services.oodgen import (
    EMERGING,
    IN_DISTRIBUTION,
    NOVEL_CONTEXT,
    classify,
    partition,
    random_corruptions,
    synth_theorem_kg,
    verify_a3,
)

A, B, C, D = 0, 1, 2, 3
R1, R2, R3 = 0, 1, 2


# ---------------------------------------------------------------------------
# 1. Partition
# ---------------------------------------------------------------------------

class TestPartition:
    def test_tiny_test_split(self, tiny_kg, tiny_coverage):
        part = partition(tiny_kg, tiny_coverage, "test", tau=2)
        assert part.classes.tolist() == [
            IN_DISTRIBUTION, IN_DISTRIBUTION, NOVEL_CONTEXT, EMERGING,
        ]
        assert part.sizes() == {"in_distribution": 2, "novel_context": 1, "emerging": 1}
        np.testing.assert_array_equal(part.novel_context, [[A, R2, B]])
        np.testing.assert_array_equal(part.emerging, [[C, R2, D]])

    def test_tiny_valid_split(self, tiny_kg, tiny_coverage):
        part = partition(tiny_kg, tiny_coverage, "valid", tau=2)
        # (B, r3, A): B never seen with r3; (A, r1, D): D unseen in training
        assert part.classes.tolist() == [
            IN_DISTRIBUTION, IN_DISTRIBUTION, NOVEL_CONTEXT, EMERGING,
        ]

    def test_higher_tau_turns_b_emerging(self, tiny_kg, tiny_coverage):
        # freq(B) = 2 < 3, so (B, r1, C) and (A, r2, B) become emerging
        part = partition(tiny_kg, tiny_coverage, "test", tau=3)
        assert part.classes.tolist() == [IN_DISTRIBUTION, EMERGING, EMERGING, EMERGING]

    def test_composition(self, tiny_kg, tiny_coverage):
        composition = partition(tiny_kg, tiny_coverage, "test", tau=2).composition()
        assert composition == {"ood_count": 2, "novel_context_share": 0.5, "emerging_share": 0.5}

    def test_empty_class_is_logged(self, tiny_kg, tiny_coverage, caplog):
        partition(tiny_kg, tiny_coverage, "test", tau=100)
        assert "has no in_distribution triples" in caplog.text

    def test_frame(self, tiny_kg, tiny_coverage):
        frame = partition(tiny_kg, tiny_coverage, "test", tau=2).to_frame(tiny_kg, tiny_coverage)
        assert frame["class"].tolist() == [
            "in_distribution", "in_distribution", "novel_context", "emerging",
        ]
        assert frame["min_freq"].tolist() == [3, 2, 2, 0]
        assert frame["c_head"].tolist() == [1, 1, 0, 1]

    def test_random_graph_invariants(self):
        rng = np.random.default_rng(42)
        n_e, n_r = 30, 5
        train = np.stack(
            [rng.integers(0, n_e, 300), rng.integers(0, n_r, 300), rng.integers(0, n_e, 300)],
            axis=1,
        )
        test = np.stack(
            [rng.integers(0, n_e, 200), rng.integers(0, n_r, 200), rng.integers(0, n_e, 200)],
            axis=1,
        )
        kg = build_graph([f"e{i}" for i in range(n_e)], [f"r{i}" for i in range(n_r)],
                         {"train": train, "test": test})
        coverage = build_coverage(kg)
        part = partition(kg, coverage, "test", tau=15)

        sizes = part.sizes()
        assert sum(sizes.values()) == len(test)

        min_freq = np.minimum(kg.freq[test[:, 0]], kg.freq[test[:, 2]])
        u_str = structural_uncertainty_batch(coverage, test)
        assert np.all(min_freq[part.classes == EMERGING] < 15)
        assert np.all(min_freq[part.classes != EMERGING] >= 15)
        assert np.all(u_str[part.classes == NOVEL_CONTEXT] >= 1)
        assert np.all(u_str[part.classes == IN_DISTRIBUTION] == 0)

    def test_classify_empty(self, tiny_kg, tiny_coverage):
        assert classify(tiny_kg, tiny_coverage, [], tau=2).size == 0


# ---------------------------------------------------------------------------
# 2. Random corruptions
# ---------------------------------------------------------------------------

class TestRandomCorruptions:
    def test_originals_then_corruptions(self, tiny_kg):
        labeled = random_corruptions(tiny_kg, "test", seed=0)
        test = tiny_kg.split("test")
        assert len(labeled) == 8
        assert labeled.is_ood.tolist() == [False] * 4 + [True] * 4
        np.testing.assert_array_equal(labeled.triples[:4], test)

    def test_corruption_replaces_only_the_tail(self, tiny_kg):
        labeled = random_corruptions(tiny_kg, "test", seed=0)
        originals, corrupted = labeled.triples[:4], labeled.triples[4:]
        np.testing.assert_array_equal(corrupted[:, :2], originals[:, :2])
        assert np.all(corrupted[:, 2] != originals[:, 2])
        assert np.all((corrupted[:, 2] >= 0) & (corrupted[:, 2] < tiny_kg.entity_count))

    def test_seeded(self, tiny_kg):
        first = random_corruptions(tiny_kg, "valid", seed=5)
        second = random_corruptions(tiny_kg, "valid", seed=5)
        np.testing.assert_array_equal(first.triples, second.triples)

    def test_limit_samples_sources_in_split_order(self):
        chain = [[i, 0, i + 1] for i in range(30)]
        kg = build_graph([f"e{i}" for i in range(31)], ["r"], {"train": chain, "test": chain})
        labeled = random_corruptions(kg, "test", seed=1, limit=10)
        heads = labeled.triples[:10, 0]
        assert len(labeled) == 20
        assert len(set(heads.tolist())) == 10
        assert heads.tolist() == sorted(heads.tolist())

    def test_tails_cover_every_other_entity(self, synth):
        labeled = random_corruptions(synth.kg, "train", seed=0)
        n = len(labeled) // 2
        assert len(np.unique(labeled.triples[n:, 2])) > synth.kg.entity_count // 2

    def test_single_entity_rejected(self):
        kg = build_graph(["a"], ["r"], {"train": [[0, 0, 0]]})
        with pytest.raises(InvalidInputError, match="single entity"):
            random_corruptions(kg, "train", seed=0)

    def test_empty_split_rejected(self):
        kg = build_graph(["a", "b"], ["r"], {"train": [[0, 0, 1]], "test": []})
        with pytest.raises(InvalidInputError, match="nothing to corrupt"):
            random_corruptions(kg, "test", seed=0)


# ---------------------------------------------------------------------------
# 3. Frequency matching
# ---------------------------------------------------------------------------

class TestVerifyA3:
    @pytest.fixture
    def counterexample(self):
        # freq(A) = freq(B) = 4, freq(C) = 2; training pairs (4, 4) and (2, 2)
        train = [[A, R1, B]] * 4 + [[C, R2, C]]
        return build_graph(["A", "B", "C"], ["r1", "r2"], {"train": train})

    def test_unmatched_below_distance(self, counterexample):
        # Query (A, r2, C) has frequencies (4, 2): Chebyshev distance 2 to either pair
        assert verify_a3(counterexample, [[A, R2, C]], [0, 1, 2, 3]) == {
            0.0: 0.0, 1.0: 0.0, 2.0: 1.0, 3.0: 1.0,
        }

    def test_orientation_does_not_matter(self):
        kg = build_graph(["a", "b", "c"], ["r"], {"train": [[0, 0, 1], [0, 0, 2], [0, 0, 1]]})
        # freq a=3, b=2, c=1; (b, a) reversed is a training orientation
        assert verify_a3(kg, [[1, 0, 0]], [0]) == {0.0: 1.0}

    def test_fraction(self, tiny_kg):
        # (A, r2, B) has (3, 2), matched by (A, r1, B); (C, r2, D) has (3, 0)
        result = verify_a3(tiny_kg, [[A, R2, B], [C, R2, D]], [0, 1, 2])
        assert result == {0.0: 0.5, 1.0: 0.5, 2.0: 1.0}

    def test_empty_novel_is_nan(self, tiny_kg):
        result = verify_a3(tiny_kg, [], [1, 5])
        assert all(math.isnan(v) for v in result.values())


# ---------------------------------------------------------------------------
# 4. Synthetic theorem graph
# ---------------------------------------------------------------------------

class TestSyntheticGraph:
    @pytest.mark.parametrize("split", ["valid", "test"])
    def test_truth_matches_partition(self, synth, split):
        coverage = build_coverage(synth.kg)
        part = partition(synth.kg, coverage, split, synth.tau)
        np.testing.assert_array_equal(part.classes, synth.truth[split])

    def test_sizes(self, synth):
        truth = synth.truth["test"]
        assert int(np.sum(truth == IN_DISTRIBUTION)) == 100
        assert int(np.sum(truth == NOVEL_CONTEXT)) == 100
        assert int(np.sum(truth == EMERGING)) == 30

    def test_emerging_frequencies(self, synth):
        freq = synth.kg.freq
        emerging = np.array([name.startswith("m") for name in synth.kg.entities])
        assert set(np.unique(freq[emerging])) <= {1, 2}
        assert freq[~emerging].min() >= synth.tau

    def test_novel_matched_exactly(self, synth):
        coverage = build_coverage(synth.kg)
        part = partition(synth.kg, coverage, "test", synth.tau)
        assert verify_a3(synth.kg, part.novel_context, [0])[0.0] == 1.0

    def test_half_the_emerging_triples_are_covered(self, synth):
        coverage = build_coverage(synth.kg)
        part = partition(synth.kg, coverage, "test", synth.tau)
        u_str = structural_uncertainty_batch(coverage, part.emerging)
        assert float(np.mean(u_str == 0)) == 0.5

    def test_deterministic(self):
        knobs = SynthKnobs(entity_count=60, emerging_count=10, eval_pairs=10, hub_degree=40)
        first, second = synth_theorem_kg(knobs), synth_theorem_kg(knobs)
        np.testing.assert_array_equal(first.kg.train, second.kg.train)
        np.testing.assert_array_equal(first.kg.split("test"), second.kg.split("test"))

    def test_seed_override_changes_graph(self):
        knobs = SynthKnobs(entity_count=60, emerging_count=10, eval_pairs=10, hub_degree=40)
        first, second = synth_theorem_kg(knobs), synth_theorem_kg(knobs, seed=1)
        assert not np.array_equal(first.kg.train, second.kg.train)

    def test_too_many_heldout_pairs(self):
        knobs = SynthKnobs(relation_count=3, heldout_fraction=0.9)
        with pytest.raises(InvalidInputError, match="Cannot hold out"):
            synth_theorem_kg(knobs)

    def test_too_few_frequent_entities(self):
        with pytest.raises(InvalidInputError, match="at least two frequent"):
            synth_theorem_kg(SynthKnobs(entity_count=10, emerging_count=9))
