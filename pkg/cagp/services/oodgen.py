"""OOD partitions, random corruptions, frequency matching and synthetic fixtures.

A query ``(h, r, t)`` is classified against a training-frequency threshold
``tau`` and the training coverage:

- emerging: ``min(freq(h), freq(t)) < tau``
- novel context: both endpoints frequent, but ``c(h, r) = 0`` or ``c(t, r) = 0``
- in distribution: both endpoints frequent and both slots covered

Usage::

    from cagp.services.oodgen import partition, verify_a3

    part = partition(kg, coverage, "test", tau)
    matched = verify_a3(kg, part.novel_context, [1, 5, 10])
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from cagp.errors import InvalidInputError
from cagp.schemas.run_config import SynthKnobs
from cagp.services.coverage import CoverageMatrix
from cagp.services.graph import KnowledgeGraph, as_triple_array, build_graph

logger = logging.getLogger(__name__)

# Class codes used in partitions and synthetic ground truth
IN_DISTRIBUTION = 0
NOVEL_CONTEXT = 1
EMERGING = 2

CLASS_NAMES = {
    IN_DISTRIBUTION: "in_distribution",
    NOVEL_CONTEXT: "novel_context",
    EMERGING: "emerging",
}


# ---------------------------------------------------------------------------
# Partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OodPartition:
    """Class code per input triple; the three views partition the input."""

    triples: np.ndarray
    classes: np.ndarray
    tau: int

    def _select(self, code: int) -> np.ndarray:
        return self.triples[self.classes == code]

    @property
    def emerging(self) -> np.ndarray:
        return self._select(EMERGING)

    @property
    def novel_context(self) -> np.ndarray:
        return self._select(NOVEL_CONTEXT)

    @property
    def in_distribution(self) -> np.ndarray:
        return self._select(IN_DISTRIBUTION)

    @property
    def is_ood(self) -> np.ndarray:
        return self.classes != IN_DISTRIBUTION

    def sizes(self) -> dict[str, int]:
        return {name: int(np.sum(self.classes == code)) for code, name in CLASS_NAMES.items()}

    def composition(self) -> dict[str, Optional[float]]:
        """Share of novel-context and emerging triples within the OOD class."""
        sizes = self.sizes()
        n_ood = sizes["emerging"] + sizes["novel_context"]
        if n_ood == 0:
            return {"ood_count": 0, "novel_context_share": None, "emerging_share": None}
        return {
            "ood_count": n_ood,
            "novel_context_share": sizes["novel_context"] / n_ood,
            "emerging_share": sizes["emerging"] / n_ood,
        }

    def to_frame(self, kg: KnowledgeGraph, coverage: CoverageMatrix) -> pd.DataFrame:
        arr = self.triples
        return pd.DataFrame(
            {
                "head": arr[:, 0],
                "relation": arr[:, 1],
                "tail": arr[:, 2],
                "class": [CLASS_NAMES[int(c)] for c in self.classes],
                "min_freq": np.minimum(kg.freq[arr[:, 0]], kg.freq[arr[:, 2]]),
                "c_head": coverage.covered(arr[:, 0], arr[:, 1]).astype(np.int64),
                "c_tail": coverage.covered(arr[:, 2], arr[:, 1]).astype(np.int64),
            }
        )


def classify(kg: KnowledgeGraph, coverage: CoverageMatrix, triples, tau: int) -> np.ndarray:
    arr = as_triple_array(triples)
    classes = np.full(len(arr), IN_DISTRIBUTION, dtype=np.int8)
    if len(arr) == 0:
        return classes
    min_freq = np.minimum(kg.freq[arr[:, 0]], kg.freq[arr[:, 2]])
    fully_covered = coverage.covered(arr[:, 0], arr[:, 1]) & coverage.covered(arr[:, 2], arr[:, 1])
    classes[~fully_covered] = NOVEL_CONTEXT
    classes[min_freq < tau] = EMERGING
    return classes


def partition(kg: KnowledgeGraph, coverage: CoverageMatrix, split: str, tau: int) -> OodPartition:
    """Classify every triple of ``split`` as emerging, novel context or ID."""
    triples = kg.split(split)
    part = OodPartition(triples=triples, classes=classify(kg, coverage, triples, tau), tau=int(tau))
    sizes = part.sizes()
    logger.info(
        "Partition of %s at tau=%d: emerging=%d novel=%d id=%d",
        split, tau, sizes["emerging"], sizes["novel_context"], sizes["in_distribution"],
    )
    for name, count in sizes.items():
        if count == 0:
            logger.warning("Partition of %s has no %s triples", split, name)
    return part


# ---------------------------------------------------------------------------
# Random corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledTriples:
    triples: np.ndarray
    is_ood: np.ndarray

    def __len__(self) -> int:
        return len(self.triples)


def random_corruptions(
    kg: KnowledgeGraph, split: str, seed: int, limit: Optional[int] = None
) -> LabeledTriples:
    """Source triples (ID) followed by one tail corruption each (OOD).

    The replacement tail is uniform over every entity except the original
    tail. With ``limit`` set, that many source triples are sampled without
    replacement (kept in split order).
    """
    source = kg.split(split)
    if len(source) == 0:
        raise InvalidInputError(f"Split {split!r} is empty; nothing to corrupt")
    if kg.entity_count < 2:
        raise InvalidInputError("Cannot corrupt tails with a single entity")

    rng = np.random.default_rng(seed)
    if limit is not None and limit < len(source):
        keep = np.sort(rng.choice(len(source), size=limit, replace=False))
        source = source[keep]

    draws = rng.integers(0, kg.entity_count - 1, size=len(source))
    new_tails = draws + (draws >= source[:, 2])
    corrupted = source.copy()
    corrupted[:, 2] = new_tails

    triples = np.concatenate([source, corrupted], axis=0)
    labels = np.concatenate([np.zeros(len(source), bool), np.ones(len(source), bool)])
    logger.info("Generated %d corruptions of %s (seed %d)", len(source), split, seed)
    return LabeledTriples(triples=triples, is_ood=labels)


# ---------------------------------------------------------------------------
# Frequency matching
# ---------------------------------------------------------------------------

def verify_a3(kg: KnowledgeGraph, novel, epsilons: Sequence[float]) -> dict[float, float]:
    """Fraction of ``novel`` triples with a frequency-matched training triple, per epsilon.

    A training triple matches when both endpoint frequencies are within
    epsilon (Chebyshev distance); training pairs are indexed in both
    orientations. An empty ``novel`` list gives NaN.
    """
    arr = as_triple_array(novel)
    if len(arr) == 0:
        return {float(eps): math.nan for eps in epsilons}

    train = kg.train
    pairs = np.stack([kg.freq[train[:, 0]], kg.freq[train[:, 2]]], axis=1)
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]], axis=0), axis=0)
    tree = cKDTree(pairs.astype(np.float64))

    queries = np.stack([kg.freq[arr[:, 0]], kg.freq[arr[:, 2]]], axis=1).astype(np.float64)
    distances, _ = tree.query(queries, k=1, p=np.inf)
    return {float(eps): float(np.mean(distances <= eps)) for eps in epsilons}


# ---------------------------------------------------------------------------
# Synthetic theorem fixture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticKG:
    kg: KnowledgeGraph
    truth: dict[str, np.ndarray]
    """Class code per triple of each evaluation split."""
    tau: int


class _TripleBuilder:
    """Accumulates training triples and tracks degrees and coverage."""

    def __init__(self, entity_count: int):
        self.triples: list[tuple[int, int, int]] = []
        self.degree = np.zeros(entity_count, dtype=np.int64)
        self.covered: list[set[int]] = [set() for _ in range(entity_count)]

    def add(self, h: int, r: int, t: int) -> None:
        self.triples.append((h, r, t))
        self.degree[h] += 1
        self.degree[t] += 1
        self.covered[h].add(r)
        self.covered[t].add(r)


def _choose_heldout(
    knobs: SynthKnobs, frequent: int, rng: np.random.Generator
) -> list[set[int]]:
    """Held-out relation set per frequent entity; every entity keeps >= 2 relations."""
    total = frequent * knobs.relation_count
    wanted = int(round(knobs.heldout_fraction * total))
    capacity = frequent * (knobs.relation_count - 2)
    if wanted > capacity:
        raise InvalidInputError(
            f"Cannot hold out {wanted} entity-relation pairs; at most {capacity} "
            f"leave every entity two relations"
        )
    heldout: list[set[int]] = [set() for _ in range(frequent)]
    chosen = 0
    for cell in rng.permutation(total):
        if chosen == wanted:
            break
        e, r = divmod(int(cell), knobs.relation_count)
        if knobs.relation_count - len(heldout[e]) > 2:
            heldout[e].add(r)
            chosen += 1
    return heldout


def synth_theorem_kg(knobs: SynthKnobs, seed: Optional[int] = None) -> SyntheticKG:
    """Generate a graph whose evaluation splits satisfy the partition assumptions exactly.

    Frequent entities get power-law target degrees of at least
    ``min_frequent_degree`` and only ever appear in training with relations
    outside their held-out set. Emerging entities appear in one or two
    training triples. Each evaluation split holds, per pair, an ID triple
    ``(h, r_id, t)`` and a novel-context triple ``(h, r_nov, t)`` sharing the
    endpoints of a training triple, so novel and ID endpoints are frequency
    matched with epsilon 0. Emerging triples alternate between a covered
    relation and an uncovered one.
    """
    seed = knobs.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n_emerging = knobs.emerging_count
    n_frequent = knobs.entity_count - n_emerging
    n_rel = knobs.relation_count
    if n_frequent < 2:
        raise InvalidInputError(
            f"Need at least two frequent entities, got {n_frequent} "
            f"({knobs.entity_count} entities, {n_emerging} emerging)"
        )
    if knobs.min_frequent_degree < 3:
        raise InvalidInputError("min_frequent_degree must be at least 3")

    heldout = _choose_heldout(knobs, n_frequent, rng)
    allowed = [sorted(set(range(n_rel)) - heldout[e]) for e in range(n_frequent)]

    ranks = np.arange(1, n_frequent + 1, dtype=np.float64)
    target = knobs.min_frequent_degree + np.floor(knobs.hub_degree * ranks ** (-knobs.skew_exponent))
    target = target.astype(np.int64)
    partner_weights = target / target.sum()

    builder = _TripleBuilder(knobs.entity_count)

    # Frequent-frequent training triples until every target degree is reached
    for e in range(n_frequent):
        attempts = 0
        while builder.degree[e] < target[e]:
            attempts += 1
            if attempts > 100 * target[e]:
                raise InvalidInputError(
                    f"Could not reach degree {target[e]} for entity {e}; "
                    "too many held-out pairs"
                )
            p = int(rng.choice(n_frequent, p=partner_weights))
            if p == e:
                continue
            shared = sorted(set(allowed[e]) & set(allowed[p]))
            if not shared:
                continue
            r = shared[int(rng.integers(len(shared)))]
            if rng.random() < 0.5:
                builder.add(e, r, p)
            else:
                builder.add(p, r, e)
    frequent_triples = list(builder.triples)

    # Emerging entities: one or two training triples each
    for m in range(n_emerging):
        e = n_frequent + m
        for _ in range(m % 2 + 1):
            p = int(rng.choice(n_frequent, p=partner_weights))
            r = allowed[p][int(rng.integers(len(allowed[p])))]
            if rng.random() < 0.5:
                builder.add(e, r, p)
            else:
                builder.add(p, r, e)

    if n_frequent and builder.degree[:n_frequent].min() < knobs.min_frequent_degree:
        raise InvalidInputError("Generated frequent entity below min_frequent_degree")

    sources = np.asarray(frequent_triples, dtype=np.int64).reshape(-1, 3)
    # Sources with a held-out relation at either endpoint can host a novel-context triple
    hosts = [
        i for i, (h, _, t) in enumerate(sources) if heldout[h] or heldout[t]
    ]
    with_novel = any(len(s) for s in heldout)
    if with_novel and not hosts:
        raise InvalidInputError("No training triple touches a held-out pair")

    # Frequent entities covering each relation, for emerging evaluation partners
    coverers = [
        [e for e in range(n_frequent) if r in builder.covered[e]] for r in range(n_rel)
    ]

    def eval_split() -> tuple[np.ndarray, np.ndarray]:
        rows: list[tuple[int, int, int]] = []
        classes: list[int] = []
        pool = hosts if with_novel else list(range(len(sources)))
        for _ in range(knobs.eval_pairs):
            h, _, t = (int(x) for x in sources[pool[int(rng.integers(len(pool)))]])
            both = sorted(builder.covered[h] & builder.covered[t])
            rows.append((h, both[int(rng.integers(len(both)))], t))
            classes.append(IN_DISTRIBUTION)
            if with_novel:
                novel = sorted(heldout[h] | heldout[t])
                rows.append((h, novel[int(rng.integers(len(novel)))], t))
                classes.append(NOVEL_CONTEXT)
        for m in range(n_emerging):
            e = n_frequent + m
            own = sorted(builder.covered[e])
            if m % 2 == 0:
                candidates = own
            else:
                candidates = sorted(set(range(n_rel)) - builder.covered[e])
            candidates = [r for r in candidates if coverers[r]] or own
            r = candidates[int(rng.integers(len(candidates)))]
            partner = coverers[r][int(rng.integers(len(coverers[r])))]
            rows.append((e, r, partner))
            classes.append(EMERGING)
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3), np.asarray(classes, dtype=np.int8)

    valid, valid_truth = eval_split()
    test, test_truth = eval_split()

    entities = [f"f{i:04d}" for i in range(n_frequent)] + [f"m{i:04d}" for i in range(n_emerging)]
    relations = [f"r{i:02d}" for i in range(n_rel)]
    kg = build_graph(
        entities,
        relations,
        {
            "train": np.asarray(builder.triples, dtype=np.int64).reshape(-1, 3),
            "valid": valid,
            "test": test,
        },
    )
    logger.info(
        "Synthetic graph: %d entities, %d relations, %d train / %d valid / %d test triples",
        kg.entity_count, kg.relation_count, len(kg.train), len(valid), len(test),
    )
    return SyntheticKG(
        kg=kg,
        truth={"valid": valid_truth, "test": test_truth},
        tau=knobs.min_frequent_degree,
    )
