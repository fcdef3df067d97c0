"""Knowledge-graph loading, indexing and frequency statistics.

Triples are stored per split as ``int64`` arrays of shape ``(n, 3)`` with
columns ``(head, relation, tail)``. Entity and relation ids are dense indices
into vocabularies built from the union of all splits, in order of first
appearance (train, then valid, then test), so ids are deterministic for a
given set of files.

Usage::

    from cagp.services.graph import load_tsv, frequency_threshold

    kg = load_tsv({"train": "train.txt", "valid": "valid.txt", "test": "test.txt"})
    tau = frequency_threshold(kg, 0.10)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Union

import numpy as np

from cagp.errors import ArtifactMissingError, GraphParseError, InvalidInputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_SPLIT_ORDER = {"train": 0, "valid": 1, "test": 2}


class Triple(NamedTuple):
    """A single (head, relation, tail) query in id space."""

    head: int
    relation: int
    tail: int


def as_triple_array(triples) -> np.ndarray:
    """Coerce a Triple, a sequence of triples or an array to an ``(n, 3)`` int64 array."""
    if isinstance(triples, Triple):
        return np.asarray([triples], dtype=np.int64)
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"Expected triples of shape (n, 3), got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Knowledge graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeGraph:
    """Indexed vocabularies, split triples and training-split entity frequencies."""

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    splits: dict[str, np.ndarray]
    freq: np.ndarray = field(repr=False)
    """Per-entity count of training-triple endpoints (a self-loop counts twice)."""

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    @property
    def train(self) -> np.ndarray:
        return self.splits["train"]

    def split(self, name: str) -> np.ndarray:
        """Triples of a split; unknown names are an input error."""
        if name not in self.splits:
            raise InvalidInputError(
                f"Unknown split {name!r}; available: {sorted(self.splits)}"
            )
        return self.splits[name]

    def decode(self, triple: Triple) -> tuple[str, str, str]:
        """Surface strings of an id triple."""
        h, r, t = (int(x) for x in triple)
        return self.entities[h], self.relations[r], self.entities[t]


def compute_frequencies(train: np.ndarray, entity_count: int) -> np.ndarray:
    """Count how many training-triple endpoints each entity occupies."""
    if len(train) == 0:
        return np.zeros(entity_count, dtype=np.int64)
    endpoints = np.concatenate([train[:, 0], train[:, 2]])
    return np.bincount(endpoints, minlength=entity_count).astype(np.int64)


def build_graph(
    entities: list[str] | tuple[str, ...],
    relations: list[str] | tuple[str, ...],
    splits: Mapping[str, np.ndarray],
) -> KnowledgeGraph:
    """Assemble a graph from id-space splits, validating ids and the train split."""
    entity_count = len(entities)
    relation_count = len(relations)
    checked: dict[str, np.ndarray] = {}
    for name, triples in splits.items():
        arr = as_triple_array(triples).copy()
        if arr.size and (
            arr[:, [0, 2]].min() < 0
            or arr[:, [0, 2]].max() >= entity_count
            or arr[:, 1].min() < 0
            or arr[:, 1].max() >= relation_count
        ):
            raise InvalidInputError(f"Split {name!r} references ids outside the vocabulary")
        arr.setflags(write=False)
        checked[name] = arr

    if len(checked.get("train", ())) == 0:
        raise InvalidInputError("Training split is empty")

    freq = compute_frequencies(checked["train"], entity_count)
    freq.setflags(write=False)
    return KnowledgeGraph(
        entities=tuple(entities),
        relations=tuple(relations),
        splits=checked,
        freq=freq,
    )


# ---------------------------------------------------------------------------
# TSV I/O
# ---------------------------------------------------------------------------

def _read_split(path: Path) -> list[tuple[str, str, str]]:
    try:
        raw_lines = path.read_bytes().splitlines()
    except FileNotFoundError as exc:
        raise ArtifactMissingError(f"Split file not found: {path}") from exc
    except OSError as exc:
        raise InvalidInputError(f"Cannot read {path}: {exc.strerror or exc}") from exc

    rows: list[tuple[str, str, str]] = []
    for line_number, raw in enumerate(raw_lines, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphParseError(
                f"invalid UTF-8 at byte {exc.start}",
                path=str(path),
                line_number=line_number,
            ) from exc
        # Blank lines carry no triple
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphParseError(
                f"expected 3 tab-separated fields, found {len(parts)}",
                path=str(path),
                line_number=line_number,
            )
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_tsv(paths: Mapping[str, PathLike]) -> KnowledgeGraph:
    """Load tab-separated ``head<TAB>relation<TAB>tail`` files, one per split.

    Args:
        paths: split name → file path. ``train`` is required; blank lines are
               skipped, duplicate triples are kept as given.

    Raises:
        GraphParseError: a non-blank line is not UTF-8 or does not have exactly
            three fields.
        InvalidInputError: a file cannot be read, no train split is given, or
            the train split is empty.
    """
    if "train" not in paths:
        raise InvalidInputError("A train split path is required")

    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}

    def intern(mapping: dict[str, int], key: str) -> int:
        if key not in mapping:
            mapping[key] = len(mapping)
        return mapping[key]

    # Canonical split order first so ids do not depend on mapping order
    ordered = sorted(paths, key=lambda s: _SPLIT_ORDER.get(s, len(_SPLIT_ORDER)))
    splits: dict[str, np.ndarray] = {}
    for split in ordered:
        rows = _read_split(Path(paths[split]))
        ids = [
            (intern(entity_ids, h), intern(relation_ids, r), intern(entity_ids, t))
            for h, r, t in rows
        ]
        splits[split] = np.asarray(ids, dtype=np.int64).reshape(-1, 3)
        logger.info("Loaded %d %s triples from %s", len(ids), split, paths[split])

    kg = build_graph(list(entity_ids), list(relation_ids), splits)
    logger.info(
        "Graph ready: %d entities, %d relations", kg.entity_count, kg.relation_count
    )
    return kg


def write_tsv(kg: KnowledgeGraph, directory: PathLike) -> dict[str, Path]:
    """Write every split back as ``<split>.txt`` TSV; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for name, triples in kg.splits.items():
        path = directory / f"{name}.txt"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for h, r, t in triples:
                f.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")
        written[name] = path
    return written


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def frequency_threshold(kg: KnowledgeGraph, percentile: float) -> int:
    """Nearest-rank percentile of training frequencies, one vote per train entity.

    Entities that never appear in the training split (frequency 0) are left
    out of the multiset.
    """
    if not 0.0 <= percentile <= 1.0:
        raise InvalidInputError(f"percentile {percentile} outside [0, 1]")
    observed = kg.freq[kg.freq > 0]
    if observed.size == 0:
        raise InvalidInputError("Training split is empty")
    # inverted_cdf is the nearest-rank definition: smallest value whose CDF >= p
    return int(np.quantile(observed, percentile, method="inverted_cdf"))


def relation_frequencies(kg: KnowledgeGraph) -> np.ndarray:
    """Number of training triples per relation."""
    return np.bincount(kg.train[:, 1], minlength=kg.relation_count).astype(np.int64)


@dataclass
class GraphStats:
    """Deterministic summary of a loaded graph."""

    entity_count: int
    relation_count: int
    split_counts: dict[str, int]
    train_entity_count: int
    unseen_entities: dict[str, int]
    degree: dict[str, float]
    frequency_quantiles: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "split_counts": dict(self.split_counts),
            "train_count": self.split_counts.get("train", 0),
            "valid_count": self.split_counts.get("valid", 0),
            "test_count": self.split_counts.get("test", 0),
            "train_entity_count": self.train_entity_count,
            "unseen_entities": dict(self.unseen_entities),
            "degree": dict(self.degree),
            "frequency_quantiles": dict(self.frequency_quantiles),
        }


STAT_QUANTILES = (0.05, 0.10, 0.20, 0.30, 0.50, 0.90, 0.99)


def graph_stats(kg: KnowledgeGraph) -> GraphStats:
    """Counts, degree distribution and frequency quantiles for reporting."""
    observed = kg.freq[kg.freq > 0]
    unseen: dict[str, int] = {}
    for name, triples in kg.splits.items():
        if name == "train":
            continue
        if len(triples) == 0:
            unseen[name] = 0
            continue
        endpoints = np.unique(np.concatenate([triples[:, 0], triples[:, 2]]))
        unseen[name] = int(np.sum(kg.freq[endpoints] == 0))

    return GraphStats(
        entity_count=kg.entity_count,
        relation_count=kg.relation_count,
        split_counts={name: int(len(t)) for name, t in kg.splits.items()},
        train_entity_count=int(observed.size),
        unseen_entities=unseen,
        degree={
            "min": int(observed.min()),
            "max": int(observed.max()),
            "mean": round(float(observed.mean()), 6),
            "median": float(np.median(observed)),
        },
        frequency_quantiles={
            f"{q:.2f}": int(np.quantile(observed, q, method="inverted_cdf"))
            for q in STAT_QUANTILES
        },
    )
