"""Entity–relation coverage and structural uncertainty.

The coverage structure is a sparse ``|E| x |R|`` count matrix built from the
training split only: every training triple ``(h, r, t)`` adds one to
``n(h, r)`` and one to ``n(t, r)``. Binary coverage ``c(e, r)`` is
``n(e, r) >= 1`` and structural uncertainty is ``2 - c(h, r) - c(t, r)``.

Two continuous coverage variants exist for the ablation only:

- ``log_scaled``: ``g = ln(1 + n) / ln(1 + n_max)``
- ``tfidf``: ``tf * idf`` with ``tf = n(e, r) / sum_r' n(e, r')`` and
  ``idf = ln(|E| / (1 + |{e' : n(e', r) > 0}|))``, negatives clipped to 0 and
  divided by the global maximum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from cagp.errors import InvalidInputError
from cagp.schemas.run_config import CoverageMode
from cagp.services.graph import KnowledgeGraph, Triple, as_triple_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoverageMatrix:
    """Sparse co-occurrence counts plus per-relation observed-pair totals."""

    counts: sp.csr_matrix
    relation_totals: np.ndarray
    """Number of distinct entities observed with each relation."""

    @property
    def entity_count(self) -> int:
        return self.counts.shape[0]

    @property
    def relation_count(self) -> int:
        return self.counts.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.counts.nnz)

    @property
    def density(self) -> float:
        cells = self.entity_count * self.relation_count
        return self.nnz / cells if cells else 0.0

    # ------------------------------------------------------------------
    # Lookups
    # ------------------------------------------------------------------

    def count(self, entity: int, relation: int) -> int:
        return int(self.counts[entity, relation])

    def is_covered(self, entity: int, relation: int) -> bool:
        return self.count(entity, relation) >= 1

    def lookup_counts(self, entities: np.ndarray, relations: np.ndarray) -> np.ndarray:
        """Vectorized ``n(e, r)`` for aligned entity / relation id arrays."""
        entities = np.asarray(entities, dtype=np.int64)
        relations = np.asarray(relations, dtype=np.int64)
        if entities.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.asarray(self.counts[entities, relations]).ravel().astype(np.int64)

    def covered(self, entities: np.ndarray, relations: np.ndarray) -> np.ndarray:
        return self.lookup_counts(entities, relations) >= 1

    def observed_pairs(self) -> list[tuple[int, int]]:
        """All ``(entity, relation)`` pairs with count >= 1, sorted."""
        coo = self.counts.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i])) for i in order]

    # ------------------------------------------------------------------
    # Continuous coverage tables
    # ------------------------------------------------------------------

    @cached_property
    def log_scaled_weights(self) -> sp.csr_matrix:
        weights = self.counts.astype(np.float64).tocsr()
        n_max = weights.data.max() if weights.nnz else 0.0
        if n_max <= 0:
            return weights
        weights.data = np.log1p(weights.data) / np.log1p(n_max)
        return weights

    @cached_property
    def tfidf_weights(self) -> sp.csr_matrix:
        coo = self.counts.tocoo()
        data = coo.data.astype(np.float64)
        row_sums = np.asarray(self.counts.sum(axis=1)).ravel().astype(np.float64)
        tf = data / row_sums[coo.row]
        idf = np.log(self.entity_count / (1.0 + self.relation_totals.astype(np.float64)))
        w = np.clip(tf * idf[coo.col], 0.0, None)
        w_max = w.max() if w.size else 0.0
        if w_max > 0:
            w = w / w_max
        return sp.csr_matrix((w, (coo.row, coo.col)), shape=self.counts.shape)

    def weights(self, mode: CoverageMode) -> sp.csr_matrix:
        if mode == CoverageMode.LOG_SCALED:
            return self.log_scaled_weights
        if mode == CoverageMode.TFIDF:
            return self.tfidf_weights
        raise InvalidInputError(f"No continuous weights for coverage mode {mode!r}")


def build_coverage(kg: KnowledgeGraph) -> CoverageMatrix:
    """Precompute entity–relation co-occurrence counts from the training split."""
    train = kg.train
    if len(train) == 0:
        raise InvalidInputError("Training split is empty")
    rows = np.concatenate([train[:, 0], train[:, 2]])
    cols = np.concatenate([train[:, 1], train[:, 1]])
    data = np.ones(rows.size, dtype=np.int64)
    counts = sp.coo_matrix(
        (data, (rows, cols)), shape=(kg.entity_count, kg.relation_count)
    ).tocsr()
    counts.sum_duplicates()
    counts.sort_indices()
    relation_totals = np.bincount(
        counts.tocoo().col, minlength=kg.relation_count
    ).astype(np.int64)

    matrix = CoverageMatrix(counts=counts, relation_totals=relation_totals)
    logger.info(
        "Coverage built: %d observed pairs, density %.4f", matrix.nnz, matrix.density
    )
    return matrix


# ---------------------------------------------------------------------------
# Structural uncertainty
# ---------------------------------------------------------------------------

def structural_uncertainty(coverage: CoverageMatrix, q: Triple) -> int:
    """``2 - c(h, r) - c(t, r)``: the number of uncovered endpoint slots."""
    h, r, t = (int(x) for x in q)
    return 2 - int(coverage.is_covered(h, r)) - int(coverage.is_covered(t, r))


def structural_uncertainty_batch(coverage: CoverageMatrix, triples) -> np.ndarray:
    arr = as_triple_array(triples)
    head_cov = coverage.covered(arr[:, 0], arr[:, 1])
    tail_cov = coverage.covered(arr[:, 2], arr[:, 1])
    return (2 - head_cov.astype(np.int64) - tail_cov.astype(np.int64)).astype(np.int64)


def continuous_coverage(coverage: CoverageMatrix, q: Triple, mode: CoverageMode) -> float:
    """Continuous-coverage uncertainty ``2 - g(h, r) - g(t, r)`` in [0, 2]."""
    return float(continuous_uncertainty_batch(coverage, [tuple(q)], mode)[0])


def continuous_uncertainty_batch(
    coverage: CoverageMatrix, triples, mode: CoverageMode
) -> np.ndarray:
    mode = CoverageMode(mode)
    arr = as_triple_array(triples)
    if mode == CoverageMode.BINARY:
        return structural_uncertainty_batch(coverage, arr).astype(np.float64)
    if arr.size == 0:
        return np.zeros(0, dtype=np.float64)
    weights = coverage.weights(mode)
    g_head = np.asarray(weights[arr[:, 0], arr[:, 1]]).ravel()
    g_tail = np.asarray(weights[arr[:, 2], arr[:, 1]]).ravel()
    return 2.0 - g_head - g_tail


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def coverage_frame(coverage: CoverageMatrix, kg: Optional[KnowledgeGraph] = None) -> pd.DataFrame:
    """Sorted ``(entity, relation, count)`` rows, with surface strings if a graph is given."""
    coo = coverage.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    frame = pd.DataFrame(
        {
            "entity": coo.row[order].astype(np.int64),
            "relation": coo.col[order].astype(np.int64),
            "count": coo.data[order].astype(np.int64),
        }
    )
    if kg is not None:
        frame.insert(1, "entity_name", [kg.entities[e] for e in frame["entity"]])
        frame.insert(3, "relation_name", [kg.relations[r] for r in frame["relation"]])
    return frame


def write_coverage_csv(
    coverage: CoverageMatrix, path: Path, kg: Optional[KnowledgeGraph] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coverage_frame(coverage, kg).to_csv(path, index=False, lineterminator="\n")
    return path
