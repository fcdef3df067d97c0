"""Empirical assumption checks and stratified AUROC by OOD type.

Usage::

    from cagp.services.verify import assumption_report, complementarity_table

    report = assumption_report(kg, coverage, model, part, epsilons=[1, 5, 10])
    print(report.to_text())
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from cagp.config import defaults
from cagp.errors import InvalidInputError, UndefinedMetricError
from cagp.services.coverage import CoverageMatrix, structural_uncertainty_batch
from cagp.services.graph import KnowledgeGraph
from cagp.services.metrics import auroc_from_arrays
from cagp.services.oodgen import OodPartition, verify_a3
from cagp.services.uncertainty import (
    MixingWeight,
    SemanticNormalizer,
    VarianceSource,
    combine_cagp,
    entity_variances,
    fit_normalizer,
    semantic_uncertainty_batch,
)

logger = logging.getLogger(__name__)


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidInputError(f"Spearman inputs differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise InvalidInputError("Spearman needs at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("Spearman is undefined for a constant input")
    rho, _ = spearmanr(x, y)
    return float(rho)


def _auroc_or_none(ood_u: np.ndarray, id_u: np.ndarray) -> Optional[float]:
    if ood_u.size == 0 or id_u.size == 0:
        return None
    labels = np.concatenate([np.zeros(id_u.size, bool), np.ones(ood_u.size, bool)])
    return auroc_from_arrays(np.concatenate([id_u, ood_u]), labels)


# ---------------------------------------------------------------------------
# Assumption report
# ---------------------------------------------------------------------------

@dataclass
class TheoremRow:
    name: str
    signal: str
    comparison: str
    predicted: Optional[float]
    observed: Optional[float]
    holds: Optional[bool]


@dataclass
class AssumptionReport:
    """A1–A6 values; ``None`` marks a row that is not applicable to the inputs."""

    a1_spearman: Optional[float]
    a2_coverage_rate: Optional[float]
    a3_matched: dict[float, Optional[float]]
    a4_delta: Optional[float]
    a4_delta_raw: Optional[float]
    a5_rho: Optional[float]
    a6_auroc_emerging: Optional[float]
    theorem_rows: list[TheoremRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "a1_spearman": self.a1_spearman,
            "a2_coverage_rate": self.a2_coverage_rate,
            "a3_matched": {f"{eps:g}": value for eps, value in self.a3_matched.items()},
            "a4_delta": self.a4_delta,
            "a4_delta_raw": self.a4_delta_raw,
            "a5_rho": self.a5_rho,
            "a6_auroc_emerging": self.a6_auroc_emerging,
            "theorem_rows": [vars(row) for row in self.theorem_rows],
        }

    def assumptions_frame(self) -> pd.DataFrame:
        rows = [
            ("A1", "spearman(freq, variance)", self.a1_spearman, "< 0"),
            ("A2", "ID coverage rate", self.a2_coverage_rate, "= 1"),
        ]
        for eps, value in self.a3_matched.items():
            rows.append(("A3", f"matched fraction, eps={eps:g}", value, "= 1"))
        rows += [
            ("A4", "semantic gap delta (normalized)", self.a4_delta, "< 1"),
            ("A4", "semantic gap delta (raw)", self.a4_delta_raw, ""),
            ("A5", "P(U_str = 0 | emerging)", self.a5_rho, "in [0, 1]"),
            ("A6", "semantic AUROC, emerging vs ID", self.a6_auroc_emerging, "> 0.5"),
        ]
        return pd.DataFrame(rows, columns=["assumption", "quantity", "value", "requirement"])

    def theorem_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(row) for row in self.theorem_rows],
            columns=["name", "signal", "comparison", "predicted", "observed", "holds"],
        )

    def to_text(self) -> str:
        return (
            "Assumptions\n"
            + self.assumptions_frame().to_string(index=False, na_rep="n/a")
            + "\n\nTheorem validation\n"
            + self.theorem_frame().to_string(index=False, na_rep="n/a")
            + "\n"
        )


def _nan_to_none(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else value


def assumption_report(
    kg: KnowledgeGraph,
    coverage: CoverageMatrix,
    source: Optional[VarianceSource],
    part: OodPartition,
    epsilons: Sequence[float] = defaults.A3_EPSILONS,
    normalizer: Optional[SemanticNormalizer] = None,
) -> AssumptionReport:
    """Measure A1–A6 on one run's graph, coverage, variances and partition.

    ``source`` may be ``None`` when no model is available; the semantic rows
    (A1, A4, A6 and the semantic theorem row) are then not applicable.
    """
    emerging, novel, ind = part.emerging, part.novel_context, part.in_distribution
    str_id = structural_uncertainty_batch(coverage, ind)
    str_novel = structural_uncertainty_batch(coverage, novel)
    str_emerging = structural_uncertainty_batch(coverage, emerging)

    a2 = float(np.mean(str_id == 0)) if len(ind) else None
    a5 = float(np.mean(str_emerging == 0)) if len(emerging) else None
    a3 = {eps: _nan_to_none(v) for eps, v in verify_a3(kg, novel, epsilons).items()}

    a1 = a4 = a4_raw = a6 = None
    sem_auroc_novel = None
    if source is not None:
        variances = entity_variances(source)
        normalizer = normalizer or fit_normalizer(variances, kg)
        train_entities = kg.freq > 0
        try:
            a1 = spearman(kg.freq[train_entities], variances[train_entities])
        except UndefinedMetricError as exc:
            logger.warning("A1 not applicable: %s", exc.message)

        raw_id = semantic_uncertainty_batch(variances, ind)
        raw_novel = semantic_uncertainty_batch(variances, novel)
        raw_emerging = semantic_uncertainty_batch(variances, emerging)
        if len(ind) and len(novel):
            a4_raw = float(raw_id.max() - raw_novel.min())
            a4 = float(normalizer.normalize(raw_id).max() - normalizer.normalize(raw_novel).min())
        a6 = _auroc_or_none(normalizer.normalize(raw_emerging), normalizer.normalize(raw_id))
        sem_auroc_novel = _auroc_or_none(
            normalizer.normalize(raw_novel), normalizer.normalize(raw_id)
        )

    lo, hi = defaults.NEAR_RANDOM_BAND
    str_auroc_novel = _auroc_or_none(str_novel.astype(np.float64), str_id.astype(np.float64))
    rows = [
        TheoremRow(
            name="relation_agnostic_near_random",
            signal="semantic",
            comparison="novel_context vs ID",
            predicted=0.5,
            observed=sem_auroc_novel,
            holds=None if sem_auroc_novel is None else bool(lo <= sem_auroc_novel <= hi),
        ),
        TheoremRow(
            name="structural_exact_on_novel",
            signal="structural",
            comparison="novel_context vs ID",
            predicted=1.0 if a2 == 1.0 else None,
            observed=str_auroc_novel,
            holds=(
                None if str_auroc_novel is None or a2 != 1.0
                else bool(str_auroc_novel == 1.0)
            ),
        ),
    ]
    return AssumptionReport(
        a1_spearman=a1,
        a2_coverage_rate=a2,
        a3_matched=a3,
        a4_delta=a4,
        a4_delta_raw=a4_raw,
        a5_rho=a5,
        a6_auroc_emerging=a6,
        theorem_rows=rows,
    )


# ---------------------------------------------------------------------------
# Complementarity
# ---------------------------------------------------------------------------

COMPLEMENTARITY_COLUMNS = ("emerging", "novel_context", "all_ood")


def complementarity_table(
    source: Optional[VarianceSource],
    coverage: CoverageMatrix,
    weight: MixingWeight,
    part: OodPartition,
    normalizer: Optional[SemanticNormalizer],
) -> pd.DataFrame:
    """AUROC of each signal on (emerging vs ID), (novel vs ID) and (all OOD vs ID).

    Without a variance source only the structural row is produced. Cells for
    an empty OOD class are NaN.
    """
    ind = part.in_distribution
    if len(ind) == 0:
        raise UndefinedMetricError("Complementarity needs in-distribution triples")
    if len(part.emerging) == 0 and len(part.novel_context) == 0:
        raise UndefinedMetricError("Complementarity needs OOD triples")

    groups = {
        "emerging": part.emerging,
        "novel_context": part.novel_context,
        "all_ood": part.triples[part.is_ood],
    }

    def signals(triples: np.ndarray) -> dict[str, np.ndarray]:
        u_str = structural_uncertainty_batch(coverage, triples).astype(np.float64)
        if source is None:
            return {"structural": u_str}
        u_sem = normalizer.normalize(semantic_uncertainty_batch(entity_variances(source), triples))
        return {
            "semantic": u_sem,
            "structural": u_str,
            "fixed_0.5": combine_cagp(MixingWeight(lam=0.0), u_sem, u_str),
            "cagp": combine_cagp(weight, u_sem, u_str),
        }

    id_signals = signals(ind)
    table: dict[str, dict[str, float]] = {name: {} for name in id_signals}
    for column, triples in groups.items():
        ood_signals = signals(triples) if len(triples) else None
        for name, id_u in id_signals.items():
            value = _auroc_or_none(ood_signals[name], id_u) if ood_signals else None
            table[name][column] = math.nan if value is None else value
    frame = pd.DataFrame.from_dict(table, orient="index", columns=list(COMPLEMENTARITY_COLUMNS))
    frame.index.name = "signal"
    return frame
