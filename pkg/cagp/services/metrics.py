"""Detection, calibration and selective-prediction metrics.

All detection metrics treat OOD as the positive class and higher
uncertainty as "more likely OOD". AUROC credits ties with one half
(Mann–Whitney), which matters because structural uncertainty only takes
three values.

Usage::

    from cagp.services.metrics import ScoredSamples, auroc

    samples = ScoredSamples.from_groups(id_uncertainty, ood_uncertainty)
    print(auroc(samples))
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, brier_score_loss, f1_score

from cagp.config import defaults
from cagp.errors import InvalidInputError, UndefinedMetricError
from cagp.services.graph import KnowledgeGraph, as_triple_array, relation_frequencies

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredSample:
    uncertainty: float
    is_ood: bool
    correct: Optional[bool] = None


@dataclass(frozen=True)
class ScoredSamples:
    """Aligned uncertainty / label (/ correctness) columns."""

    uncertainty: np.ndarray
    is_ood: np.ndarray
    correct: Optional[np.ndarray] = None

    def __post_init__(self):
        u = np.asarray(self.uncertainty, dtype=np.float64).ravel()
        labels = np.asarray(self.is_ood, dtype=bool).ravel()
        if u.shape != labels.shape:
            raise InvalidInputError(
                f"{u.size} uncertainties but {labels.size} labels"
            )
        if not np.all(np.isfinite(u)):
            raise InvalidInputError("Uncertainties must be finite")
        object.__setattr__(self, "uncertainty", u)
        object.__setattr__(self, "is_ood", labels)
        if self.correct is not None:
            correct = np.asarray(self.correct, dtype=bool).ravel()
            if correct.shape != u.shape:
                raise InvalidInputError(
                    f"{u.size} uncertainties but {correct.size} correctness flags"
                )
            object.__setattr__(self, "correct", correct)

    @classmethod
    def from_samples(cls, samples: Sequence[ScoredSample]) -> "ScoredSamples":
        correct = None
        if samples and all(s.correct is not None for s in samples):
            correct = [s.correct for s in samples]
        return cls(
            uncertainty=np.array([s.uncertainty for s in samples], dtype=np.float64),
            is_ood=np.array([s.is_ood for s in samples], dtype=bool),
            correct=correct,
        )

    @classmethod
    def from_groups(cls, id_uncertainty, ood_uncertainty) -> "ScoredSamples":
        id_u = np.asarray(id_uncertainty, dtype=np.float64).ravel()
        ood_u = np.asarray(ood_uncertainty, dtype=np.float64).ravel()
        return cls(
            uncertainty=np.concatenate([id_u, ood_u]),
            is_ood=np.concatenate([np.zeros(id_u.size, bool), np.ones(ood_u.size, bool)]),
        )

    def __len__(self) -> int:
        return int(self.uncertainty.size)

    @property
    def n_ood(self) -> int:
        return int(self.is_ood.sum())

    @property
    def n_id(self) -> int:
        return len(self) - self.n_ood


def _require_both_classes(is_ood: np.ndarray, metric: str) -> None:
    n_ood = int(is_ood.sum())
    if n_ood == 0 or n_ood == is_ood.size:
        raise UndefinedMetricError(f"{metric} needs at least one ID and one OOD sample")


def min_max(u: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] over the pool; a constant pool maps to zeros."""
    u = np.asarray(u, dtype=np.float64)
    if u.size == 0:
        return u
    lo, hi = u.min(), u.max()
    if hi == lo:
        return np.zeros_like(u)
    return (u - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def auroc_from_arrays(uncertainty, is_ood) -> float:
    """Rank-sum AUROC with average ranks for ties."""
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    labels = np.asarray(is_ood, dtype=bool).ravel()
    _require_both_classes(labels, "AUROC")
    n_ood = int(labels.sum())
    n_id = labels.size - n_ood
    ranks = rankdata(u, method="average")
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_ood * (n_ood + 1) / 2.0) / (n_ood * n_id)


def auroc(samples: ScoredSamples) -> float:
    return auroc_from_arrays(samples.uncertainty, samples.is_ood)


def aupr(samples: ScoredSamples) -> float:
    """Average precision with OOD as the positive class (step integration)."""
    _require_both_classes(samples.is_ood, "AUPR")
    return float(average_precision_score(samples.is_ood.astype(int), samples.uncertainty))


def f1_at(samples: ScoredSamples, threshold: float = 0.5) -> float:
    """F1 after min-max normalizing the pool; ``u_norm >= threshold`` flags OOD."""
    _require_both_classes(samples.is_ood, "F1")
    predicted = min_max(samples.uncertainty) >= threshold
    return float(f1_score(samples.is_ood.astype(int), predicted.astype(int), zero_division=0))


def separation(samples: ScoredSamples) -> float:
    """Mean OOD minus mean ID uncertainty on the pool's [0, 1] min-max scale."""
    _require_both_classes(samples.is_ood, "separation")
    scaled = min_max(samples.uncertainty)
    return float(scaled[samples.is_ood].mean() - scaled[~samples.is_ood].mean())


def detection_metrics(samples: ScoredSamples) -> dict[str, float]:
    return {
        "auroc": auroc(samples),
        "aupr": aupr(samples),
        "f1": f1_at(samples),
        "separation": separation(samples),
    }


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def to_probability(u, scale: Literal["half", "minmax"] = "half") -> np.ndarray:
    """OOD probability from uncertainty: ``u / 2`` for [0, 2] signals, else min-max."""
    u = np.asarray(u, dtype=np.float64)
    if scale == "half":
        return np.clip(u / 2.0, 0.0, 1.0)
    return min_max(u)


def _probabilities(samples: ScoredSamples) -> np.ndarray:
    if len(samples) == 0:
        raise UndefinedMetricError("Calibration metrics need at least one sample")
    p = samples.uncertainty
    if p.min() < 0.0 or p.max() > 1.0:
        raise InvalidInputError("Calibration metrics expect probabilities in [0, 1]")
    return p


def ece(samples: ScoredSamples, bins: int = defaults.ECE_BINS) -> float:
    """Expected calibration error over equal-width probability bins.

    ``samples.uncertainty`` must already hold OOD probabilities (see
    `to_probability`). A probability of exactly 1 falls in the last bin.
    """
    p = _probabilities(samples)
    if bins < 1:
        raise InvalidInputError(f"bins must be >= 1, got {bins}")
    labels = samples.is_ood.astype(np.float64)
    index = np.minimum(np.floor(p * bins).astype(np.int64), bins - 1)
    counts = np.bincount(index, minlength=bins)
    conf = np.bincount(index, weights=p, minlength=bins)
    acc = np.bincount(index, weights=labels, minlength=bins)
    occupied = counts > 0
    gaps = np.abs(acc[occupied] - conf[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] / p.size * gaps))


def brier(samples: ScoredSamples) -> float:
    p = _probabilities(samples)
    return float(brier_score_loss(samples.is_ood.astype(int), p, pos_label=1))


# ---------------------------------------------------------------------------
# Selective prediction
# ---------------------------------------------------------------------------

def _abstain_count(n: int, answer_rate: float) -> int:
    # Guard against (1 - 0.85) * 100 == 15.000000000000002
    return min(n, math.ceil((1.0 - answer_rate) * n - 1e-9))


def selective_prediction(samples: ScoredSamples, answer_rate: float) -> float:
    """Accuracy after abstaining on the most uncertain ``ceil((1 - rate) * n)`` samples.

    Ties in uncertainty are broken by input order (earlier samples abstain first).
    """
    if samples.correct is None:
        raise InvalidInputError("Selective prediction needs correctness flags")
    if answer_rate <= 0.0:
        raise UndefinedMetricError("Answer rate must be positive")
    if answer_rate > 1.0:
        raise InvalidInputError(f"Answer rate {answer_rate} exceeds 1")
    n = len(samples)
    n_abstain = _abstain_count(n, answer_rate)
    if n - n_abstain <= 0:
        raise UndefinedMetricError("No samples left to answer")
    order = np.argsort(-samples.uncertainty, kind="stable")
    answered = np.ones(n, dtype=bool)
    answered[order[:n_abstain]] = False
    return float(samples.correct[answered].mean())


def risk_coverage_curve(
    samples: ScoredSamples, answer_rates: Sequence[float] = defaults.ANSWER_RATES
) -> list[dict[str, float]]:
    """Accuracy, risk and error reduction relative to answering everything, per rate."""
    base_error = 1.0 - selective_prediction(samples, 1.0)
    rows = []
    for rate in answer_rates:
        accuracy = selective_prediction(samples, rate)
        error = 1.0 - accuracy
        rows.append(
            {
                "answer_rate": float(rate),
                "accuracy": accuracy,
                "risk": error,
                "error_reduction": 1.0 - error / base_error if base_error > 0 else 0.0,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Significance
# ---------------------------------------------------------------------------

def paired_bootstrap(
    unc_a,
    unc_b,
    labels,
    iterations: int = defaults.BOOTSTRAP_ITERATIONS,
    seed: int = 0,
) -> float:
    """Fraction of paired resamples in which AUROC(a) does not exceed AUROC(b).

    Exact ties count one half, so identical signals give 0.5. Each iteration
    draws ``n`` indices with replacement from ``default_rng(seed)``;
    resamples containing a single class are skipped.
    """
    a = np.asarray(unc_a, dtype=np.float64).ravel()
    b = np.asarray(unc_b, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if not (a.size == b.size == y.size):
        raise InvalidInputError(
            f"Misaligned inputs: {a.size}, {b.size} and {y.size} samples"
        )
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    _require_both_classes(y, "Paired bootstrap")

    rng = np.random.default_rng(seed)
    n = y.size
    not_better = 0.0
    valid = 0
    for _ in range(iterations):
        idx = rng.integers(0, n, size=n)
        y_s = y[idx]
        n_ood = int(y_s.sum())
        if n_ood == 0 or n_ood == n:
            continue
        valid += 1
        auc_a = auroc_from_arrays(a[idx], y_s)
        auc_b = auroc_from_arrays(b[idx], y_s)
        if auc_a < auc_b:
            not_better += 1.0
        elif auc_a == auc_b:
            not_better += 0.5
    if valid == 0:
        raise UndefinedMetricError("Every bootstrap resample contained a single class")
    if valid < iterations:
        logger.debug("Skipped %d single-class bootstrap resamples", iterations - valid)
    return not_better / valid


# ---------------------------------------------------------------------------
# Error analysis
# ---------------------------------------------------------------------------

def balancing_threshold(uncertainty, is_ood) -> float:
    """Threshold that flags as many samples as there are OOD samples.

    FP equals FN whenever the cut does not split a tie.
    """
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    labels = np.asarray(is_ood, dtype=bool).ravel()
    n_ood = int(labels.sum())
    if n_ood == 0:
        return math.inf
    return float(np.sort(u)[::-1][n_ood - 1])


@dataclass
class ErrorReport:
    threshold: float
    true_positives: int
    false_positives: int
    true_negatives: int
    false_negatives: int
    groups: dict[str, dict[str, Optional[float]]]
    """Per outcome group: count, mean tail degree, mean relation frequency."""

    @property
    def fp_rate(self) -> Optional[float]:
        n_id = self.false_positives + self.true_negatives
        return self.false_positives / n_id if n_id else None

    @property
    def fn_rate(self) -> Optional[float]:
        n_ood = self.false_negatives + self.true_positives
        return self.false_negatives / n_ood if n_ood else None

    @property
    def accuracy(self) -> Optional[float]:
        total = self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
        return (self.true_positives + self.true_negatives) / total if total else None

    @property
    def precision(self) -> Optional[float]:
        flagged = self.true_positives + self.false_positives
        return self.true_positives / flagged if flagged else None

    @property
    def recall(self) -> Optional[float]:
        n_ood = self.true_positives + self.false_negatives
        return self.true_positives / n_ood if n_ood else None

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "true_negatives": self.true_negatives,
            "false_negatives": self.false_negatives,
            "fp_rate": self.fp_rate,
            "fn_rate": self.fn_rate,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "groups": self.groups,
        }


def error_analysis(
    samples: ScoredSamples,
    triples,
    kg: KnowledgeGraph,
    threshold: float,
) -> ErrorReport:
    """FP / FN counts with mean tail degree and relation frequency per outcome.

    ``u >= threshold`` is an OOD decision. Tail degree is the tail's training
    frequency; relation frequency is the relation's training triple count.
    """
    arr = as_triple_array(triples)
    if len(arr) != len(samples):
        raise InvalidInputError(f"{len(arr)} triples but {len(samples)} samples")
    flagged = samples.uncertainty >= threshold
    labels = samples.is_ood
    tail_degree = kg.freq[arr[:, 2]].astype(np.float64) if len(arr) else np.zeros(0)
    rel_freq = relation_frequencies(kg)[arr[:, 1]].astype(np.float64) if len(arr) else np.zeros(0)

    masks = {
        "false_positive": flagged & ~labels,
        "false_negative": ~flagged & labels,
        "true_id": ~flagged & ~labels,
        "true_ood": flagged & labels,
    }
    groups: dict[str, dict[str, Optional[float]]] = {}
    for name, mask in masks.items():
        count = int(mask.sum())
        groups[name] = {
            "count": count,
            "mean_tail_degree": float(tail_degree[mask].mean()) if count else None,
            "mean_relation_frequency": float(rel_freq[mask].mean()) if count else None,
        }
    return ErrorReport(
        threshold=float(threshold),
        true_positives=groups["true_ood"]["count"],
        false_positives=groups["false_positive"]["count"],
        true_negatives=groups["true_id"]["count"],
        false_negatives=groups["false_negative"]["count"],
        groups=groups,
    )
