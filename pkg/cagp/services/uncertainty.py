"""Semantic and structural uncertainty, their normalization and CAGP mixing.

Semantic uncertainty of ``(h, r, t)`` is the mean of the two endpoints'
average embedding variances and ignores ``r``. It is rescaled to ``[0, 2]``
with a normalizer fitted on training entities so that it shares the range of
structural uncertainty, then mixed::

    u_cagp = alpha * u_sem_norm + (1 - alpha) * u_str,   alpha = sigmoid(lambda)

Every function that needs variances accepts either a trained
`GaussianEmbeddingModel` or a per-entity variance table (numpy array).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
import torch
from scipy.special import expit, logit

from cagp.config import defaults
from cagp.errors import InvalidInputError
from cagp.schemas.run_config import CoverageMode
from cagp.services.coverage import CoverageMatrix, continuous_uncertainty_batch
from cagp.services.embed import GaussianEmbeddingModel
from cagp.services.graph import KnowledgeGraph, Triple, as_triple_array
from cagp.services.metrics import auroc_from_arrays

logger = logging.getLogger(__name__)

VarianceSource = Union[GaussianEmbeddingModel, np.ndarray]


def entity_variances(source: VarianceSource) -> np.ndarray:
    """Per-entity mean variance table from a model, or the table itself."""
    if isinstance(source, GaussianEmbeddingModel):
        return source.mean_variances()
    table = np.asarray(source, dtype=np.float64)
    if table.ndim != 1:
        raise InvalidInputError(f"Variance table must be 1-D, got shape {table.shape}")
    return table


def variance_from_frequency(
    kg: KnowledgeGraph, fn: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Per-entity variance table that depends on training frequency only.

    Stands in for a trained model wherever a `VarianceSource` is accepted,
    e.g. ``variance_from_frequency(kg, lambda f: 1.0 / (1.0 + f))``.
    """
    table = np.asarray(fn(kg.freq.astype(np.float64)), dtype=np.float64)
    if table.shape != (kg.entity_count,):
        raise InvalidInputError(
            f"Variance function returned shape {table.shape}, expected ({kg.entity_count},)"
        )
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise InvalidInputError("Variances must be finite and non-negative")
    return table


# ---------------------------------------------------------------------------
# Semantic uncertainty
# ---------------------------------------------------------------------------

def semantic_uncertainty(source: VarianceSource, q: Triple) -> float:
    """``(var_h + var_t) / 2``; the relation is ignored."""
    return float(semantic_uncertainty_batch(entity_variances(source), [tuple(q)])[0])


def semantic_uncertainty_batch(variances: np.ndarray, triples) -> np.ndarray:
    arr = as_triple_array(triples)
    return 0.5 * (variances[arr[:, 0]] + variances[arr[:, 2]])


@dataclass(frozen=True)
class SemanticNormalizer:
    """Affine map sending ``[lo, hi]`` onto ``[0, 2]``, clamped outside."""

    lo: float
    hi: float

    def __post_init__(self):
        if self.hi < self.lo:
            raise InvalidInputError(f"Normalizer needs hi >= lo, got lo={self.lo}, hi={self.hi}")

    @property
    def degenerate(self) -> bool:
        return self.hi == self.lo

    def normalize(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.degenerate:
            return np.ones_like(u)
        return np.clip((u - self.lo) / (self.hi - self.lo) * 2.0, 0.0, 2.0)


def fit_normalizer(source: VarianceSource, kg: KnowledgeGraph) -> SemanticNormalizer:
    """Fit on the raw semantic values of entities that appear in training."""
    variances = entity_variances(source)
    train_values = variances[kg.freq > 0]
    return SemanticNormalizer(lo=float(train_values.min()), hi=float(train_values.max()))


def normalize(normalizer: SemanticNormalizer, u) -> Union[float, np.ndarray]:
    result = normalizer.normalize(u)
    return float(result) if np.ndim(result) == 0 else result


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixingWeight:
    """Global mixing weight, stored as the logit ``lam``."""

    lam: float

    @property
    def alpha(self) -> float:
        return float(expit(self.lam))

    @classmethod
    def from_alpha(cls, alpha: float) -> "MixingWeight":
        if not 0.0 < alpha < 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
        return cls(lam=float(logit(alpha)))


def combine_cagp(weight: MixingWeight, u_sem_norm, u_str):
    """Convex combination ``alpha * u_sem_norm + (1 - alpha) * u_str``."""
    alpha = weight.alpha
    return alpha * np.asarray(u_sem_norm, dtype=np.float64) + (1.0 - alpha) * np.asarray(
        u_str, dtype=np.float64
    )


# ---------------------------------------------------------------------------
# Assessments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyAssessment:
    triple: Triple
    u_sem_raw: float
    u_sem_norm: float
    u_str: float
    u_cagp: float
    alpha_used: float


@dataclass(frozen=True)
class Assessments:
    """Column-oriented uncertainty assessments for a list of triples."""

    triples: np.ndarray
    u_sem_raw: np.ndarray
    u_sem_norm: np.ndarray
    u_str: np.ndarray
    weight: MixingWeight

    @property
    def alpha(self) -> float:
        return self.weight.alpha

    @property
    def u_cagp(self) -> np.ndarray:
        return combine_cagp(self.weight, self.u_sem_norm, self.u_str)

    def __len__(self) -> int:
        return len(self.triples)

    def __getitem__(self, i: int) -> UncertaintyAssessment:
        h, r, t = (int(x) for x in self.triples[i])
        alpha = self.alpha
        return UncertaintyAssessment(
            triple=Triple(h, r, t),
            u_sem_raw=float(self.u_sem_raw[i]),
            u_sem_norm=float(self.u_sem_norm[i]),
            u_str=float(self.u_str[i]),
            u_cagp=float(alpha * self.u_sem_norm[i] + (1.0 - alpha) * self.u_str[i]),
            alpha_used=alpha,
        )

    def subset(self, mask: np.ndarray) -> "Assessments":
        return replace(
            self,
            triples=self.triples[mask],
            u_sem_raw=self.u_sem_raw[mask],
            u_sem_norm=self.u_sem_norm[mask],
            u_str=self.u_str[mask],
        )

    def signal(self, name: str) -> np.ndarray:
        """Uncertainty column by signal name (semantic, structural, fixed_0.5, cagp)."""
        if name == "semantic":
            return self.u_sem_norm
        if name == "semantic_raw":
            return self.u_sem_raw
        if name == "structural":
            return self.u_str
        if name == "fixed_0.5":
            return combine_cagp(MixingWeight(lam=0.0), self.u_sem_norm, self.u_str)
        if name == "cagp":
            return self.u_cagp
        raise InvalidInputError(f"Unknown signal {name!r}")

    def to_frame(
        self, kg: Optional[KnowledgeGraph] = None, labels: Optional[np.ndarray] = None
    ) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "head": self.triples[:, 0],
                "relation": self.triples[:, 1],
                "tail": self.triples[:, 2],
            }
        )
        if kg is not None:
            frame["head_name"] = [kg.entities[h] for h in frame["head"]]
            frame["relation_name"] = [kg.relations[r] for r in frame["relation"]]
            frame["tail_name"] = [kg.entities[t] for t in frame["tail"]]
        frame["u_sem_raw"] = self.u_sem_raw
        frame["u_sem_norm"] = self.u_sem_norm
        frame["u_str"] = self.u_str
        frame["u_cagp"] = self.u_cagp
        if labels is not None:
            frame["label"] = np.asarray(labels)
        return frame


def assess(
    source: VarianceSource,
    normalizer: SemanticNormalizer,
    coverage: CoverageMatrix,
    weight: MixingWeight,
    triples,
    coverage_mode: CoverageMode = CoverageMode.BINARY,
) -> Assessments:
    """Compute every uncertainty column for ``triples``."""
    arr = as_triple_array(triples)
    variances = entity_variances(source)
    raw = semantic_uncertainty_batch(variances, arr)
    return Assessments(
        triples=arr,
        u_sem_raw=raw,
        u_sem_norm=normalizer.normalize(raw),
        u_str=continuous_uncertainty_batch(coverage, arr, coverage_mode),
        weight=weight,
    )


def alpha_grid() -> np.ndarray:
    """101-point grid over [0, 1] with the endpoints pulled inside (0, 1)."""
    grid = np.linspace(0.0, 1.0, defaults.ALPHA_GRID_STEPS)
    grid[0], grid[-1] = defaults.ALPHA_ENDPOINTS
    return grid


def fit_alpha(val_id: Assessments, val_ood: Assessments) -> MixingWeight:
    """Grid-search alpha maximizing validation AUROC of the CAGP combination.

    Ties in AUROC go to the alpha nearest 0.5 (then the smaller alpha).
    """
    if len(val_id) == 0 or len(val_ood) == 0:
        raise InvalidInputError("fit_alpha needs non-empty ID and OOD validation sets")
    sem = np.concatenate([val_id.u_sem_norm, val_ood.u_sem_norm])
    struct = np.concatenate([val_id.u_str, val_ood.u_str])
    labels = np.concatenate([np.zeros(len(val_id), bool), np.ones(len(val_ood), bool)])

    candidates = []
    for alpha in alpha_grid():
        value = auroc_from_arrays(alpha * sem + (1.0 - alpha) * struct, labels)
        candidates.append((value, float(alpha)))
    best_value = max(value for value, _ in candidates)
    tied = [alpha for value, alpha in candidates if best_value - value <= 1e-12]
    alpha = min(tied, key=lambda a: (abs(a - 0.5), a))
    logger.info("Fitted alpha=%.3f (validation AUROC %.4f)", alpha, best_value)
    return MixingWeight.from_alpha(alpha)


# ---------------------------------------------------------------------------
# Score-based baseline
# ---------------------------------------------------------------------------

@torch.no_grad()
def baseline_score_uncertainty_batch(
    model: GaussianEmbeddingModel,
    triples,
    draws: int = defaults.BASELINE_DRAWS,
    seed: int = 0,
    noise: Optional[torch.Tensor] = None,
    chunk_size: int = 4096,
) -> np.ndarray:
    """Negative mean score over ``draws`` embedding samples (higher = more uncertain).

    ``noise`` may be given explicitly with shape ``(draws, n, 2, w)``; otherwise
    it is drawn from a generator seeded with ``seed``.
    """
    arr = torch.as_tensor(as_triple_array(triples), dtype=torch.long)
    n = arr.shape[0]
    width = model.mu.shape[1]
    if noise is None:
        generator = torch.Generator().manual_seed(seed)
        noise = torch.randn(draws, n, 2, width, generator=generator, dtype=model.mu.dtype)
    elif noise.shape[1:] != (n, 2, width):
        raise InvalidInputError(
            f"Noise must have shape (draws, {n}, 2, {width}), got {tuple(noise.shape)}"
        )
    noise = noise.to(model.mu.dtype)
    totals = torch.zeros(n, dtype=torch.float64)
    for start in range(0, n, chunk_size):
        chunk = arr[start:start + chunk_size]
        for d in range(noise.shape[0]):
            z = noise[d, start:start + chunk_size]
            e_h = model.sample(chunk[:, 0], z[:, 0])
            e_t = model.sample(chunk[:, 2], z[:, 1])
            totals[start:start + chunk_size] += model.score(chunk, e_h, e_t).double()
    return (-totals / noise.shape[0]).numpy()


def baseline_score_uncertainty(
    model: GaussianEmbeddingModel, q: Triple, draws: int = defaults.BASELINE_DRAWS, seed: int = 0
) -> float:
    return float(baseline_score_uncertainty_batch(model, [tuple(q)], draws=draws, seed=seed)[0])
