"""Gaussian entity embeddings with pluggable triple scorers.

Every entity ``e`` owns a mean vector ``mu_e`` and a log-variance vector
``ell_e``; an embedding draw is ``mu_e + exp(ell_e / 2) * z`` with standard
normal ``z``. Relations are point estimates. ComplEx stores ``d`` complex
components as ``2d`` reals (real half first, imaginary half second) for both
entities and relations; DistMult and TransE use ``d`` reals.

Training minimizes, per mini-batch::

    sum BCE(score(positive), 1) + (1/k) * sum BCE(score(corruption), 0)
      + beta * sum_{e in batch} (n_batch(e) / freq(e)) * KL(N(mu_e, diag exp(ell_e)) || N(0, I))

with one reparameterized draw per triple slot per step and ``k`` uniform
corruptions per positive, alternating tail (even j) and head (odd j).
Weighting each entity's KL by its share of its training occurrences applies
the prior once per epoch, whatever the entity's frequency.

Usage::

    from cagp.services.embed import train, mean_variance

    model = train(kg, TrainConfig(dim=32, epochs=20))
    print(mean_variance(model, 0))
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cagp.config import defaults, settings
from cagp.errors import InvalidInputError, TrainingDivergedError
from cagp.schemas.run_config import ScorerKind, TrainConfig
from cagp.services.graph import KnowledgeGraph, Triple, as_triple_array

logger = logging.getLogger(__name__)

ELL_MIN, ELL_MAX = defaults.LOG_VARIANCE_CLAMP

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def configure_torch() -> None:
    """Pin thread count and deterministic kernels so reruns are bitwise identical."""
    torch.set_num_threads(settings.TORCH_NUM_THREADS)
    torch.use_deterministic_algorithms(True)


def entity_width(scorer: ScorerKind, dim: int) -> int:
    return 2 * dim if ScorerKind(scorer) == ScorerKind.COMPLEX else dim


def relation_width(scorer: ScorerKind, dim: int) -> int:
    return 2 * dim if ScorerKind(scorer) == ScorerKind.COMPLEX else dim


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

def score_vectors(
    scorer: ScorerKind, e_h: torch.Tensor, w_r: torch.Tensor, e_t: torch.Tensor
) -> torch.Tensor:
    """Score embedding vectors along the last axis (leading axes broadcast).

    - DistMult: ``sum_j e_h[j] * w_r[j] * e_t[j]``
    - TransE:   ``-||e_h + w_r - e_t||_2``
    - ComplEx:  ``Re <e_h, w_r, conj(e_t)>``
    """
    width = e_h.shape[-1]
    if w_r.shape[-1] != width or e_t.shape[-1] != width:
        raise InvalidInputError(
            f"Dimension mismatch: head {e_h.shape[-1]}, relation {w_r.shape[-1]}, "
            f"tail {e_t.shape[-1]}"
        )
    scorer = ScorerKind(scorer)
    if scorer == ScorerKind.DISTMULT:
        return (e_h * w_r * e_t).sum(dim=-1)
    if scorer == ScorerKind.TRANSE:
        return -torch.linalg.vector_norm(e_h + w_r - e_t, ord=2, dim=-1)
    if width % 2:
        raise InvalidInputError(f"ComplEx vectors need an even real width, got {width}")
    h_re, h_im = e_h.chunk(2, dim=-1)
    r_re, r_im = w_r.chunk(2, dim=-1)
    t_re, t_im = e_t.chunk(2, dim=-1)
    return (
        h_re * r_re * t_re
        + h_re * r_im * t_im
        + h_im * r_re * t_im
        - h_im * r_im * t_re
    ).sum(dim=-1)


def kl_divergence(mu: torch.Tensor, ell: torch.Tensor) -> torch.Tensor:
    """``0.5 * sum_j (exp(ell_j) + mu_j^2 - 1 - ell_j)`` along the last axis."""
    ell = ell.clamp(ELL_MIN, ELL_MAX)
    return 0.5 * (ell.exp() + mu.pow(2) - 1.0 - ell).sum(dim=-1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class GaussianEmbeddingModel(nn.Module):
    """Per-entity Gaussian embeddings plus point-estimate relation parameters."""

    def __init__(
        self,
        entity_count: int,
        relation_count: int,
        dim: int,
        scorer: ScorerKind = ScorerKind.DISTMULT,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.scorer = ScorerKind(scorer)
        self.dim = dim
        ew = entity_width(self.scorer, dim)
        rw = relation_width(self.scorer, dim)
        self.mu = nn.Parameter(torch.empty(entity_count, ew, dtype=dtype))
        self.ell = nn.Parameter(torch.empty(entity_count, ew, dtype=dtype))
        self.relation_params = nn.Parameter(torch.empty(relation_count, rw, dtype=dtype))
        self.reset_parameters(generator)

    @property
    def entity_count(self) -> int:
        return self.mu.shape[0]

    @property
    def relation_count(self) -> int:
        return self.relation_params.shape[0]

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Means and relations ~ U(-0.5/sqrt(d), 0.5/sqrt(d)); log-variances = ln(0.1)."""
        bound = 0.5 / math.sqrt(self.dim)
        for param in (self.mu, self.relation_params):
            noise = torch.rand(param.shape, generator=generator, dtype=param.dtype)
            param.copy_(noise * 2.0 * bound - bound)
        self.ell.fill_(defaults.INIT_LOG_VARIANCE)

    def clamped_ell(self) -> torch.Tensor:
        return self.ell.clamp(ELL_MIN, ELL_MAX)

    def sample(self, entity_ids: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Reparameterized draw ``mu + exp(ell / 2) * noise`` for the given ids."""
        ell = self.ell[entity_ids].clamp(ELL_MIN, ELL_MAX)
        return self.mu[entity_ids] + torch.exp(0.5 * ell) * noise

    def score(self, triples: torch.Tensor, e_h: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        return score_vectors(self.scorer, e_h, self.relation_params[triples[..., 1]], e_t)

    def score_means(self, triples: torch.Tensor) -> torch.Tensor:
        return self.score(triples, self.mu[triples[..., 0]], self.mu[triples[..., 2]])

    @torch.no_grad()
    def mean_variances(self) -> np.ndarray:
        """``(1/w) * sum_j exp(ell_ej)`` for every entity, as float64."""
        ell = self.clamped_ell().double()
        return ell.exp().mean(dim=-1).cpu().numpy()


# ---------------------------------------------------------------------------
# Per-entity operations
# ---------------------------------------------------------------------------

def _as_tensor(vector, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(vector, dtype=np.float64), dtype=dtype)


def score(
    model: GaussianEmbeddingModel,
    q: Triple,
    embedding_draw: tuple,
) -> float:
    """Score triple ``q`` with explicit head / tail embedding vectors."""
    dtype = model.mu.dtype
    e_h = _as_tensor(embedding_draw[0], dtype)
    e_t = _as_tensor(embedding_draw[1], dtype)
    with torch.no_grad():
        w_r = model.relation_params[int(q[1])]
        return float(score_vectors(model.scorer, e_h, w_r, e_t))


def sample_entity(model: GaussianEmbeddingModel, entity: int, noise) -> np.ndarray:
    """``mu_e + exp(ell_e / 2) * noise`` for a single entity."""
    width = model.mu.shape[1]
    noise_t = _as_tensor(noise, model.mu.dtype)
    if noise_t.shape != (width,):
        raise InvalidInputError(f"Noise must have length {width}, got {tuple(noise_t.shape)}")
    with torch.no_grad():
        ids = torch.tensor([int(entity)])
        return model.sample(ids, noise_t.unsqueeze(0))[0].double().numpy()


def mean_variance(model: GaussianEmbeddingModel, entity: int) -> float:
    with torch.no_grad():
        ell = model.ell[int(entity)].clamp(ELL_MIN, ELL_MAX).double()
        return float(ell.exp().mean())


def kl_term(model: GaussianEmbeddingModel, entity: int) -> float:
    with torch.no_grad():
        e = int(entity)
        return float(kl_divergence(model.mu[e].double(), model.ell[e].double()))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class BatchNoise:
    """Standard-normal draws for one mini-batch."""

    head: torch.Tensor      # (B, w)
    tail: torch.Tensor      # (B, w)
    corrupt: torch.Tensor   # (B, k, w)

    @classmethod
    def draw(
        cls, batch: int, negatives: int, width: int,
        generator: torch.Generator, dtype: torch.dtype,
    ) -> "BatchNoise":
        return cls(
            head=torch.randn(batch, width, generator=generator, dtype=dtype),
            tail=torch.randn(batch, width, generator=generator, dtype=dtype),
            corrupt=torch.randn(batch, negatives, width, generator=generator, dtype=dtype),
        )


def batch_loss(
    mu: torch.Tensor,
    ell: torch.Tensor,
    relation_params: torch.Tensor,
    scorer: ScorerKind,
    positives: torch.Tensor,
    corrupt_entities: torch.Tensor,
    noise: BatchNoise,
    kl_weight: float,
    kl_scope: Literal["batch", "global"] = "batch",
    batch_share: float = 1.0,
    entity_frequency: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Total mini-batch loss as a pure function of the parameter tensors.

    Either KL scope applies each training entity's prior term once per epoch.
    ``"batch"`` weights the KL of every entity in the batch by its occurrences
    in the batch over its training frequency ``entity_frequency``;
    ``"global"`` adds the full-graph KL scaled by ``batch_share`` (batch size
    / train size).
    """
    ell_c = ell.clamp(ELL_MIN, ELL_MAX)
    std = torch.exp(0.5 * ell_c)
    heads, rels, tails = positives[:, 0], positives[:, 1], positives[:, 2]
    w_r = relation_params[rels]

    e_h = mu[heads] + std[heads] * noise.head
    e_t = mu[tails] + std[tails] * noise.tail
    pos_scores = score_vectors(scorer, e_h, w_r, e_t)

    k = corrupt_entities.shape[1]
    e_c = mu[corrupt_entities] + std[corrupt_entities] * noise.corrupt
    tail_slot = (torch.arange(k) % 2 == 0).view(1, k, 1)
    neg_heads = torch.where(tail_slot, e_h.unsqueeze(1), e_c)
    neg_tails = torch.where(tail_slot, e_c, e_t.unsqueeze(1))
    neg_scores = score_vectors(scorer, neg_heads, w_r.unsqueeze(1), neg_tails)

    data_loss = F.binary_cross_entropy_with_logits(
        pos_scores, torch.ones_like(pos_scores), reduction="sum"
    ) + F.binary_cross_entropy_with_logits(
        neg_scores, torch.zeros_like(neg_scores), reduction="sum"
    ) / k

    if kl_weight == 0.0:
        return data_loss
    if kl_scope == "global":
        kl = kl_divergence(mu, ell).sum() * batch_share
    else:
        if entity_frequency is None:
            raise InvalidInputError("Batch-scoped KL needs the training frequency of every entity")
        batch_entities, slots = torch.unique(torch.cat([heads, tails]), return_inverse=True)
        occurrences = torch.bincount(slots, minlength=batch_entities.numel()).to(mu.dtype)
        share = occurrences / entity_frequency[batch_entities].to(mu.dtype).clamp(min=1.0)
        kl = (kl_divergence(mu[batch_entities], ell[batch_entities]) * share).sum()
    return data_loss + kl_weight * kl


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    """Mean per-triple loss over the epoch."""


def initialize(kg: KnowledgeGraph, config: TrainConfig) -> tuple[GaussianEmbeddingModel, torch.Generator]:
    """Seeded initial model; the returned generator continues the same stream."""
    configure_torch()
    generator = torch.Generator().manual_seed(config.seed)
    model = GaussianEmbeddingModel(
        kg.entity_count,
        kg.relation_count,
        config.dim,
        scorer=config.scorer,
        dtype=_DTYPES[config.dtype],
        generator=generator,
    )
    return model, generator


def train_with_history(
    kg: KnowledgeGraph, config: TrainConfig
) -> tuple[GaussianEmbeddingModel, list[EpochLog]]:
    """Train a Gaussian embedding model; deterministic given ``config.seed``.

    Raises:
        InvalidInputError: the training split is empty.
        TrainingDivergedError: the loss became non-finite (names the step).
    """
    train_triples = torch.as_tensor(np.asarray(kg.train), dtype=torch.long)
    n = train_triples.shape[0]
    if n == 0:
        raise InvalidInputError("Training split is empty")

    model, generator = initialize(kg, config)
    history: list[EpochLog] = []
    if config.epochs == 0:
        return model, history

    dtype = _DTYPES[config.dtype]
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)

    width = model.mu.shape[1]
    frequency = torch.as_tensor(np.asarray(kg.freq), dtype=dtype)
    step = 0
    logger.info(
        "Training %s d=%d on %d triples for %d epochs (batch %d, k=%d, beta=%g)",
        model.scorer.value, config.dim, n, config.epochs,
        config.batch_size, config.negatives, config.kl_weight,
    )
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=generator)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = train_triples[order[start:start + config.batch_size]]
            b = batch.shape[0]
            corrupt = torch.randint(
                0, kg.entity_count, (b, config.negatives), generator=generator
            )
            noise = BatchNoise.draw(b, config.negatives, width, generator, dtype)
            loss = batch_loss(
                model.mu, model.ell, model.relation_params, model.scorer,
                batch, corrupt, noise,
                kl_weight=config.kl_weight,
                kl_scope=config.kl_scope,
                batch_share=b / n,
                entity_frequency=frequency,
            )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Training diverged at step {step} (epoch {epoch}): loss={loss.item()}",
                    step=step,
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            step += 1
            logger.debug("step %d loss %.6f", step, loss.item())
        history.append(EpochLog(epoch=epoch, loss=epoch_loss / n))
        logger.info("epoch %d/%d loss %.6f", epoch, config.epochs, epoch_loss / n)

    model.eval()
    return model, history


def train(kg: KnowledgeGraph, config: TrainConfig) -> GaussianEmbeddingModel:
    model, _ = train_with_history(kg, config)
    return model


# ---------------------------------------------------------------------------
# Link prediction
# ---------------------------------------------------------------------------

def _known_tails(kg: KnowledgeGraph) -> dict[tuple[int, int], np.ndarray]:
    everything = np.concatenate([t for t in kg.splits.values() if len(t)], axis=0)
    order = np.lexsort((everything[:, 2], everything[:, 1], everything[:, 0]))
    everything = everything[order]
    known: dict[tuple[int, int], np.ndarray] = {}
    keys = everything[:, 0] * kg.relation_count + everything[:, 1]
    boundaries = np.flatnonzero(np.diff(keys)) + 1
    for group in np.split(everything, boundaries):
        known[(int(group[0, 0]), int(group[0, 1]))] = np.unique(group[:, 2])
    return known


@torch.no_grad()
def tail_scores(model: GaussianEmbeddingModel, heads: torch.Tensor, relations: torch.Tensor) -> torch.Tensor:
    """Mean-embedding scores of every entity as tail, shape ``(len(heads), |E|)``."""
    e_h = model.mu[heads]
    w_r = model.relation_params[relations]
    candidates = model.mu
    if model.scorer == ScorerKind.DISTMULT:
        return (e_h * w_r) @ candidates.T
    if model.scorer == ScorerKind.TRANSE:
        return -torch.cdist(e_h + w_r, candidates, p=2.0)
    h_re, h_im = e_h.chunk(2, dim=-1)
    r_re, r_im = w_r.chunk(2, dim=-1)
    query = torch.cat([h_re * r_re - h_im * r_im, h_re * r_im + h_im * r_re], dim=-1)
    return query @ candidates.T


@torch.no_grad()
def tail_hits_at_k(
    model: GaussianEmbeddingModel,
    kg: KnowledgeGraph,
    triples,
    k: int = defaults.HITS_AT_K,
    chunk_size: int = 1024,
) -> np.ndarray:
    """Filtered tail-prediction correctness: true tail ranked within the top ``k``.

    Other tails known for the same ``(head, relation)`` in any split are
    removed from the ranking; ties with the true tail count against it.
    """
    arr = as_triple_array(triples)
    known = _known_tails(kg)
    hits = np.zeros(len(arr), dtype=bool)
    for start in range(0, len(arr), chunk_size):
        chunk = arr[start:start + chunk_size]
        t_chunk = torch.as_tensor(chunk, dtype=torch.long)
        scores = tail_scores(model, t_chunk[:, 0], t_chunk[:, 1]).double()
        rows = torch.arange(len(chunk))
        true_scores = scores[rows, t_chunk[:, 2]].clone()
        for i, (h, r, t) in enumerate(chunk):
            others = known.get((int(h), int(r)))
            if others is not None:
                scores[i, torch.as_tensor(others, dtype=torch.long)] = -torch.inf
            scores[i, int(t)] = true_scores[i]
        better = (scores > true_scores.unsqueeze(1)).sum(dim=1)
        ties = (scores == true_scores.unsqueeze(1)).sum(dim=1) - 1
        rank = 1 + better + ties
        hits[start:start + len(chunk)] = (rank <= k).numpy()
    return hits
