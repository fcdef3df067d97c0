"""Tests for Gaussian embeddings: scorers, sampling, KL, loss gradients and training."""

import math

import numpy as np
import pytest
import torch

from cagp.errors import InvalidInputError, TrainingDivergedError
from cagp.schemas.run_config import ScorerKind, TrainConfig
from cagp.services.embed import (
    BatchNoise,
    GaussianEmbeddingModel,
    batch_loss,
    initialize,
    kl_divergence,
    kl_term,
    mean_variance,
    sample_entity,
    score,
    score_vectors,
    tail_hits_at_k,
    train,
    train_with_history,
)
from cagp.services.graph import Triple, build_graph
from cagp.services.oodgen import random_corruptions


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


# ---------------------------------------------------------------------------
# 1. Scorers
# ---------------------------------------------------------------------------

class TestScorers:
    def test_distmult(self):
        assert score_vectors(ScorerKind.DISTMULT, _t([1, 2]), _t([3, 4]), _t([5, 6])).item() == 63.0

    def test_transe(self):
        value = score_vectors(ScorerKind.TRANSE, _t([1, 0]), _t([0, 1]), _t([0, 0])).item()
        assert value == pytest.approx(-math.sqrt(2))

    def test_transe_perfect_translation_scores_zero(self):
        assert score_vectors(ScorerKind.TRANSE, _t([1, 2]), _t([1, 1]), _t([2, 3])).item() == 0.0

    def test_complex(self):
        # Re(1 * i * conj(i)) = 1, stored as [real, imag]
        assert score_vectors(ScorerKind.COMPLEX, _t([1, 0]), _t([0, 1]), _t([0, 1])).item() == 1.0

    def test_complex_with_real_parts_matches_distmult(self):
        h, r, t = _t([1, 2, 0, 0]), _t([3, 4, 0, 0]), _t([5, 6, 0, 0])
        assert score_vectors(ScorerKind.COMPLEX, h, r, t).item() == 63.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError, match="Dimension mismatch"):
            score_vectors(ScorerKind.DISTMULT, _t([1, 2]), _t([1, 2, 3]), _t([1, 2]))

    def test_complex_needs_even_width(self):
        with pytest.raises(InvalidInputError, match="even real width"):
            score_vectors(ScorerKind.COMPLEX, _t([1, 2, 3]), _t([1, 2, 3]), _t([1, 2, 3]))

    @pytest.mark.parametrize("scorer,width", [
        (ScorerKind.DISTMULT, 4),
        (ScorerKind.TRANSE, 4),
        (ScorerKind.COMPLEX, 8),
    ])
    def test_model_widths(self, scorer, width):
        model = GaussianEmbeddingModel(5, 2, 4, scorer=scorer)
        assert model.mu.shape == (5, width)
        assert model.relation_params.shape == (2, width)


# ---------------------------------------------------------------------------
# 2. Per-entity operations
# ---------------------------------------------------------------------------

class TestEntityOperations:
    @pytest.fixture
    def model(self):
        model = GaussianEmbeddingModel(3, 2, 4, dtype=torch.float64,
                                       generator=torch.Generator().manual_seed(0))
        return model

    def test_initial_variance_is_one_tenth(self, model):
        assert mean_variance(model, 0) == pytest.approx(0.1)
        np.testing.assert_allclose(model.mean_variances(), [0.1, 0.1, 0.1])

    def test_initial_means_in_bound(self, model):
        assert model.mu.abs().max().item() <= 0.25

    def test_zero_noise_draw_is_the_mean(self, model):
        np.testing.assert_allclose(sample_entity(model, 1, np.zeros(4)), model.mu[1].detach().numpy())

    def test_draw_scales_with_std(self, model):
        draw = sample_entity(model, 1, np.ones(4))
        expected = model.mu[1].detach().numpy() + math.sqrt(0.1)
        np.testing.assert_allclose(draw, expected)

    def test_noise_length_checked(self, model):
        with pytest.raises(InvalidInputError, match="Noise must have length 4"):
            sample_entity(model, 0, np.zeros(3))

    def test_kl_of_standard_normal_is_zero(self, model):
        with torch.no_grad():
            model.mu[0].zero_()
            model.ell[0].zero_()
        assert kl_term(model, 0) == pytest.approx(0.0)

    def test_kl_closed_form(self):
        mu, ell = _t([1.0, 0.0]), _t([0.0, math.log(2.0)])
        # 0.5 * [(1 + 1 - 1 - 0) + (2 + 0 - 1 - ln 2)]
        expected = 0.5 * (1.0 + 1.0 - math.log(2.0))
        assert kl_divergence(mu, ell).item() == pytest.approx(expected)

    def test_score_with_explicit_draw(self, model):
        with torch.no_grad():
            model.relation_params[1] = _t([1, 1, 1, 1])
        value = score(model, Triple(0, 1, 2), ([1, 2, 0, 0], [3, 1, 5, 5]))
        assert value == 5.0


# ---------------------------------------------------------------------------
# 3. Loss gradients
# ---------------------------------------------------------------------------

class TestBatchLoss:
    @pytest.fixture
    def inputs(self):
        gen = torch.Generator().manual_seed(3)
        mu = torch.randn(5, 4, generator=gen, dtype=torch.float64)
        ell = torch.randn(5, 4, generator=gen, dtype=torch.float64) * 0.1 - 1.0
        rel = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        positives = torch.tensor([[0, 0, 1], [2, 1, 3], [4, 0, 0]])
        corrupt = torch.tensor([[1, 2], [3, 4], [0, 2]])
        noise = BatchNoise.draw(3, 2, 4, gen, torch.float64)
        frequency = _t([4, 2, 1, 3, 1])
        return mu, ell, rel, positives, corrupt, noise, frequency

    @pytest.mark.parametrize("kl_scope", ["batch", "global"])
    def test_gradients_match_central_differences(self, inputs, kl_scope):
        mu, ell, rel, positives, corrupt, noise, frequency = inputs
        params = [p.clone().requires_grad_() for p in (mu, ell, rel)]

        def loss(mu_, ell_, rel_):
            return batch_loss(mu_, ell_, rel_, ScorerKind.DISTMULT, positives, corrupt, noise,
                              kl_weight=0.5, kl_scope=kl_scope, batch_share=0.25,
                              entity_frequency=frequency)

        analytic = torch.autograd.grad(loss(*params), params)
        eps = 1e-5
        for i, param in enumerate(params):
            numeric = torch.zeros_like(param)
            with torch.no_grad():
                for idx in np.ndindex(*param.shape):
                    shifted = [p.detach().clone() for p in params]
                    shifted[i][idx] += eps
                    upper = loss(*shifted).item()
                    shifted[i][idx] -= 2 * eps
                    lower = loss(*shifted).item()
                    numeric[idx] = (upper - lower) / (2 * eps)
            error = (analytic[i] - numeric).norm() / max(numeric.norm(), analytic[i].norm(), 1e-12)
            assert error.item() < 1e-4

    def test_zero_kl_weight_drops_the_prior(self):
        gen = torch.Generator().manual_seed(0)
        mu = torch.randn(3, 2, generator=gen, dtype=torch.float64)
        ell = torch.zeros(3, 2, dtype=torch.float64)
        rel = torch.randn(1, 2, generator=gen, dtype=torch.float64)
        positives = torch.tensor([[0, 0, 1]])
        corrupt = torch.tensor([[2, 2]])
        noise = BatchNoise.draw(1, 2, 2, gen, torch.float64)
        frequency = torch.ones(3, dtype=torch.float64)
        with_prior = batch_loss(mu, ell, rel, ScorerKind.DISTMULT, positives, corrupt, noise, 1.0,
                                entity_frequency=frequency)
        without = batch_loss(mu, ell, rel, ScorerKind.DISTMULT, positives, corrupt, noise, 0.0,
                             entity_frequency=frequency)
        expected_kl = kl_divergence(mu[[0, 1]], ell[[0, 1]]).sum()
        assert (with_prior - without).item() == pytest.approx(expected_kl.item())

    def test_batch_kl_is_weighted_by_share_of_training_frequency(self, inputs):
        mu, ell, rel, positives, corrupt, noise, frequency = inputs

        def prior(kl_weight):
            return batch_loss(mu, ell, rel, ScorerKind.DISTMULT, positives, corrupt, noise,
                              kl_weight, entity_frequency=frequency)

        # Entity 0 occurs twice in the batch, every other endpoint once
        share = _t([2 / 4, 1 / 2, 1 / 1, 1 / 3, 1 / 1])
        expected = (kl_divergence(mu, ell) * share).sum()
        assert (prior(1.0) - prior(0.0)).item() == pytest.approx(expected.item())

    def test_one_epoch_of_batches_applies_each_prior_once(self):
        gen = torch.Generator().manual_seed(1)
        mu = torch.randn(3, 2, generator=gen, dtype=torch.float64)
        ell = torch.randn(3, 2, generator=gen, dtype=torch.float64)
        rel = torch.randn(2, 2, generator=gen, dtype=torch.float64)
        epoch = torch.tensor([[0, 0, 1], [0, 1, 2], [1, 0, 2]])
        frequency = _t([2, 2, 2])
        prior = 0.0
        for row in epoch:
            batch = row.unsqueeze(0)
            corrupt = torch.tensor([[0, 1]])
            noise = BatchNoise.draw(1, 2, 2, gen, torch.float64)
            args = (mu, ell, rel, ScorerKind.DISTMULT, batch, corrupt, noise)
            prior += (batch_loss(*args, 1.0, entity_frequency=frequency)
                      - batch_loss(*args, 0.0, entity_frequency=frequency)).item()
        assert prior == pytest.approx(kl_divergence(mu, ell).sum().item())

    def test_batch_scope_needs_frequencies(self, inputs):
        mu, ell, rel, positives, corrupt, noise, _ = inputs
        with pytest.raises(InvalidInputError, match="training frequency"):
            batch_loss(mu, ell, rel, ScorerKind.DISTMULT, positives, corrupt, noise, 0.01)



# ---------------------------------------------------------------------------
# 4. Training
# ---------------------------------------------------------------------------

TINY_TRAIN = TrainConfig(dim=8, batch_size=4, learning_rate=0.05, epochs=5, negatives=4)


class TestTraining:
    def test_zero_epochs_returns_initialization(self, tiny_kg):
        config = TINY_TRAIN.model_copy(update={"epochs": 0})
        model, history = train_with_history(tiny_kg, config)
        initial, _ = initialize(tiny_kg, config)
        assert history == []
        assert torch.equal(model.mu, initial.mu)
        assert torch.equal(model.relation_params, initial.relation_params)

    def test_same_seed_is_bitwise_identical(self, tiny_kg):
        first = train(tiny_kg, TINY_TRAIN)
        second = train(tiny_kg, TINY_TRAIN)
        assert torch.equal(first.mu, second.mu)
        assert torch.equal(first.ell, second.ell)

    def test_different_seed_differs(self, tiny_kg):
        first = train(tiny_kg, TINY_TRAIN)
        second = train(tiny_kg, TINY_TRAIN.model_copy(update={"seed": 1}))
        assert not torch.equal(first.mu, second.mu)

    def test_history_has_one_entry_per_epoch(self, tiny_kg):
        _, history = train_with_history(tiny_kg, TINY_TRAIN)
        assert [h.epoch for h in history] == [1, 2, 3, 4, 5]
        assert all(math.isfinite(h.loss) for h in history)

    def test_positives_outscore_random_tails(self):
        # Two ring relations over 25 entities: h -> h + 1 and h -> h + 6
        heads = np.arange(50) % 25
        relations = np.arange(50) // 25
        tails = (heads + 1 + 5 * relations) % 25
        kg = build_graph(
            [f"e{i}" for i in range(25)], ["next", "skip"],
            {"train": np.stack([heads, relations, tails], axis=1)},
        )
        config = TrainConfig(dim=16, batch_size=64, learning_rate=0.05, epochs=200,
                             negatives=4, dtype="float64")
        assert config.optimizer == "sgd"
        model, history = train_with_history(kg, config)
        assert history[-1].loss < history[0].loss

        labeled = random_corruptions(kg, "train", seed=0)
        with torch.no_grad():
            scores = model.score_means(torch.as_tensor(labeled.triples)).numpy()
        assert scores[~labeled.is_ood].mean() > scores[labeled.is_ood].mean()

    @pytest.mark.parametrize("scorer", list(ScorerKind))
    def test_every_scorer_trains(self, tiny_kg, scorer):
        model = train(tiny_kg, TINY_TRAIN.model_copy(update={"scorer": scorer}))
        assert model.scorer == scorer
        assert np.all(np.isfinite(model.mean_variances()))

    def test_divergence_names_the_step(self, tiny_kg):
        config = TINY_TRAIN.model_copy(
            update={"learning_rate": 1e30, "batch_size": 1, "epochs": 5}
        )
        with pytest.raises(TrainingDivergedError, match="diverged at step") as exc_info:
            train(tiny_kg, config)
        assert exc_info.value.step >= 0
        assert exc_info.value.exit_code == 3


# ---------------------------------------------------------------------------
# 5. Link prediction
# ---------------------------------------------------------------------------

class TestTailHits:
    def test_all_hits_when_k_covers_every_entity(self, tiny_kg):
        model = train(tiny_kg, TINY_TRAIN)
        hits = tail_hits_at_k(model, tiny_kg, tiny_kg.split("test"), k=tiny_kg.entity_count)
        assert hits.tolist() == [True, True, True, True]

    def test_returns_one_flag_per_triple(self, tiny_kg):
        model = train(tiny_kg, TINY_TRAIN)
        hits = tail_hits_at_k(model, tiny_kg, tiny_kg.split("valid"), k=1, chunk_size=3)
        assert hits.dtype == bool
        assert hits.shape == (4,)
