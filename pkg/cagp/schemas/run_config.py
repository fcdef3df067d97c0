"""Pydantic schemas for experiment run configs.

A run config is a YAML document validated into `RunConfig`. Example::

    dataset:
      name: fb15k237
      train: ../data/FB15k-237/train.txt
      valid: ../data/FB15k-237/valid.txt
      test: ../data/FB15k-237/test.txt
    train:
      dim: 100
      epochs: 50
    alpha_mode: learned
    output_dir: runs/fb15k237
"""

from enum import Enum
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from cagp.config import defaults, settings
from cagp.errors import ArtifactMissingError, InvalidInputError


# ---------------------------------------------------------------------------
# Enumerations shared by schemas and services
# ---------------------------------------------------------------------------

class ScorerKind(str, Enum):
    """Triple scoring function used on top of the Gaussian entity embeddings."""

    DISTMULT = "distmult"
    TRANSE = "transe"
    COMPLEX = "complex"


class CoverageMode(str, Enum):
    """How entity–relation co-occurrence is turned into structural uncertainty."""

    BINARY = "binary"
    LOG_SCALED = "log_scaled"
    TFIDF = "tfidf"


SPLIT_NAMES = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# Sub-configs
# ---------------------------------------------------------------------------

class SynthKnobs(BaseModel):
    """Generator knobs for the synthetic theorem fixture."""

    entity_count: int = Field(default=200, ge=4, description="Total entities, emerging included")
    relation_count: int = Field(default=10, ge=3)
    skew_exponent: float = Field(default=1.2, gt=0.0, description="Power-law exponent of target degrees")
    heldout_fraction: float = Field(
        default=0.1, ge=0.0, lt=1.0,
        description="Fraction of frequent (entity, relation) pairs never shown in training",
    )
    emerging_count: int = Field(default=30, ge=0, description="Entities with training frequency 1 or 2")
    eval_pairs: int = Field(default=100, ge=1, description="Frequency-matched ID/novel pairs per eval split")
    min_frequent_degree: int = Field(default=20, ge=3)
    hub_degree: int = Field(default=200, ge=0, description="Extra target degree of the top-ranked entity")
    seed: int = Field(default=0, ge=0)

    model_config = {"extra": "forbid"}


class DatasetConfig(BaseModel):
    """Either three TSV split files or a synthetic generator block."""

    name: str = "dataset"
    train: Optional[Path] = None
    valid: Optional[Path] = None
    test: Optional[Path] = None
    synthetic: Optional[SynthKnobs] = None

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def validate_source(self) -> "DatasetConfig":
        """Exactly one data source: TSV paths (train required) or synthetic."""
        has_paths = any(p is not None for p in (self.train, self.valid, self.test))
        if has_paths and self.synthetic is not None:
            raise ValueError("dataset takes either split paths or a synthetic block, not both")
        if not has_paths and self.synthetic is None:
            raise ValueError("dataset needs split paths or a synthetic block")
        if has_paths and self.train is None:
            raise ValueError("dataset.train is required when split paths are given")
        return self

    def split_paths(self) -> dict[str, Path]:
        """Configured split files in canonical split order."""
        paths = {"train": self.train, "valid": self.valid, "test": self.test}
        return {name: path for name, path in paths.items() if path is not None}


class TrainConfig(BaseModel):
    """Hyperparameters of Gaussian embedding training."""

    dim: int = Field(default=defaults.EMBEDDING_DIM, ge=1)
    batch_size: int = Field(default=defaults.BATCH_SIZE, ge=1)
    learning_rate: float = Field(default=defaults.LEARNING_RATE, gt=0.0)
    kl_weight: float = Field(default=defaults.KL_WEIGHT, ge=0.0)
    epochs: int = Field(default=defaults.EPOCHS, ge=0)
    negatives: int = Field(default=defaults.NEGATIVES_PER_POSITIVE, ge=1)
    seed: int = Field(default=0, ge=0)
    scorer: ScorerKind = ScorerKind.DISTMULT
    optimizer: Literal["sgd", "adam"] = "sgd"
    kl_scope: Literal["batch", "global"] = "batch"
    dtype: Literal["float32", "float64"] = "float32"

    model_config = {"extra": "forbid"}


class SeedConfig(BaseModel):
    """Named seeds for every source of randomness outside training."""

    corruption: int = Field(default=0, ge=0)
    bootstrap: int = Field(default=0, ge=0)
    baseline: int = Field(default=0, ge=0)

    model_config = {"extra": "forbid"}


class EvalConfig(BaseModel):
    bootstrap_iterations: int = Field(default=defaults.BOOTSTRAP_ITERATIONS, ge=0)
    baseline_draws: int = Field(default=defaults.BASELINE_DRAWS, ge=1)
    hits_at_k: int = Field(default=defaults.HITS_AT_K, ge=1)
    answer_rates: list[float] = Field(default_factory=lambda: list(defaults.ANSWER_RATES))
    corruption_sample_size: Optional[int] = Field(default=defaults.CORRUPTION_SAMPLE_SIZE, ge=1)
    ece_bins: int = Field(default=defaults.ECE_BINS, ge=1)

    model_config = {"extra": "forbid"}

    @field_validator("answer_rates")
    @classmethod
    def validate_answer_rates(cls, v: list[float]) -> list[float]:
        for rate in v:
            if not 0.0 < rate <= 1.0:
                raise ValueError(f"answer rate {rate} outside (0, 1]")
        return v


class AblationConfig(BaseModel):
    tau_percentiles: list[float] = Field(default_factory=lambda: list(defaults.TAU_SWEEP))
    architectures: list[ScorerKind] = Field(default_factory=list)

    model_config = {"extra": "forbid"}

    @field_validator("tau_percentiles")
    @classmethod
    def validate_percentiles(cls, v: list[float]) -> list[float]:
        for p in v:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"tau percentile {p} outside [0, 1]")
        return v


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    """Complete, validated description of one reproducible experiment."""

    dataset: DatasetConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    tau_percentile: float = Field(default=defaults.TAU_PERCENTILE, ge=0.0, le=1.0)
    tau: Optional[int] = Field(
        default=None, ge=1, description="Absolute frequency threshold; overrides tau_percentile"
    )
    epsilons: list[float] = Field(default_factory=lambda: [float(e) for e in defaults.A3_EPSILONS])
    alpha_mode: Literal["fixed", "learned"] = "learned"
    coverage_mode: CoverageMode = CoverageMode.BINARY
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    output_dir: Optional[Path] = None

    model_config = {"extra": "forbid"}

    @field_validator("epsilons")
    @classmethod
    def validate_epsilons(cls, v: list[float]) -> list[float]:
        if any(e < 0 for e in v):
            raise ValueError("epsilons must be non-negative")
        return sorted(v)

    @model_validator(mode="after")
    def default_output_dir(self) -> "RunConfig":
        if self.output_dir is None:
            self.output_dir = Path(settings.OUTPUT_ROOT) / self.dataset.name
        return self

    # ------------------------------------------------------------------
    # Loading
    # ------------------------------------------------------------------

    @classmethod
    def from_yaml(cls, path: Path, overrides: Optional[list[str]] = None) -> "RunConfig":
        """Load a YAML run config, apply ``dotted.key=value`` overrides, validate.

        Relative dataset paths are resolved against the config file's directory.
        """
        path = Path(path)
        if not path.exists():
            raise ArtifactMissingError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise InvalidInputError(f"Config root must be a mapping: {path}")

        for item in overrides or []:
            apply_override(raw, item)

        dataset = raw.get("dataset")
        if isinstance(dataset, dict):
            for split in SPLIT_NAMES:
                value = dataset.get(split)
                if value is not None and not Path(value).is_absolute():
                    dataset[split] = str((path.parent / value).resolve())

        return cls.model_validate(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every named seed set to ``seed``."""
        return self.model_copy(
            update={
                "train": self.train.model_copy(update={"seed": seed}),
                "seeds": SeedConfig(corruption=seed, bootstrap=seed, baseline=seed),
            }
        )

    def check_paths(self) -> None:
        """Raise if a configured split file does not exist."""
        for split, split_path in self.dataset.split_paths().items():
            if not split_path.exists():
                raise ArtifactMissingError(f"{split} split file not found: {split_path}")


def apply_override(raw: dict[str, Any], item: str) -> None:
    """Apply one ``a.b.c=value`` override to a raw config mapping in place."""
    if "=" not in item:
        raise InvalidInputError(f"Override must look like key=value: {item!r}")
    key, value = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise InvalidInputError(f"Override has an empty key: {item!r}")
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise InvalidInputError(f"Override path {key!r} crosses a scalar at {part!r}")
        node = child
    node[parts[-1]] = yaml.safe_load(value)
