"""Pytest fixtures: the tiny four-triple graph, a synthetic theorem graph, run configs."""

import os
from pathlib import Path

import numpy as np
import pytest
import yaml

# Set test environment before importing the package
os.environ["LOG_LEVEL"] = "WARNING"

from cagp.schemas.run_config import SynthKnobs
from cagp.services.coverage import build_coverage
from cagp.services.graph import load_tsv
from cagp.services.oodgen import synth_theorem_kg
from cagp.services.uncertainty import variance_from_frequency


FIXTURES_DIR = Path(__file__).parent / "fixtures"
TINY_DIR = FIXTURES_DIR / "tiny"

# Ids by first appearance: A=0, B=1, C=2, D=3 and r1=0, r2=1, r3=2
A, B, C, D = 0, 1, 2, 3
R1, R2, R3 = 0, 1, 2


@pytest.fixture
def tiny_paths() -> dict[str, Path]:
    return {split: TINY_DIR / f"{split}.txt" for split in ("train", "valid", "test")}


@pytest.fixture
def tiny_kg(tiny_paths):
    return load_tsv(tiny_paths)


@pytest.fixture
def tiny_coverage(tiny_kg):
    return build_coverage(tiny_kg)


@pytest.fixture
def tiny_variances(tiny_kg) -> np.ndarray:
    """Variance table that decreases with training frequency (D is unseen)."""
    return variance_from_frequency(tiny_kg, lambda f: 1.0 / (1.0 + f))


@pytest.fixture(scope="session")
def synth():
    """Default-knob synthetic graph with exact ground-truth classes."""
    return synth_theorem_kg(SynthKnobs())


@pytest.fixture
def write_split(tmp_path):
    """Write TSV lines to ``tmp_path/<name>`` and return the path."""

    def _write(name: str, lines: list[str]) -> Path:
        path = tmp_path / name
        path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def tiny_config_file(tmp_path, tiny_paths) -> Path:
    """A tiny-graph run config writing under ``tmp_path/run``."""
    raw = {
        "dataset": {"name": "tiny", **{k: str(v) for k, v in tiny_paths.items()}},
        "train": {
            "dim": 8,
            "batch_size": 4,
            "learning_rate": 0.05,
            "epochs": 5,
            "negatives": 4,
        },
        "tau": 2,
        "epsilons": [0, 1, 2],
        "eval": {"bootstrap_iterations": 50, "baseline_draws": 2, "hits_at_k": 2},
        "output_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False), encoding="utf-8")
    return path
