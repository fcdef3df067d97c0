"""Run-directory storage for command artifacts.

Every command reads and writes under one output directory. Writers are
deterministic (sorted JSON keys, fixed CSV line endings) so rerunning a
command with the same config reproduces its files byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from cagp.errors import ArtifactMissingError

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars / arrays and NaN to plain JSON values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, Path):
        return str(value)
    return value


class RunStore:
    """Local run directory (``<output_dir>/<name>``)."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, name: str, hint: str = "") -> Path:
        """Path of an artifact that must already exist."""
        full_path = self.path(name)
        if not full_path.exists():
            message = f"Required artifact not found: {full_path}"
            raise ArtifactMissingError(f"{message} ({hint})" if hint else message)
        return full_path

    def save_json(self, name: str, payload: Any) -> Path:
        full_path = self.path(name)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(to_jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
        full_path.write_text(text + "\n", encoding="utf-8")
        logger.info("Wrote %s", full_path)
        return full_path

    def load_json(self, name: str) -> Any:
        return json.loads(self.require(name).read_text(encoding="utf-8"))

    def save_frame(self, name: str, frame: pd.DataFrame, index: bool = False) -> Path:
        full_path = self.path(name)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(full_path, index=index, lineterminator="\n", float_format="%.10g")
        logger.info("Wrote %s (%d rows)", full_path, len(frame))
        return full_path

    def save_text(self, name: str, text: str) -> Path:
        full_path = self.path(name)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        full_path.write_text(text, encoding="utf-8")
        logger.info("Wrote %s", full_path)
        return full_path

    def glob(self, pattern: str) -> list[Path]:
        return sorted(self.root.glob(pattern))
