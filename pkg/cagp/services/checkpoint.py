"""Binary checkpoint container for Gaussian embedding models.

Layout (all integers and floats little-endian)::

    magic            5 bytes   b"CAGP1"
    scorer kind      8 bytes   ASCII, NUL-padded ("distmult", "transe", "complex")
    entity count     uint64
    relation count   uint64
    d                uint64
    mu               float64[|E| * w_e]   row-major
    ell              float64[|E| * w_e]   row-major
    relation params  float64[|R| * w_r]   row-major

where ``w_e = w_r = d`` for DistMult / TransE and ``2d`` for ComplEx.
A JSON sidecar (``<checkpoint>.json``) records the training config, SHA-256
hashes of both vocabularies and of the checkpoint bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from cagp.errors import ArtifactMissingError, CheckpointFormatError
from cagp.schemas.run_config import ScorerKind, TrainConfig
from cagp.services.embed import GaussianEmbeddingModel, entity_width, relation_width
from cagp.services.graph import KnowledgeGraph

logger = logging.getLogger(__name__)

MAGIC = b"CAGP1"
_HEADER = struct.Struct("<5s8sQQQ")


def vocabulary_hash(names: tuple[str, ...]) -> str:
    return hashlib.sha256("\n".join(names).encode("utf-8")).hexdigest()


def encode_checkpoint(model: GaussianEmbeddingModel) -> bytes:
    """Serialize a model into the container byte layout."""
    header = _HEADER.pack(
        MAGIC,
        model.scorer.value.encode("ascii"),
        model.entity_count,
        model.relation_count,
        model.dim,
    )
    with torch.no_grad():
        blocks = [
            p.detach().cpu().double().numpy().astype("<f8", copy=False).tobytes(order="C")
            for p in (model.mu, model.ell, model.relation_params)
        ]
    return header + b"".join(blocks)


def decode_checkpoint(data: bytes, dtype: torch.dtype = torch.float64) -> GaussianEmbeddingModel:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("Checkpoint is shorter than its header")
    magic, kind, entity_count, relation_count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}")
    try:
        scorer = ScorerKind(kind.rstrip(b"\x00").decode("ascii"))
    except ValueError as exc:
        raise CheckpointFormatError(f"Unknown scorer kind {kind!r}") from exc

    ew = entity_width(scorer, dim)
    rw = relation_width(scorer, dim)
    sizes = [entity_count * ew, entity_count * ew, relation_count * rw]
    expected = _HEADER.size + 8 * sum(sizes)
    if len(data) != expected:
        raise CheckpointFormatError(
            f"Checkpoint has {len(data)} bytes, header implies {expected}"
        )

    offset = _HEADER.size
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset))
        offset += 8 * count

    model = GaussianEmbeddingModel(entity_count, relation_count, dim, scorer=scorer, dtype=dtype)
    with torch.no_grad():
        model.mu.copy_(torch.from_numpy(arrays[0].reshape(entity_count, ew).copy()))
        model.ell.copy_(torch.from_numpy(arrays[1].reshape(entity_count, ew).copy()))
        model.relation_params.copy_(torch.from_numpy(arrays[2].reshape(relation_count, rw).copy()))
    model.eval()
    return model


def sidecar_path(path: Path) -> Path:
    return Path(f"{path}.json")


def save_checkpoint(
    model: GaussianEmbeddingModel,
    path: Path,
    kg: KnowledgeGraph,
    config: TrainConfig,
) -> Path:
    """Write the container and its JSON sidecar; returns the container path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model)
    path.write_bytes(data)
    sidecar = {
        "format": MAGIC.decode("ascii"),
        "scorer": model.scorer.value,
        "entity_count": model.entity_count,
        "relation_count": model.relation_count,
        "dim": model.dim,
        "config": config.model_dump(mode="json"),
        "entity_vocab_sha256": vocabulary_hash(kg.entities),
        "relation_vocab_sha256": vocabulary_hash(kg.relations),
        "checkpoint_sha256": hashlib.sha256(data).hexdigest(),
    }
    sidecar_path(path).write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("Checkpoint written: %s (%d bytes)", path, len(data))
    return path


def load_checkpoint(
    path: Path,
    kg: Optional[KnowledgeGraph] = None,
    dtype: torch.dtype = torch.float64,
) -> GaussianEmbeddingModel:
    """Read a checkpoint; when a graph is given, its vocabularies must match the sidecar."""
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(f"Checkpoint not found: {path}")
    model = decode_checkpoint(path.read_bytes(), dtype=dtype)

    meta_path = sidecar_path(path)
    if kg is not None and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("entity_vocab_sha256") != vocabulary_hash(kg.entities) or meta.get(
            "relation_vocab_sha256"
        ) != vocabulary_hash(kg.relations):
            raise CheckpointFormatError(
                f"Checkpoint {path} was trained on a different vocabulary"
            )
    if kg is not None and (
        model.entity_count != kg.entity_count or model.relation_count != kg.relation_count
    ):
        raise CheckpointFormatError(
            f"Checkpoint shape ({model.entity_count}, {model.relation_count}) does not "
            f"match the graph ({kg.entity_count}, {kg.relation_count})"
        )
    return model
