"""CLIPScore from precomputed embeddings and quality gating.

Scores use the 100 * max(cos, 0) convention, which matches the magnitudes
usually reported for CLIPScore (~20-30 for good pairs). The weight is a
parameter for callers that want the 2.5 * max(cos, 0) form.

Embedding files: ``<prefix>.json`` holds ``{"dim": D, "count": N, "ids": [...]}``
and ``<prefix>.bin`` the row-major little-endian float32 N x D payload.
Aesthetic scores come from a JSONL sidecar of ``{"id", "aesthetic"}`` rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLIP_WEIGHT = 100.0


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class MissingScore(KeyError):
    pass


@dataclass(frozen=True)
class ScoredPair:
    image_id: str
    clip_score: float
    aesthetic_score: float


@dataclass(frozen=True)
class QualityThresholds:
    min_clip: float = 20.0
    min_aesthetic: float = 3.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.min_clip) and math.isfinite(self.min_aesthetic)):
            raise ValueError("quality thresholds must be finite")


def clip_score(image_embedding, text_embedding, weight: float = CLIP_WEIGHT) -> float:
    a = np.asarray(image_embedding, dtype=np.float64).ravel()
    b = np.asarray(text_embedding, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise DimensionMismatch(f"embedding shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cannot score a zero embedding")
    cos = float(a @ b / (na * nb))
    return weight * max(0.0, min(1.0, cos))


def quality_decide(pair: ScoredPair, t: QualityThresholds = QualityThresholds()) -> tuple[bool, list[str]]:
    """Return ``(passed, reasons)``; a score equal to its threshold passes."""
    for name in ("clip_score", "aesthetic_score"):
        value = getattr(pair, name)
        if value is None or not math.isfinite(value):
            raise MissingScore(f"{pair.image_id}: {name} missing")
    reasons = []
    if pair.clip_score < t.min_clip:
        reasons.append("clip")
    if pair.aesthetic_score < t.min_aesthetic:
        reasons.append("aesthetic")
    return not reasons, reasons


# -- files --------------------------------------------------------------------


class EmbeddingStore:
    """Id-indexed view over an N x D matrix."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DimensionMismatch(f"{len(ids)} ids for matrix of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in embedding file")
        self.ids = list(ids)
        self.vectors = vectors
        self._row = {k: i for i, k in enumerate(self.ids)}

    def __contains__(self, key: str) -> bool:
        return key in self._row

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.vectors[self._row[key]]
        except KeyError:
            raise MissingScore(f"no embedding for {key!r}") from None

    def subset(self, ids: list[str]) -> np.ndarray:
        return np.stack([self[k] for k in ids]) if ids else np.empty((0, self.vectors.shape[1]))


def _prefix_paths(prefix: str | Path) -> tuple[Path, Path]:
    p = Path(prefix)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def write_embeddings(prefix: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    header, payload = _prefix_paths(prefix)
    header.parent.mkdir(parents=True, exist_ok=True)
    header.write_text(json.dumps({"dim": int(vectors.shape[1]), "count": len(ids), "ids": list(ids)}) + "\n")
    payload.write_bytes(np.ascontiguousarray(vectors).tobytes())


def read_embeddings(prefix: str | Path) -> EmbeddingStore:
    header, payload = _prefix_paths(prefix)
    meta = json.loads(header.read_text(encoding="utf-8"))
    dim, count, ids = int(meta["dim"]), int(meta["count"]), list(meta["ids"])
    if len(ids) != count:
        raise DimensionMismatch(f"header count {count} != {len(ids)} ids")
    raw = np.fromfile(payload, dtype="<f4")
    if raw.size != count * dim:
        raise DimensionMismatch(f"{payload}: expected {count * dim} floats, found {raw.size}")
    return EmbeddingStore(ids, raw.reshape(count, dim).astype(np.float64))


def read_aesthetic(path: str | Path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[str(row["id"])] = float(row["aesthetic"])
    return out


def write_aesthetic(path: str | Path, scores: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in scores.items():
            fh.write(json.dumps({"id": key, "aesthetic": value}) + "\n")
