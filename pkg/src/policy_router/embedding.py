"""Task representation: metadata extraction, a deterministic feature-hashing
embedder, and the cosine kernel.

The embedding is the concatenation of three blocks, L2-normalized as a
whole:

* text: signed hashed token counts of the lowercased instruction,
* scene: camera pose at fixed coordinates, then one hashed 6-wide slot per
  object holding its position and its offset from the camera,
* metadata: signed hashed indicators of involved objects and tags.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .core import (
    SceneFeatures,
    TaskMetadata,
    TaskRepresentation,
    from_jsonable,
    to_jsonable,
)

CAMERA_DIMS = 6
SLOT_WIDTH = 6


class DegenerateInputError(ValueError):
    """The embedder produced an all-zero vector."""


@dataclass(frozen=True)
class EmbedderConfig:
    d: int = 256
    text_dims: int = 128
    scene_dims: int = 96
    meta_dims: int = 32
    hash_seed: int = 0x5EED_0F_2026
    # Ablation switches; a text-only embedder ignores scene and metadata.
    use_scene: bool = True
    use_metadata: bool = True

    def __post_init__(self):
        if min(self.text_dims, self.scene_dims, self.meta_dims) <= 0:
            raise ValueError("block dimensions must be positive")
        if self.text_dims + self.scene_dims + self.meta_dims != self.d:
            raise ValueError("text_dims + scene_dims + meta_dims must equal d")
        if self.scene_dims < CAMERA_DIMS + SLOT_WIDTH:
            raise ValueError(f"scene_dims must be at least {CAMERA_DIMS + SLOT_WIDTH}")
        if not 0 <= self.hash_seed < 2**64:
            raise ValueError("hash_seed must be a 64-bit unsigned integer")


def extract_metadata(scene: SceneFeatures) -> TaskMetadata:
    names = frozenset(o.name for o in scene.objects)
    tags = frozenset(o.category for o in scene.objects if o.category)
    return TaskMetadata(involved_objects=names, object_count=len(names), tags=tags)


def _hash(seed: int, key: str) -> int:
    h = hashlib.blake2b(key.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def _signed_bucket(seed: int, key: str, dims: int) -> tuple[int, float]:
    h = _hash(seed, key)
    return h % dims, (1.0 if (h >> 63) & 1 else -1.0)


def tokenize(instruction: str) -> list[str]:
    return instruction.lower().split()


def _text_block(instruction: str, cfg: EmbedderConfig) -> np.ndarray:
    out = np.zeros(cfg.text_dims)
    for tok in tokenize(instruction):
        i, s = _signed_bucket(cfg.hash_seed, "t:" + tok, cfg.text_dims)
        out[i] += s
    return out


def _scene_block(scene: SceneFeatures, cfg: EmbedderConfig) -> np.ndarray:
    out = np.zeros(cfg.scene_dims)
    out[:CAMERA_DIMS] = scene.camera_pose
    cam = np.asarray(scene.camera_pose[:3], dtype=float)
    n_slots = (cfg.scene_dims - CAMERA_DIMS) // SLOT_WIDTH
    for obj in scene.objects:
        slot = _hash(cfg.hash_seed, "o:" + obj.name) % n_slots
        start = CAMERA_DIMS + slot * SLOT_WIDTH
        pos = np.asarray(obj.position, dtype=float)
        out[start : start + 3] += pos
        out[start + 3 : start + 6] += pos - cam
    return out


def _meta_block(meta: TaskMetadata, cfg: EmbedderConfig) -> np.ndarray:
    out = np.zeros(cfg.meta_dims)
    keys = ["obj:" + n for n in sorted(meta.involved_objects)] + ["tag:" + t for t in sorted(meta.tags)]
    for key in keys:
        i, s = _signed_bucket(cfg.hash_seed, "m:" + key, cfg.meta_dims)
        out[i] += s
    return out


def embed_vector(
    instruction: str, scene: SceneFeatures, meta: TaskMetadata, cfg: EmbedderConfig
) -> np.ndarray:
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    text = _text_block(instruction, cfg)
    scene_v = _scene_block(scene, cfg) if cfg.use_scene else np.zeros(cfg.scene_dims)
    meta_v = _meta_block(meta, cfg) if cfg.use_metadata else np.zeros(cfg.meta_dims)
    v = np.concatenate([text, scene_v, meta_v])
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateInputError("embedding is zero before normalization")
    return v / norm


def embed_task(
    instruction: str,
    scene: SceneFeatures,
    meta: TaskMetadata,
    cfg: EmbedderConfig,
    source_task_id: str = "",
) -> TaskRepresentation:
    v = embed_vector(instruction, scene, meta, cfg)
    return TaskRepresentation(vector=tuple(float(x) for x in v), metadata=meta, source_task_id=source_task_id)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


class Embedder(Protocol):
    dim: int

    def embed(self, instruction: str, scene: SceneFeatures, meta: TaskMetadata, source_task_id: str = "") -> TaskRepresentation: ...


class HashingEmbedder:
    """Reference provider backed by :func:`embed_task`."""

    def __init__(self, cfg: EmbedderConfig | None = None):
        self.cfg = cfg or EmbedderConfig()
        self.dim = self.cfg.d

    def embed(self, instruction, scene, meta, source_task_id=""):
        return embed_task(instruction, scene, meta, self.cfg, source_task_id)


class HttpEmbedder:
    """Remote provider: POST {instruction, scene, metadata} -> {vector}."""

    def __init__(self, url: str, dim: int, client: httpx.Client | None = None):
        self.url = url
        self.dim = dim
        self.client = client or httpx.Client(timeout=30.0)

    def embed(self, instruction, scene, meta, source_task_id=""):
        body = {"instruction": instruction, "scene": to_jsonable(scene), "metadata": to_jsonable(meta)}
        resp = self.client.post(self.url, json=body)
        resp.raise_for_status()
        vec = np.asarray(from_jsonable(tuple[float, ...], resp.json()["vector"]), dtype=float)
        if vec.shape != (self.dim,):
            raise ValueError(f"remote embedder returned dimension {vec.shape[0]}, expected {self.dim}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise DegenerateInputError("remote embedder returned a zero vector")
        vec = vec / norm
        return TaskRepresentation(tuple(float(x) for x in vec), meta, source_task_id)
