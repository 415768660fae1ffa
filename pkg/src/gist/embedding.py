"""Image and text encoders behind a uniform interface, plus a persistent
on-disk embedding cache.

Two backend kinds exist:

* ``SyntheticBackend`` — a deterministic function of content bytes. Each
  input hashes to a pseudo-random vector, so full pipeline runs are
  reproducible with no model weights. When ``class_signal`` is positive
  and the content carries a ``[class:TOKEN]`` marker, a class prototype
  direction is mixed in, which makes embeddings class-correlated for
  end-to-end tests.
* ``ClipBackend`` — a pretrained vision-language checkpoint loaded by
  model id (via sentence-transformers, imported lazily).

Cache layout: ``cache/<model_id>/vectors.bin`` (32-byte header followed by
contiguous little-endian float32 records) plus ``index.jsonl`` mapping
keys to record offsets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmbeddingError

logger = logging.getLogger(__name__)

CLASS_MARKER = re.compile(rb"\[class:([^\]]+)\]")

_MAGIC = b"GEMB"
_VERSION = 1
_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHHIQ14x")  # magic, version, dtype, d, count, pad to 32


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool = False
    source: str = "unknown"  # "image" | "text"
    model_id: str = "unknown"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise EmbeddingError("embedding values must be a non-empty 1-D array")
        object.__setattr__(self, "values", values)
        if self.normalized and abs(np.linalg.norm(values) - 1.0) > 1e-6:
            raise EmbeddingError("vector marked normalized but norm deviates from 1")

    @property
    def d(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class BackendDescriptor:
    model_id: str
    d: int
    trainable: bool
    kind: str  # "pretrained-vlm" | "synthetic"


def l2_normalize(v: EmbeddingVector) -> EmbeddingVector:
    """Scale a vector to unit L2 norm, preserving direction."""
    norm = float(np.linalg.norm(v.values))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize the zero vector")
    return replace(v, values=v.values / norm, normalized=True)


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine similarity, computed in double precision."""
    if u.d != v.d:
        raise EmbeddingError(f"dimension mismatch: {u.d} vs {v.d}")
    nu = float(np.linalg.norm(u.values))
    nv = float(np.linalg.norm(v.values))
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine similarity undefined for the zero vector")
    sim = float(np.dot(u.values, v.values) / (nu * nv))
    return max(-1.0, min(1.0, sim))


def _hash_rng(payload: bytes) -> np.random.Generator:
    digest = hashlib.sha256(payload).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class SyntheticBackend:
    """Deterministic hash-expansion encoder for weight-free runs.

    Every input maps to ``noise + class_signal * prototype(token)`` where
    noise is a seeded hash expansion of the content bytes and the token
    comes from an optional ``[class:TOKEN]`` marker in the content.
    With the default ``class_signal=0`` the output is the pure hash
    expansion. Outputs are unnormalized.
    """

    kind = "synthetic"

    def __init__(
        self,
        d: int = 16,
        seed: int = 0,
        model_id: str | None = None,
        image_class_signal: float = 0.0,
        text_class_signal: float = 0.0,
    ):
        if d <= 0:
            raise EmbeddingError(f"dimension must be positive, got {d}")
        self.d = d
        self.seed = seed
        self.image_class_signal = image_class_signal
        self.text_class_signal = text_class_signal
        self.model_id = model_id or f"synthetic-d{d}-s{seed}"

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(self.model_id, self.d, trainable=False, kind=self.kind)

    def _prototype(self, token: bytes) -> np.ndarray:
        rng = _hash_rng(b"proto|%d|" % self.seed + token)
        proto = rng.standard_normal(self.d)
        return proto / np.linalg.norm(proto)

    def _encode_content(self, content: bytes, signal: float) -> np.ndarray:
        rng = _hash_rng(b"content|%d|" % self.seed + content)
        vec = rng.standard_normal(self.d) / np.sqrt(self.d)
        if signal > 0.0:
            match = CLASS_MARKER.search(content)
            if match is not None:
                vec = vec + signal * self._prototype(match.group(1))
        return vec

    def encode_images(self, paths: Sequence[str | Path]) -> list[EmbeddingVector]:
        out = []
        for path in paths:
            path = Path(path)
            try:
                content = path.read_bytes()
            except OSError as exc:
                raise EmbeddingError(f"cannot read image {path}: {exc}") from exc
            vec = self._encode_content(content, self.image_class_signal)
            out.append(EmbeddingVector(vec, normalized=False, source="image", model_id=self.model_id))
        return out

    def encode_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out = []
        for text in texts:
            if not text or not text.strip():
                raise EmbeddingError("cannot encode an empty string")
            vec = self._encode_content(text.encode("utf-8"), self.text_class_signal)
            out.append(EmbeddingVector(vec, normalized=False, source="text", model_id=self.model_id))
        return out


class ClipBackend:
    """Pretrained vision-language checkpoint (e.g. "clip-ViT-B-32").

    Loaded lazily through sentence-transformers; weight location can be
    overridden with the GIST_MODEL_DIR environment variable handled by
    that library's cache settings.
    """

    kind = "pretrained-vlm"

    def __init__(self, model_id: str):
        self.model_id = model_id
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from sentence_transformers import SentenceTransformer
            except ImportError as exc:  # pragma: no cover
                raise EmbeddingError(
                    "sentence-transformers is required for pretrained backends"
                ) from exc
            self._model = SentenceTransformer(self.model_id)
        return self._model

    @property
    def descriptor(self) -> BackendDescriptor:
        model = self._load()
        return BackendDescriptor(
            self.model_id, model.get_sentence_embedding_dimension(), trainable=False, kind=self.kind
        )

    def encode_images(self, paths: Sequence[str | Path]) -> list[EmbeddingVector]:
        from PIL import Image

        model = self._load()
        images = []
        for path in paths:
            try:
                images.append(Image.open(path).convert("RGB"))
            except OSError as exc:
                raise EmbeddingError(f"cannot decode image {path}: {exc}") from exc
        if not images:
            return []
        mat = model.encode(images, convert_to_numpy=True, normalize_embeddings=False)
        return [
            EmbeddingVector(row, normalized=False, source="image", model_id=self.model_id)
            for row in mat
        ]

    def encode_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        for text in texts:
            if not text or not text.strip():
                raise EmbeddingError("cannot encode an empty string")
        if not texts:
            return []
        model = self._load()
        mat = model.encode(list(texts), convert_to_numpy=True, normalize_embeddings=False)
        return [
            EmbeddingVector(row, normalized=False, source="text", model_id=self.model_id)
            for row in mat
        ]


def make_backend(model_id: str, **kwargs) -> SyntheticBackend | ClipBackend:
    """Instantiate a backend from a model id. Ids starting with
    "synthetic" get the weight-free backend; anything else loads a
    pretrained checkpoint."""
    if model_id.startswith("synthetic"):
        return SyntheticBackend(model_id=model_id, **kwargs)
    return ClipBackend(model_id)


def content_hash(content: bytes | str) -> str:
    if isinstance(content, str):
        content = content.encode("utf-8")
    return hashlib.sha256(content).hexdigest()


class EmbeddingCache:
    """Append-only per-model embedding cache.

    One shard per model_id: a binary vector file with a fixed 32-byte
    header plus a JSON Lines index mapping "<source>:<content_hash>" keys
    to record offsets. Round-trips are bit-exact; corrupted entries are
    treated as misses with a warning.
    """

    def __init__(self, root: str | Path, model_id: str, d: int):
        self.root = Path(root) / model_id
        self.model_id = model_id
        self.d = d
        self.root.mkdir(parents=True, exist_ok=True)
        self._vectors_path = self.root / "vectors.bin"
        self._index_path = self.root / "index.jsonl"
        self._index: dict[str, int] = {}
        self._count = 0
        self._load()

    def _load(self) -> None:
        if self._vectors_path.exists():
            with self._vectors_path.open("rb") as fh:
                header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                logger.warning("cache %s: truncated header, resetting shard", self.root)
                self._reset()
                return
            magic, version, dtype, d, count = _HEADER.unpack(header)
            if magic != _MAGIC or version != _VERSION or dtype != _DTYPE_F32 or d != self.d:
                logger.warning("cache %s: incompatible header, resetting shard", self.root)
                self._reset()
                return
            self._count = count
        else:
            self._reset()
        if self._index_path.exists():
            for line in self._index_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    key, offset = entry["key"], int(entry["offset"])
                except (json.JSONDecodeError, KeyError, ValueError):
                    logger.warning("cache %s: corrupt index line skipped", self.root)
                    continue
                if offset < self._count:
                    self._index[key] = offset

    def _reset(self) -> None:
        self._count = 0
        self._index = {}
        with self._vectors_path.open("wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, _DTYPE_F32, self.d, 0))
        self._index_path.write_text("", encoding="utf-8")

    @staticmethod
    def key(source: str, digest: str) -> str:
        return f"{source}:{digest}"

    def get(self, source: str, digest: str) -> EmbeddingVector | None:
        offset = self._index.get(self.key(source, digest))
        if offset is None:
            return None
        record_bytes = self.d * 4
        with self._vectors_path.open("rb") as fh:
            fh.seek(_HEADER.size + offset * record_bytes)
            raw = fh.read(record_bytes)
        if len(raw) != record_bytes:
            logger.warning("cache %s: corrupt record for %s, treating as miss", self.root, digest)
            return None
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        return EmbeddingVector(values, normalized=False, source=source, model_id=self.model_id)

    def put(self, source: str, digest: str, vector: EmbeddingVector) -> None:
        if vector.d != self.d:
            raise EmbeddingError(f"cache expects d={self.d}, got d={vector.d}")
        key = self.key(source, digest)
        if key in self._index:
            return  # append-only per key: first write wins
        raw = np.asarray(vector.values, dtype="<f4").tobytes()
        with self._vectors_path.open("r+b") as fh:
            fh.seek(0, 2)
            fh.write(raw)
            self._count += 1
            fh.seek(0)
            fh.write(_HEADER.pack(_MAGIC, _VERSION, _DTYPE_F32, self.d, self._count))
        with self._index_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "offset": self._count - 1}) + "\n")
        self._index[key] = self._count - 1
