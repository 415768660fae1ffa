"""Dataset manifests: loading, validation, k-shot subsampling, and
near-duplicate handling.

A manifest is stored as JSON Lines: the first line is a header object
``{"name": ..., "classes": [...]}``, every following line is one record
``{"image_id", "path", "label", "split"}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ManifestError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    label: str
    split: str

    def __post_init__(self):
        if not self.path:
            raise ManifestError(f"record {self.image_id!r}: empty path")
        if self.split not in SPLITS:
            raise ManifestError(
                f"record {self.image_id!r}: split {self.split!r} not in {SPLITS}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    classes: tuple[str, ...]
    records: tuple[ImageRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "records", tuple(self.records))
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError(f"manifest {self.name!r}: duplicate class names")
        known = set(self.classes)
        seen_ids: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen_ids:
                raise ManifestError(
                    f"manifest {self.name!r}: duplicate image_id {rec.image_id!r}"
                )
            seen_ids.add(rec.image_id)
            if rec.label not in known:
                raise ManifestError(
                    f"record {rec.image_id!r}: label {rec.label!r} not in class list"
                )

    def split_records(self, split: str) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for rec in self.records:
            counts[rec.split] += 1
        return counts

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}


@dataclass(frozen=True)
class KShotSpec:
    k: int
    seed: int = 0
    clamp: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ManifestError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class DuplicatePair:
    id_a: str
    id_b: str
    similarity: float

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ManifestError(f"duplicate pair with identical ids {self.id_a!r}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSON Lines manifest file."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: header is not valid JSON: {exc}") from exc
    if "name" not in header or "classes" not in header:
        raise ManifestError(f"{path}: header must contain 'name' and 'classes'")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
        missing = {"image_id", "path", "label", "split"} - obj.keys()
        if missing:
            raise ManifestError(f"{path}:{lineno}: record missing fields {sorted(missing)}")
        records.append(
            ImageRecord(
                image_id=obj["image_id"],
                path=obj["path"],
                label=obj["label"],
                split=obj["split"],
            )
        )
    try:
        return DatasetManifest(name=header["name"], classes=header["classes"], records=records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"name": manifest.name, "classes": list(manifest.classes)}) + "\n")
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "path": rec.path,
                        "label": rec.label,
                        "split": rec.split,
                    }
                )
                + "\n"
            )


def sample_kshot(manifest: DatasetManifest, spec: KShotSpec) -> DatasetManifest:
    """Subsample the train split to k images per class.

    Each class draws from its own random substream seeded by
    (spec.seed, class index), so adding or removing a class does not
    disturb the other classes' draws. Val/test records pass through.
    """
    train_by_class: dict[str, list[ImageRecord]] = {c: [] for c in manifest.classes}
    for rec in manifest.records:
        if rec.split == "train":
            train_by_class[rec.label].append(rec)

    keep_ids: set[str] = set()
    for class_idx, cls in enumerate(manifest.classes):
        pool = sorted(train_by_class[cls], key=lambda r: r.image_id)
        if not pool and not spec.clamp:
            raise ManifestError(
                f"class {cls!r} has 0 train images, cannot sample k={spec.k}"
            )
        if len(pool) < spec.k and not spec.clamp:
            raise ManifestError(
                f"class {cls!r} has {len(pool)} train images, cannot sample k={spec.k} "
                f"(pass clamp=true to take all)"
            )
        take = min(spec.k, len(pool))
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_idx]))
        chosen = rng.choice(len(pool), size=take, replace=False)
        keep_ids.update(pool[i].image_id for i in chosen)

    new_records = tuple(
        r for r in manifest.records if r.split != "train" or r.image_id in keep_ids
    )
    return replace(manifest, records=new_records)


def find_near_duplicates(
    embeddings: Mapping[str, "np.ndarray | object"],
    threshold: float,
) -> list[DuplicatePair]:
    """Exhaustive pairwise cosine search over L2-normalized embeddings.

    Returns every unordered pair with similarity >= threshold, sorted by
    descending similarity, ties broken by the lexicographic (id_a, id_b)
    pair. Accepts raw arrays or EmbeddingVector objects.
    """
    if not 0.0 < threshold <= 1.0:
        raise ManifestError(f"threshold must be in (0, 1], got {threshold}")
    ids = sorted(embeddings.keys())
    if len(ids) < 2:
        return []
    rows = []
    dim = None
    for image_id in ids:
        vec = embeddings[image_id]
        values = np.asarray(getattr(vec, "values", vec), dtype=np.float64)
        if values.ndim != 1:
            raise ManifestError(f"embedding for {image_id!r} is not a vector")
        if dim is None:
            dim = values.shape[0]
        elif values.shape[0] != dim:
            raise ManifestError(
                f"embedding dimension mismatch: {image_id!r} has d={values.shape[0]}, "
                f"expected d={dim}"
            )
        norm = np.linalg.norm(values)
        if norm == 0:
            raise ManifestError(f"embedding for {image_id!r} is the zero vector")
        rows.append(values / norm)
    mat = np.stack(rows)
    sims = mat @ mat.T
    pairs = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if sims[i, j] >= threshold:
                pairs.append(DuplicatePair(ids[i], ids[j], float(sims[i, j])))
    pairs.sort(key=lambda p: (-p.similarity, p.id_a, p.id_b))
    return pairs


def resolve_split_leakage(
    manifest: DatasetManifest, pairs: Iterable[DuplicatePair]
) -> DatasetManifest:
    """Move both members of any duplicate pair that touches the test split
    into the train split. Records are reassigned, never deleted; applying
    the operation twice is a no-op.
    """
    by_id = manifest.by_id()
    move: set[str] = set()
    for pair in pairs:
        for image_id in (pair.id_a, pair.id_b):
            if image_id not in by_id:
                raise ManifestError(f"duplicate pair references unknown image_id {image_id!r}")
        if by_id[pair.id_a].split == "test" or by_id[pair.id_b].split == "test":
            move.add(pair.id_a)
            move.add(pair.id_b)
    if not move:
        return manifest
    new_records = tuple(
        replace(r, split="train") if r.image_id in move else r for r in manifest.records
    )
    return replace(manifest, records=new_records)
