"""Label-preserving image-caption matching and pair-dataset assembly.

Each training image is ranked against the captions generated for its own
class; the top-n by cosine similarity (over L2-normalized embeddings,
computed in double precision) become its matched captions. Ties break by
ascending caption_id so results are fully deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .captions import CaptionStore, append_class_name
from .embedding import EmbeddingVector
from .errors import MatchError
from .manifest import DatasetManifest

CAPTION_TEXT_MODES = ("long", "short_with_class")


@dataclass(frozen=True)
class MatchAssignment:
    image_id: str
    ranked: tuple[tuple[str, float], ...]  # (caption_id, similarity), non-increasing
    n: int

    def caption_ids(self) -> tuple[str, ...]:
        return tuple(cid for cid, _ in self.ranked)


@dataclass
class PairDataset:
    pairs: list[tuple[str, str]]  # (image_id, caption_id)
    caption_text_mode: str
    texts: dict[str, str] = field(default_factory=dict)  # caption_id -> training text
    labels: dict[str, str] = field(default_factory=dict)  # image_id -> label

    def image_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for image_id, _ in self.pairs:
            seen.setdefault(image_id)
        return list(seen)

    def captions_for(self, image_id: str) -> list[str]:
        return [cid for iid, cid in self.pairs if iid == image_id]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"caption_text_mode": self.caption_text_mode}) + "\n")
            for image_id, caption_id in self.pairs:
                fh.write(json.dumps({
                    "image_id": image_id,
                    "caption_id": caption_id,
                    "text": self.texts[caption_id],
                    "label": self.labels.get(image_id),
                }) + "\n")


def _as_unit_rows(vectors: Sequence[EmbeddingVector], d: int | None = None) -> np.ndarray:
    rows = []
    for vec in vectors:
        values = np.asarray(vec.values, dtype=np.float64)
        if d is None:
            d = values.shape[0]
        elif values.shape[0] != d:
            raise MatchError(f"embedding dimension mismatch: {values.shape[0]} vs {d}")
        norm = np.linalg.norm(values)
        if norm == 0:
            raise MatchError("zero vector cannot be matched")
        rows.append(values / norm)
    return np.stack(rows)


def match_image_to_captions(
    image_emb: EmbeddingVector,
    class_captions: Sequence[tuple[str, EmbeddingVector]],
    n: int,
) -> MatchAssignment:
    """Rank a class's captions against one image and keep the top n.

    Candidates must already be restricted to the image's ground-truth
    label. Returns all candidates (ranked) when n exceeds their count.
    """
    if not class_captions:
        raise MatchError("empty candidate caption list")
    if n < 1:
        raise MatchError(f"n must be >= 1, got {n}")
    ids = [cid for cid, _ in class_captions]
    if len(set(ids)) != len(ids):
        raise MatchError("duplicate caption_ids among candidates")
    cap_mat = _as_unit_rows([vec for _, vec in class_captions])
    img = _as_unit_rows([image_emb], d=cap_mat.shape[1])[0]
    sims = cap_mat @ img
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:n]
    ranked = tuple((ids[i], float(sims[i])) for i in order)
    return MatchAssignment(image_id="", ranked=ranked, n=n)


def match_manifest(
    manifest: DatasetManifest,
    store: CaptionStore,
    backend,
    n: int,
    discarded: Iterable[str] = (),
) -> list[MatchAssignment]:
    """Match every train-split image to its top-n same-label captions.

    Captions with a discard verdict are excluded before matching.
    Val/test images are never matched: captions are a training-time
    construct only.
    """
    discarded = set(discarded)
    by_label = {
        label: [r for r in recs if r.caption_id not in discarded]
        for label, recs in store.by_label().items()
    }
    train = manifest.split_records("train")
    needed = {r.label for r in train}
    for label in sorted(needed):
        if not by_label.get(label):
            raise MatchError(f"class {label!r} has no surviving captions")

    # Encode each class's captions once; images batched per class.
    caption_embs: dict[str, list[tuple[str, EmbeddingVector]]] = {}
    for label in sorted(needed):
        recs = sorted(by_label[label], key=lambda r: r.caption_id)
        vecs = backend.encode_texts([r.long_text for r in recs])
        caption_embs[label] = list(zip([r.caption_id for r in recs], vecs))

    image_vecs = backend.encode_images([r.path for r in train])
    assignments = []
    for rec, vec in zip(train, image_vecs):
        assignment = match_image_to_captions(vec, caption_embs[rec.label], n)
        assignments.append(
            MatchAssignment(image_id=rec.image_id, ranked=assignment.ranked, n=n)
        )
    return assignments


def build_pair_dataset(
    manifest: DatasetManifest,
    store: CaptionStore,
    backend,
    n: int,
    mode: str = "short_with_class",
    assignments: list[MatchAssignment] | None = None,
    discarded: Iterable[str] = (),
) -> PairDataset:
    """Materialize the fine-tuning pair dataset from match assignments.

    Runs matching when no precomputed assignments are given. In
    short_with_class mode every caption must carry a summary; the
    training text is the summary with the class name appended.
    """
    if mode not in CAPTION_TEXT_MODES:
        raise MatchError(f"unknown caption_text_mode {mode!r}")
    if assignments is None:
        assignments = match_manifest(manifest, store, backend, n, discarded=discarded)
    by_id = store.by_id()
    record_labels = {r.image_id: r.label for r in manifest.records}

    pairs: list[tuple[str, str]] = []
    texts: dict[str, str] = {}
    labels: dict[str, str] = {}
    for assignment in assignments:
        label = record_labels.get(assignment.image_id)
        if label is None:
            raise MatchError(f"assignment references unknown image {assignment.image_id!r}")
        labels[assignment.image_id] = label
        for caption_id, _ in assignment.ranked:
            cap = by_id.get(caption_id)
            if cap is None:
                raise MatchError(f"assignment references unknown caption {caption_id!r}")
            if cap.label != label:
                raise MatchError(
                    f"label mismatch: image {assignment.image_id!r} ({label!r}) matched "
                    f"caption {caption_id!r} ({cap.label!r})"
                )
            if mode == "short_with_class":
                if cap.short_text is None:
                    raise MatchError(
                        f"caption {caption_id!r} has no summary; summarize matched "
                        f"captions before building a short_with_class pair dataset"
                    )
                texts[caption_id] = append_class_name(cap.short_text, label)
            else:
                texts[caption_id] = cap.long_text
            pairs.append((assignment.image_id, caption_id))
    return PairDataset(pairs=pairs, caption_text_mode=mode, texts=texts, labels=labels)
