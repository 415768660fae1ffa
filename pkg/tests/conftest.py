"""Shared builders for toy datasets, captions, and fixture providers."""

import numpy as np
import pytest

from gist.captions import CaptionRecord, CaptionStore
from gist.embedding import EmbeddingVector, SyntheticBackend, l2_normalize
from gist.manifest import DatasetManifest, ImageRecord


def unit(values) -> EmbeddingVector:
    return l2_normalize(EmbeddingVector(values=np.asarray(values, dtype=np.float64)))


def random_unit_vectors(n: int, d: int, seed: int = 0) -> list[EmbeddingVector]:
    rng = np.random.default_rng(seed)
    return [unit(rng.normal(size=d)) for _ in range(n)]


def class_names(count: int) -> list[str]:
    return [f"class{c:02d}" for c in range(count)]


def build_toy_manifest(
    tmp_path,
    classes: int = 10,
    per_split: tuple[int, int, int] = (4, 4, 12),
    seed: int = 0,
    class_marker: bool = True,
    name: str = "toy",
) -> DatasetManifest:
    """Write small marker files and wrap them in a manifest.

    Each file's content is unique; with class_marker the synthetic
    backend sees a class-correlated component.
    """
    tmp_path.mkdir(parents=True, exist_ok=True)
    train, val, test = per_split
    names = class_names(classes)
    records = []
    for c, label in enumerate(names):
        for i in range(train + val + test):
            split = "train" if i < train else ("val" if i < train + val else "test")
            path = tmp_path / f"img_{seed}_{c:02d}_{i:02d}.txt"
            marker = f"[class:{label}] " if class_marker else ""
            path.write_text(f"{marker}unique image {seed} {c} {i}")
            records.append(
                ImageRecord(
                    image_id=f"i{c:02d}_{i:02d}",
                    path=str(path),
                    label=label,
                    split=split,
                )
            )
    return DatasetManifest(name=name, classes=names, records=records)


def build_toy_captions(
    names: list[str], per_class: int = 8, with_short: bool = True
) -> CaptionStore:
    records = []
    for c, label in enumerate(names):
        for j in range(per_class):
            records.append(
                CaptionRecord(
                    caption_id=f"c{c:02d}_{j:02d}",
                    label=label,
                    long_text=(
                        f"a long detailed visual description {j} of "
                        f"[class:{label}] with extra trailing words"
                    ),
                    short_text=(
                        f"features {j} of [class:{label}]" if with_short else None
                    ),
                )
            )
    return CaptionStore(dataset_name="toy", records=records)


@pytest.fixture
def toy_backend():
    return SyntheticBackend(d=32, seed=0)


@pytest.fixture
def toy_manifest(tmp_path):
    return build_toy_manifest(tmp_path, classes=4, per_split=(3, 2, 3))


@pytest.fixture
def toy_captions(toy_manifest):
    return build_toy_captions(list(toy_manifest.classes), per_class=4)
