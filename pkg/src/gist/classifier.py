"""Classification heads over frozen image embeddings.

Two heads: a linear probe (multinomial logistic regression trained with
SGD + momentum on frozen embeddings) and a zero-shot head built from
template-averaged text embeddings. Both serialize to a versioned binary
matrix file plus a JSON metadata sidecar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingVector, l2_normalize
from .errors import TrainError, EvalError

_HEAD_MAGIC = b"GCLS"
_HEAD_VERSION = 1
_HEAD_STRUCT = struct.Struct("<4sHHII")  # magic, version, kind, rows, cols

DEFAULT_ZEROSHOT_TEMPLATES = (
    "a photo of a {class}.",
    "a picture of a {class}.",
)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 500
    learning_rate: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class LinearProbe:
    weights: np.ndarray  # |Y| x d
    bias: np.ndarray  # |Y|
    class_order: list[str]
    trained_on: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights.shape[0] != len(self.class_order):
            raise TrainError("probe row count must equal class count")
        if self.bias.shape != (len(self.class_order),):
            raise TrainError("probe bias shape must equal class count")


@dataclass
class ZeroShotHead:
    class_embeddings: np.ndarray  # |Y| x d, unit rows
    class_order: list[str]
    templates: list[str]

    def __post_init__(self):
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise TrainError("zero-shot class embeddings must be unit-norm")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=1, keepdims=True)


def train_linear_probe(
    embeddings: np.ndarray,
    labels: Sequence[str],
    classes: Sequence[str],
    config: ProbeConfig = ProbeConfig(),
) -> LinearProbe:
    """Train a softmax linear classifier on frozen embeddings with
    minibatch SGD + momentum. Deterministic for a fixed seed."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise TrainError("embeddings must be an N x d matrix")
    n, d = embeddings.shape
    classes = list(classes)
    if n < len(classes):
        raise TrainError(f"need at least |Y|={len(classes)} samples, got {n}")
    if len(labels) != n:
        raise TrainError("labels length must match embedding rows")
    index = {c: i for i, c in enumerate(classes)}
    missing = sorted(set(classes) - set(labels))
    if missing:
        raise TrainError(f"classes absent from training labels: {missing}")
    try:
        y = np.array([index[label] for label in labels])
    except KeyError as exc:
        raise TrainError(f"label {exc} not in class list") from exc

    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    W = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    vel_w = np.zeros_like(W)
    vel_b = np.zeros_like(b)
    batch = min(config.batch_size, n)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            X = embeddings[idx]
            probs = _softmax(X @ W.T + b)
            probs[np.arange(len(idx)), y[idx]] -= 1.0
            grad_w = probs.T @ X / len(idx) + config.weight_decay * W
            grad_b = np.mean(probs, axis=0)
            vel_w = config.momentum * vel_w + grad_w
            vel_b = config.momentum * vel_b + grad_b
            W -= config.learning_rate * vel_w
            b -= config.learning_rate * vel_b
    return LinearProbe(
        weights=W,
        bias=b,
        class_order=classes,
        trained_on={"n": n, "d": d, "config": config.__dict__.copy()},
    )


def predict(head: "LinearProbe | ZeroShotHead", image_emb: EmbeddingVector | np.ndarray) -> np.ndarray:
    """Score vector over classes for one image embedding.

    Linear probes score raw embeddings; zero-shot heads score the
    normalized embedding by cosine, so positive rescaling of the input
    cannot change the ranking.
    """
    values = np.asarray(getattr(image_emb, "values", image_emb), dtype=np.float64)
    if isinstance(head, LinearProbe):
        if values.shape[0] != head.weights.shape[1]:
            raise TrainError(
                f"dimension mismatch: embedding d={values.shape[0]}, "
                f"probe d={head.weights.shape[1]}"
            )
        return head.weights @ values + head.bias
    if isinstance(head, ZeroShotHead):
        if values.shape[0] != head.class_embeddings.shape[1]:
            raise TrainError("dimension mismatch between embedding and zero-shot head")
        norm = np.linalg.norm(values)
        if norm == 0:
            raise TrainError("cannot classify the zero vector")
        return head.class_embeddings @ (values / norm)
    raise TrainError(f"unknown head type {type(head).__name__}")


def predict_matrix(head, embeddings: np.ndarray) -> np.ndarray:
    """Batched predict: N x d embeddings -> N x |Y| scores."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if isinstance(head, LinearProbe):
        return embeddings @ head.weights.T + head.bias
    if isinstance(head, ZeroShotHead):
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise TrainError("cannot classify the zero vector")
        return (embeddings / norms) @ head.class_embeddings.T
    raise TrainError(f"unknown head type {type(head).__name__}")


def _display_name(class_name: str) -> str:
    # underscores are a storage artifact; templates read better with spaces
    return class_name.replace("_", " ")


def build_zeroshot_head(
    backend,
    class_names: Sequence[str],
    templates: Sequence[str] = DEFAULT_ZEROSHOT_TEMPLATES,
) -> ZeroShotHead:
    """Per class: encode each filled template, normalize each embedding,
    average them, and re-normalize the mean."""
    if not class_names:
        raise TrainError("class list must be non-empty")
    if not templates:
        raise TrainError("at least one template is required")
    rows = []
    for name in class_names:
        filled = [t.replace("{class}", _display_name(name)) for t in templates]
        vecs = [l2_normalize(v) for v in backend.encode_texts(filled)]
        mean = np.mean(np.stack([v.values for v in vecs]), axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise TrainError(f"class {name!r}: template embeddings cancel out")
        rows.append(mean / norm)
    return ZeroShotHead(
        class_embeddings=np.stack(rows),
        class_order=list(class_names),
        templates=list(templates),
    )


# --- serialization ----------------------------------------------------------

def _write_matrix(path: Path, kind: int, mat: np.ndarray) -> None:
    with path.open("wb") as fh:
        fh.write(_HEAD_STRUCT.pack(_HEAD_MAGIC, _HEAD_VERSION, kind, *mat.shape))
        fh.write(np.asarray(mat, dtype="<f4").tobytes())


def _read_matrix(path: Path, expected_kind: int) -> np.ndarray:
    raw = path.read_bytes()
    magic, version, kind, rows, cols = _HEAD_STRUCT.unpack(raw[: _HEAD_STRUCT.size])
    if magic != _HEAD_MAGIC or version != _HEAD_VERSION or kind != expected_kind:
        raise EvalError(f"{path}: not a valid head file")
    mat = np.frombuffer(raw[_HEAD_STRUCT.size :], dtype="<f4")
    return mat.reshape(rows, cols).astype(np.float64)


def save_probe(probe: LinearProbe, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix(path, kind=1, mat=np.hstack([probe.weights, probe.bias[:, None]]))
    meta = {"class_order": probe.class_order, "trained_on": probe.trained_on}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta), encoding="utf-8")


def load_probe(path: str | Path) -> LinearProbe:
    path = Path(path)
    mat = _read_matrix(path, expected_kind=1)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return LinearProbe(
        weights=mat[:, :-1],
        bias=mat[:, -1],
        class_order=meta["class_order"],
        trained_on=meta.get("trained_on", {}),
    )


def save_zeroshot_head(head: ZeroShotHead, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix(path, kind=2, mat=head.class_embeddings)
    meta = {"class_order": head.class_order, "templates": head.templates}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta), encoding="utf-8")


def load_zeroshot_head(path: str | Path) -> ZeroShotHead:
    path = Path(path)
    mat = _read_matrix(path, expected_kind=2)
    # row norms can drift below 1e-6 through float32 storage; re-normalize
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return ZeroShotHead(
        class_embeddings=mat,
        class_order=meta["class_order"],
        templates=meta["templates"],
    )
