"""Contrastive fine-tuning of the encoder pair on image-caption pairs.

The objective is the symmetric sum of two cross-entropy terms over the
batch similarity logits s_ij = logit_scale * (image_i . text_j): one
softmax per image row and one per text column, both with diagonal
targets. Gradients are analytic and checked against finite differences
in the test suite.

Fine-tuning trains linear projection heads over a (frozen) base backend;
this is what updates the encoder pair at desk scale, and the trained
projections apply on top of any backend kind.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import BackendDescriptor, EmbeddingVector
from .errors import TrainError
from .manifest import DatasetManifest
from .matcher import PairDataset

OPTIMIZERS = ("sgd-momentum", "adamw")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    logit_scale_init: float = 10.0
    logit_scale_learnable: bool = True
    seed: int = 0
    precision: str = "fp32"
    select_by_val: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainError(f"optimizer must be one of {OPTIMIZERS}")
        if self.precision not in ("fp32", "mixed"):
            raise TrainError(f"precision must be 'fp32' or 'mixed'")


@dataclass(frozen=True)
class TrainBatch:
    image_ids: tuple[str, ...]
    caption_ids: tuple[str, ...]

    def __post_init__(self):
        if len(self.image_ids) != len(self.caption_ids):
            raise TrainError("image_ids and caption_ids must pair positionally")


def _check_embeddings(image_embs: np.ndarray, text_embs: np.ndarray, logit_scale: float):
    image_embs = np.asarray(image_embs, dtype=np.float64)
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if image_embs.shape != text_embs.shape or image_embs.ndim != 2:
        raise TrainError(
            f"expected matching BxD matrices, got {image_embs.shape} and {text_embs.shape}"
        )
    if image_embs.shape[0] < 1:
        raise TrainError("batch must contain at least one pair")
    if logit_scale <= 0:
        raise TrainError(f"logit_scale must be positive, got {logit_scale}")
    for name, mat in (("image", image_embs), ("text", text_embs)):
        norms = np.linalg.norm(mat, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-3:
            raise TrainError(f"{name} embeddings are not L2-normalized")
    return image_embs, text_embs


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def contrastive_loss(
    image_embs: np.ndarray, text_embs: np.ndarray, logit_scale: float = 1.0
) -> float:
    """Symmetric contrastive loss (sum form) over one batch.

    Inputs must be L2-normalized BxD matrices. Returns the sum of the
    image-to-text and text-to-image cross-entropy terms.
    """
    U, V = _check_embeddings(image_embs, text_embs, logit_scale)
    logits = logit_scale * (U @ V.T)
    if not np.all(np.isfinite(logits)):
        raise TrainError("non-finite similarity logits")
    diag = np.arange(U.shape[0])
    loss = -np.sum(_log_softmax(logits, axis=1)[diag, diag])
    loss += -np.sum(_log_softmax(logits, axis=0)[diag, diag])
    return float(loss)


def contrastive_loss_and_grads(
    image_embs: np.ndarray, text_embs: np.ndarray, logit_scale: float = 1.0
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss plus analytic gradients w.r.t. both embedding matrices and the
    logit scale."""
    U, V = _check_embeddings(image_embs, text_embs, logit_scale)
    B = U.shape[0]
    sims = U @ V.T
    logits = logit_scale * sims
    if not np.all(np.isfinite(logits)):
        raise TrainError("non-finite similarity logits")
    diag = np.arange(B)
    log_p_row = _log_softmax(logits, axis=1)
    log_p_col = _log_softmax(logits, axis=0)
    loss = float(-np.sum(log_p_row[diag, diag]) - np.sum(log_p_col[diag, diag]))
    eye = np.eye(B)
    g_logits = (np.exp(log_p_row) - eye) + (np.exp(log_p_col) - eye)
    grad_u = logit_scale * (g_logits @ V)
    grad_v = logit_scale * (g_logits.T @ U)
    grad_scale = float(np.sum(g_logits * sims))
    return loss, grad_u, grad_v, grad_scale


def sample_epoch_batches(
    pairs: PairDataset, batch_size: int, epoch_seed: int
) -> list[TrainBatch]:
    """One epoch's batches: every image appears exactly once with one
    caption drawn uniformly from its matched set; image order is shuffled
    per epoch; a final partial batch is dropped."""
    if not pairs.pairs:
        raise TrainError("pair dataset is empty")
    image_ids = pairs.image_ids()
    if batch_size > len(image_ids):
        raise TrainError(
            f"batch_size {batch_size} exceeds image count {len(image_ids)}"
        )
    options: dict[str, list[str]] = {}
    for image_id, caption_id in pairs.pairs:
        options.setdefault(image_id, []).append(caption_id)
    rng = np.random.default_rng(np.random.SeedSequence([epoch_seed]))
    order = rng.permutation(len(image_ids))
    chosen: list[tuple[str, str]] = []
    for idx in order:
        image_id = image_ids[idx]
        caps = options[image_id]
        chosen.append((image_id, caps[rng.integers(len(caps))]))
    batches = []
    for start in range(0, len(chosen) - batch_size + 1, batch_size):
        chunk = chosen[start : start + batch_size]
        batches.append(
            TrainBatch(
                image_ids=tuple(i for i, _ in chunk),
                caption_ids=tuple(c for _, c in chunk),
            )
        )
    return batches


class _SGDMomentum:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
        for key, p in params.items():
            g = grads[key] + weight_decay * p
            v = self._velocity.get(key)
            v = g if v is None else self.momentum * v + g
            self._velocity[key] = v
            params[key] = p - lr * v


class _AdamW:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
        self._t += 1
        for key, p in params.items():
            g = grads[key]
            m = self._m.get(key, np.zeros_like(p))
            v = self._v.get(key, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[key], self._v[key] = m, v
            m_hat = m / (1 - self.beta1**self._t)
            v_hat = v / (1 - self.beta2**self._t)
            params[key] = p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + weight_decay * p)


class TrainableProjectionBackend:
    """Encoder pair with trainable linear projection heads over a frozen
    base backend. With identity-initialized square projections the initial
    encoders reproduce the base backend exactly."""

    kind = "trainable-projection"

    def __init__(self, base, out_dim: int | None = None, seed: int = 0,
                 logit_scale: float = 10.0):
        self.base = base
        d = base.d if hasattr(base, "d") else base.descriptor.d
        self.in_dim = d
        self.out_dim = out_dim or d
        self.logit_scale = float(logit_scale)
        self.model_id = f"{base.model_id}+proj{self.out_dim}"
        if self.out_dim == self.in_dim:
            w_img = np.eye(d)
            w_txt = np.eye(d)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, d, self.out_dim]))
            w_img = rng.standard_normal((d, self.out_dim)) / np.sqrt(d)
            w_txt = rng.standard_normal((d, self.out_dim)) / np.sqrt(d)
        self.weights = {"w_img": w_img, "w_txt": w_txt}

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(self.model_id, self.out_dim, trainable=True, kind=self.kind)

    def clone(self) -> "TrainableProjectionBackend":
        dup = TrainableProjectionBackend(
            self.base, out_dim=self.out_dim, logit_scale=self.logit_scale
        )
        dup.weights = {k: v.copy() for k, v in self.weights.items()}
        return dup

    def base_image_features(self, paths: Sequence) -> np.ndarray:
        vecs = self.base.encode_images(paths)
        return np.stack([v.values for v in vecs]) if vecs else np.zeros((0, self.in_dim))

    def base_text_features(self, texts: Sequence[str]) -> np.ndarray:
        vecs = self.base.encode_texts(texts)
        return np.stack([v.values for v in vecs]) if vecs else np.zeros((0, self.in_dim))

    def _wrap(self, mat: np.ndarray, source: str) -> list[EmbeddingVector]:
        return [
            EmbeddingVector(row, normalized=False, source=source, model_id=self.model_id)
            for row in mat
        ]

    def encode_images(self, paths: Sequence) -> list[EmbeddingVector]:
        return self._wrap(self.base_image_features(paths) @ self.weights["w_img"], "image")

    def encode_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return self._wrap(self.base_text_features(texts) @ self.weights["w_txt"], "text")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    diverged: bool = False
    best_val_acc: float | None = None
    selected_epoch: int | None = None


def _normalize_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise TrainError("zero vector encountered during fine-tuning forward pass")
    return mat / norms, norms


def _backprop_through_norm(grad_unit: np.ndarray, unit: np.ndarray,
                           norms: np.ndarray) -> np.ndarray:
    # d/dz of z/||z|| applied to upstream gradient
    inner = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - inner * unit) / norms


def _val_probe_accuracy(backend: TrainableProjectionBackend,
                        manifest: DatasetManifest, seed: int) -> float:
    from . import classifier

    train = manifest.split_records("train")
    val = manifest.split_records("val")
    classes = list(manifest.classes)
    train_embs = np.stack([v.values for v in backend.encode_images([r.path for r in train])])
    val_embs = np.stack([v.values for v in backend.encode_images([r.path for r in val])])
    cfg = classifier.ProbeConfig(epochs=100, seed=seed)
    probe = classifier.train_linear_probe(
        train_embs, [r.label for r in train], classes, cfg
    )
    scores = val_embs @ probe.weights.T + probe.bias
    preds = np.argmax(scores, axis=1)
    truth = np.array([classes.index(r.label) for r in val])
    return float(np.mean(preds == truth))


def finetune(
    backend: TrainableProjectionBackend,
    pairs: PairDataset,
    config: TrainConfig,
    manifest: DatasetManifest,
) -> tuple[TrainableProjectionBackend, TrainLog]:
    """Fine-tune the projection heads on the pair dataset.

    Base features are computed once (the base encoders stay frozen).
    Learning rate follows cosine decay over the run. With
    select_by_val=True and a non-empty val split, the checkpoint with the
    best validation linear-probe accuracy is returned; otherwise the
    final weights are. epochs=0 returns the encoders unchanged.
    """
    if not pairs.pairs:
        raise TrainError("pair dataset is empty")
    out = backend.clone()
    out.logit_scale = float(config.logit_scale_init)
    log = TrainLog()
    if config.epochs == 0:
        return out, log

    dtype = np.float32 if config.precision == "mixed" else np.float64
    by_id = {r.image_id: r for r in manifest.records}
    image_ids = pairs.image_ids()
    missing = [i for i in image_ids if i not in by_id]
    if missing:
        raise TrainError(f"pair dataset references unknown images: {missing[:3]}")
    img_feats = out.base_image_features([by_id[i].path for i in image_ids]).astype(dtype)
    img_index = {image_id: row for row, image_id in enumerate(image_ids)}
    caption_ids = sorted(pairs.texts)
    txt_feats = out.base_text_features([pairs.texts[c] for c in caption_ids]).astype(dtype)
    txt_index = {caption_id: row for row, caption_id in enumerate(caption_ids)}

    optimizer = _AdamW() if config.optimizer == "adamw" else _SGDMomentum()
    params = {k: v.astype(dtype) for k, v in out.weights.items()}
    if config.logit_scale_learnable:
        params["logit_scale"] = np.array([out.logit_scale], dtype=dtype)

    steps_per_epoch = max(1, len(image_ids) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    best_weights = None
    for epoch in range(config.epochs):
        epoch_seed = int(np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])).integers(2**31))
        batches = sample_epoch_batches(pairs, config.batch_size, epoch_seed)
        snapshot = ({k: v.copy() for k, v in params.items()}, copy.deepcopy(optimizer))
        for batch in batches:
            X = img_feats[[img_index[i] for i in batch.image_ids]]
            Tm = txt_feats[[txt_index[c] for c in batch.caption_ids]]
            Zi = X @ params["w_img"]
            Zt = Tm @ params["w_txt"]
            Ui, norm_i = _normalize_rows(Zi)
            Ut, norm_t = _normalize_rows(Zt)
            scale = float(params["logit_scale"][0]) if config.logit_scale_learnable \
                else out.logit_scale
            try:
                loss, grad_u, grad_v, grad_scale = contrastive_loss_and_grads(Ui, Ut, scale)
            except TrainError:
                log.diverged = True
                params, optimizer = snapshot
                break
            if not np.isfinite(loss):
                log.diverged = True
                params, optimizer = snapshot
                break
            grads = {
                "w_img": X.T @ _backprop_through_norm(grad_u, Ui, norm_i),
                "w_txt": Tm.T @ _backprop_through_norm(grad_v, Ut, norm_t),
            }
            if config.logit_scale_learnable:
                grads["logit_scale"] = np.array([grad_scale], dtype=dtype)
            lr = config.learning_rate * 0.5 * (1 + np.cos(np.pi * step / max(1, total_steps)))
            optimizer.step(params, grads, lr, config.weight_decay)
            if config.logit_scale_learnable:
                params["logit_scale"] = np.maximum(params["logit_scale"], 1e-3)
            log.steps.append({
                "step": step,
                "epoch": epoch,
                "loss_sum": float(loss),
                "loss_mean": float(loss) / len(batch.image_ids),
                "logit_scale": scale,
                "lr": float(lr),
            })
            step += 1
        if log.diverged:
            break
        if config.select_by_val and manifest.split_records("val"):
            out.weights = {"w_img": np.asarray(params["w_img"], dtype=np.float64),
                           "w_txt": np.asarray(params["w_txt"], dtype=np.float64)}
            acc = _val_probe_accuracy(out, manifest, config.seed)
            if log.best_val_acc is None or acc > log.best_val_acc:
                log.best_val_acc = acc
                log.selected_epoch = epoch
                best_weights = {k: v.copy() for k, v in params.items() if k != "logit_scale"}

    if best_weights is not None:
        final = best_weights
    else:
        final = {k: v for k, v in params.items() if k != "logit_scale"}
    out.weights = {k: np.asarray(v, dtype=np.float64) for k, v in final.items()}
    if config.logit_scale_learnable and "logit_scale" in params:
        out.logit_scale = float(params["logit_scale"][0])
    return out, log
