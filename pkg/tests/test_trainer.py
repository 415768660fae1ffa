import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_toy_captions, build_toy_manifest
from gist.embedding import SyntheticBackend
from gist.errors import TrainError
from gist.matcher import build_pair_dataset
from gist.trainer import (
    TrainConfig,
    TrainableProjectionBackend,
    contrastive_loss,
    contrastive_loss_and_grads,
    finetune,
    sample_epoch_batches,
)


def _unit_rows(rng, b, d):
    mat = rng.normal(size=(b, d))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _oracle_loss(U, V, scale):
    """Independent formulation: two standard cross-entropy terms computed
    row by row with plain softmax."""
    logits = scale * (U @ V.T)
    total = 0.0
    B = U.shape[0]
    for i in range(B):
        row = logits[i]
        total += -(row[i] - math.log(np.exp(row - row.max()).sum()) - row.max())
        col = logits[:, i]
        total += -(col[i] - math.log(np.exp(col - col.max()).sum()) - col.max())
    return total


def test_loss_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        B = int(rng.integers(1, 17))
        d = int(rng.integers(2, 33))
        scale = float(rng.uniform(0.5, 50.0))
        U = _unit_rows(rng, B, d)
        V = _unit_rows(rng, B, d)
        assert abs(contrastive_loss(U, V, scale) - _oracle_loss(U, V, scale)) < 1e-6


def test_loss_single_pair_is_zero():
    rng = np.random.default_rng(1)
    U = _unit_rows(rng, 1, 8)
    V = _unit_rows(rng, 1, 8)
    assert contrastive_loss(U, V, 100.0) == 0.0


def test_loss_two_pair_identity_case():
    # Orthogonal matched pairs with unit logit scale: every softmax
    # reduces to log(1 + e^{-1}) and four terms accumulate.
    U = np.eye(2)
    V = np.eye(2)
    expected = 4.0 * math.log(1.0 + math.exp(-1.0))
    assert abs(contrastive_loss(U, V, 1.0) - expected) < 1e-6
    assert expected == pytest.approx(1.2530, abs=1e-4)


def test_loss_rejects_unnormalized_rows():
    rng = np.random.default_rng(2)
    U = _unit_rows(rng, 3, 4) * 2.0
    V = _unit_rows(rng, 3, 4)
    with pytest.raises(TrainError):
        contrastive_loss(U, V, 1.0)


def _finite_difference(U, V, scale, step=1e-4):
    dU = np.zeros_like(U)
    dV = np.zeros_like(V)
    for mat, grad in ((U, dU), (V, dV)):
        it = np.nditer(mat, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = mat[idx]
            mat[idx] = orig + step
            up = _renorm_loss(U, V, scale)
            mat[idx] = orig - step
            down = _renorm_loss(U, V, scale)
            mat[idx] = orig
            grad[idx] = (up - down) / (2 * step)
            it.iternext()
    up = contrastive_loss(U, V, scale + step)
    down = contrastive_loss(U, V, scale - step)
    return dU, dV, (up - down) / (2 * step)


def _renorm_loss(U, V, scale):
    # Perturbed rows lose unit norm; evaluate the raw objective directly.
    logits = scale * (U @ V.T)
    B = U.shape[0]
    total = 0.0
    for i in range(B):
        row = logits[i]
        total += -row[i] + row.max() + math.log(np.exp(row - row.max()).sum())
        col = logits[:, i]
        total += -col[i] + col.max() + math.log(np.exp(col - col.max()).sum())
    return total


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        U = _unit_rows(rng, 3, 4)
        V = _unit_rows(rng, 3, 4)
        scale = float(rng.uniform(0.5, 20.0))
        _, dU, dV, dscale = contrastive_loss_and_grads(U, V, scale)
        nU, nV, nscale = _finite_difference(U.copy(), V.copy(), scale)
        for analytic, numeric in ((dU, nU), (dV, nV)):
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(rel))
        worst = max(worst, abs(dscale - nscale) / max(abs(nscale), 1e-8))
    assert worst < 1e-4


@settings(deadline=None, max_examples=30)
@given(st.integers(2, 8), st.integers(2, 16), st.integers(0, 10_000))
def test_loss_oracle_property(B, d, seed):
    rng = np.random.default_rng(seed)
    U = _unit_rows(rng, B, d)
    V = _unit_rows(rng, B, d)
    assert abs(contrastive_loss(U, V, 10.0) - _oracle_loss(U, V, 10.0)) < 1e-6


def _toy_pairs(tmp_path, classes=3, train=4, per_class=4, seed=0):
    man = build_toy_manifest(tmp_path, classes=classes, per_split=(train, 1, 1), seed=seed)
    store = build_toy_captions(list(man.classes), per_class=per_class)
    backend = SyntheticBackend(
        d=16, seed=seed, image_class_signal=0.5, text_class_signal=2.0
    )
    pairs = build_pair_dataset(man, store, backend, n=2)
    return man, backend, pairs


def test_epoch_batches_cover_each_image_once(tmp_path):
    _, _, pairs = _toy_pairs(tmp_path)
    batches = sample_epoch_batches(pairs, batch_size=4, epoch_seed=1)
    seen = [i for b in batches for i in b.image_ids]
    assert len(seen) == len(set(seen)) == 12
    for b in batches:
        for img, cap in zip(b.image_ids, b.caption_ids):
            assert cap in pairs.captions_for(img)


def test_epoch_batches_drop_partial_and_are_deterministic(tmp_path):
    _, _, pairs = _toy_pairs(tmp_path)
    batches = sample_epoch_batches(pairs, batch_size=5, epoch_seed=2)
    assert all(len(b.image_ids) == 5 for b in batches)
    assert len(batches) == 2  # 12 images, final partial batch of 2 dropped
    again = sample_epoch_batches(pairs, batch_size=5, epoch_seed=2)
    assert [b.image_ids for b in batches] == [b.image_ids for b in again]
    other = sample_epoch_batches(pairs, batch_size=5, epoch_seed=3)
    assert [b.image_ids for b in batches] != [b.image_ids for b in other]


def test_epoch_batches_reject_oversized_batch(tmp_path):
    _, _, pairs = _toy_pairs(tmp_path)
    with pytest.raises(TrainError):
        sample_epoch_batches(pairs, batch_size=13, epoch_seed=0)


def test_projection_backend_identity_init_preserves_base(tmp_path):
    man, backend, _ = _toy_pairs(tmp_path)
    proj = TrainableProjectionBackend(backend, out_dim=None, seed=0)
    paths = [r.path for r in man.records[:3]]
    base = backend.encode_images(paths)
    wrapped = proj.encode_images(paths)
    for b, w in zip(base, wrapped):
        np.testing.assert_allclose(w.values, b.values, atol=1e-12)


def test_finetune_zero_epochs_is_identity(tmp_path):
    man, backend, pairs = _toy_pairs(tmp_path)
    proj = TrainableProjectionBackend(backend, seed=0)
    tuned, log = finetune(proj, pairs, TrainConfig(batch_size=4, epochs=0), man)
    np.testing.assert_array_equal(tuned.weights["w_img"], proj.weights["w_img"])
    assert log.steps == []


def test_finetune_reduces_loss_and_is_deterministic(tmp_path):
    man, backend, pairs = _toy_pairs(tmp_path)
    cfg = TrainConfig(
        batch_size=6, epochs=8, learning_rate=1e-3, weight_decay=0.0,
        optimizer="adamw", logit_scale_init=10.0, logit_scale_learnable=False,
        seed=0,
    )
    tuned_a, log_a = finetune(TrainableProjectionBackend(backend, seed=0), pairs, cfg, man)
    tuned_b, log_b = finetune(TrainableProjectionBackend(backend, seed=0), pairs, cfg, man)
    assert [s["loss_mean"] for s in log_a.steps] == [s["loss_mean"] for s in log_b.steps]
    np.testing.assert_array_equal(
        tuned_a.weights["w_img"], tuned_b.weights["w_img"]
    )
    first_epoch = [s["loss_mean"] for s in log_a.steps if s["epoch"] == 0]
    last_epoch = [s["loss_mean"] for s in log_a.steps if s["epoch"] == 7]
    assert np.mean(last_epoch) < np.mean(first_epoch)


def test_finetune_learnable_scale_stays_positive(tmp_path):
    man, backend, pairs = _toy_pairs(tmp_path)
    cfg = TrainConfig(
        batch_size=6, epochs=3, learning_rate=1e-2,
        logit_scale_init=0.01, logit_scale_learnable=True, seed=0,
    )
    tuned, _ = finetune(TrainableProjectionBackend(backend, seed=0), pairs, cfg, man)
    assert tuned.logit_scale >= 1e-3
