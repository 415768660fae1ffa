import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gist.embedding import (
    EmbeddingCache,
    EmbeddingVector,
    SyntheticBackend,
    content_hash,
    cosine_similarity,
    l2_normalize,
    make_backend,
)
from gist.errors import EmbeddingError


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = EmbeddingVector(values=rng.normal(size=16) * rng.uniform(0.1, 100))
        out = l2_normalize(v)
        assert abs(np.linalg.norm(out.values) - 1.0) < 1e-6
        assert out.normalized


def test_l2_normalize_zero_vector_errors():
    with pytest.raises(EmbeddingError):
        l2_normalize(EmbeddingVector(values=np.zeros(4)))


def test_cosine_scale_invariance():
    rng = np.random.default_rng(1)
    u = rng.normal(size=8)
    v = rng.normal(size=8)
    base = cosine_similarity(EmbeddingVector(values=u), EmbeddingVector(values=v))
    for scale in (1e-3, 0.5, 7.0, 1e4):
        scaled = cosine_similarity(
            EmbeddingVector(values=u * scale), EmbeddingVector(values=v)
        )
        assert abs(scaled - base) < 1e-6


@settings(deadline=None, max_examples=50)
@given(
    st.integers(2, 16),
    st.integers(0, 10_000),
    st.floats(min_value=1e-3, max_value=1e3),
)
def test_cosine_scale_invariance_property(d, seed, scale):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=d)
    v = rng.normal(size=d)
    a = cosine_similarity(EmbeddingVector(values=u), EmbeddingVector(values=v))
    b = cosine_similarity(
        EmbeddingVector(values=u * scale), EmbeddingVector(values=v * scale)
    )
    assert abs(a - b) < 1e-6
    assert -1.0 <= a <= 1.0


def test_synthetic_backend_deterministic(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("some image content")
    a = SyntheticBackend(d=16, seed=0)
    b = SyntheticBackend(d=16, seed=0)
    va = a.encode_images([p])[0]
    vb = b.encode_images([p])[0]
    np.testing.assert_array_equal(va.values, vb.values)
    c = SyntheticBackend(d=16, seed=1)
    assert not np.allclose(c.encode_images([p])[0].values, va.values)


def test_synthetic_backend_class_marker_correlation():
    backend = SyntheticBackend(d=64, seed=0, text_class_signal=2.0)
    same = backend.encode_texts(
        ["[class:melanoma] lesion one", "[class:melanoma] lesion two"]
    )
    other = backend.encode_texts(["[class:psoriasis] plaque"])[0]
    within = cosine_similarity(same[0], same[1])
    across = cosine_similarity(same[0], other)
    assert within > across + 0.2


def test_make_backend_dispatch():
    assert isinstance(make_backend("synthetic-d32"), SyntheticBackend)


def test_content_hash_stable():
    assert content_hash("abc") == content_hash(b"abc")
    assert content_hash("abc") != content_hash("abd")


def test_embedding_cache_roundtrip(tmp_path):
    cache = EmbeddingCache(tmp_path, model_id="synthetic-test", d=8)
    vec = l2_normalize(EmbeddingVector(values=np.arange(1.0, 9.0)))
    digest = content_hash("payload")
    assert cache.get("image", digest) is None
    cache.put("image", digest, vec)
    got = cache.get("image", digest)
    np.testing.assert_allclose(got.values, vec.values, atol=1e-7)
    # A fresh handle reads the same entry back from disk.
    again = EmbeddingCache(tmp_path, model_id="synthetic-test", d=8)
    assert again.get("image", digest) is not None
    # Text and image namespaces do not collide.
    assert cache.get("text", digest) is None


def test_embedding_cache_corruption_is_a_miss(tmp_path):
    cache = EmbeddingCache(tmp_path, model_id="m", d=4)
    vec = l2_normalize(EmbeddingVector(values=np.ones(4)))
    cache.put("image", content_hash("x"), vec)
    for f in tmp_path.rglob("vectors.bin"):
        f.write_bytes(b"garbage")
    reopened = EmbeddingCache(tmp_path, model_id="m", d=4)
    assert reopened.get("image", content_hash("x")) is None
