import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_toy_manifest, random_unit_vectors, unit
from gist.errors import ManifestError
from gist.manifest import (
    DatasetManifest,
    DuplicatePair,
    ImageRecord,
    KShotSpec,
    find_near_duplicates,
    load_manifest,
    resolve_split_leakage,
    sample_kshot,
    save_manifest,
)


def test_empty_manifest_is_valid():
    man = DatasetManifest(name="empty", classes=["a", "b"], records=[])
    assert man.split_counts() == {"train": 0, "val": 0, "test": 0}


def test_unknown_label_rejected_with_record_named():
    rec = ImageRecord(image_id="x1", path="/tmp/x1", label="zz", split="train")
    with pytest.raises(ManifestError, match="x1"):
        DatasetManifest(name="bad", classes=["a"], records=[rec])


def test_duplicate_image_id_rejected():
    recs = [
        ImageRecord(image_id="x1", path="/p1", label="a", split="train"),
        ImageRecord(image_id="x1", path="/p2", label="a", split="test"),
    ]
    with pytest.raises(ManifestError, match="x1"):
        DatasetManifest(name="bad", classes=["a"], records=recs)


def test_save_load_roundtrip(tmp_path):
    man = build_toy_manifest(tmp_path, classes=3, per_split=(2, 1, 1))
    path = tmp_path / "manifest.jsonl"
    save_manifest(man, path)
    loaded = load_manifest(path)
    assert list(loaded.classes) == list(man.classes)
    assert loaded.records == man.records
    # Class order must survive the round trip byte-for-byte.
    save_manifest(loaded, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_load_rejects_bad_label_row(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"name": "x", "classes": ["a"]}\n'
        '{"image_id": "r1", "path": "/p", "label": "nope", "split": "train"}\n'
    )
    with pytest.raises(ManifestError, match="r1"):
        load_manifest(path)


def test_kshot_exact_counts(tmp_path):
    man = build_toy_manifest(tmp_path, classes=5, per_split=(6, 2, 2))
    for k in (1, 3, 5):
        out = sample_kshot(man, KShotSpec(k=k, seed=0))
        counts = {}
        for rec in out.split_records("train"):
            counts[rec.label] = counts.get(rec.label, 0) + 1
        assert all(v == k for v in counts.values())
        assert len(counts) == 5
        # Val and test untouched.
        assert out.split_records("val") == man.split_records("val")
        assert out.split_records("test") == man.split_records("test")


def test_kshot_deterministic(tmp_path):
    man = build_toy_manifest(tmp_path, classes=4, per_split=(8, 0, 0))
    a = sample_kshot(man, KShotSpec(k=3, seed=7))
    b = sample_kshot(man, KShotSpec(k=3, seed=7))
    assert a.records == b.records
    c = sample_kshot(man, KShotSpec(k=3, seed=8))
    assert a.records != c.records


def test_kshot_underpopulated_errors_and_clamps(tmp_path):
    man = build_toy_manifest(tmp_path, classes=3, per_split=(2, 0, 1))
    with pytest.raises(ManifestError, match="class00"):
        sample_kshot(man, KShotSpec(k=5, seed=0))
    out = sample_kshot(man, KShotSpec(k=5, seed=0, clamp=True))
    assert len(out.split_records("train")) == 6


def test_kshot_per_class_substream_stability(tmp_path):
    # Dropping one class must not change another class's draw.
    man = build_toy_manifest(tmp_path, classes=4, per_split=(8, 0, 0))
    full = sample_kshot(man, KShotSpec(k=2, seed=3))
    kept = [r for r in man.records if r.label != "class03"]
    sub = DatasetManifest(
        name=man.name,
        classes=[c for c in man.classes if c != "class03"],
        records=kept,
    )
    partial = sample_kshot(sub, KShotSpec(k=2, seed=3))
    full_ids = {r.image_id for r in full.split_records("train") if r.label == "class01"}
    part_ids = {r.image_id for r in partial.split_records("train") if r.label == "class01"}
    assert full_ids == part_ids


def test_duplicates_identical_and_orthogonal():
    v = unit([1.0, 0.0, 0.0])
    w = unit([0.0, 1.0, 0.0])
    pairs = find_near_duplicates({"a": v, "b": v}, threshold=0.95605)
    assert len(pairs) == 1
    assert pairs[0].id_a == "a" and pairs[0].id_b == "b"
    assert pairs[0].similarity == pytest.approx(1.0)
    assert find_near_duplicates({"a": v, "b": w}, threshold=0.95605) == []


def test_duplicates_match_bruteforce_oracle():
    vecs = random_unit_vectors(20, 8, seed=11)
    emb = {f"v{i:02d}": v for i, v in enumerate(vecs)}
    got = {(p.id_a, p.id_b) for p in find_near_duplicates(emb, threshold=0.9)}
    ids = sorted(emb)
    expected = set()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            sim = float(np.dot(emb[ids[i]].values, emb[ids[j]].values))
            if sim >= 0.9:
                expected.add((ids[i], ids[j]))
    assert got == expected


def test_duplicates_sorted_desc_similarity():
    rng = np.random.default_rng(5)
    base = unit(rng.normal(size=6))
    emb = {"base": base}
    for i in range(6):
        mixed = base.values + rng.normal(size=6) * 0.02 * (i + 1)
        emb[f"near{i}"] = unit(mixed)
    pairs = find_near_duplicates(emb, threshold=0.5)
    sims = [p.similarity for p in pairs]
    assert sims == sorted(sims, reverse=True)


def test_duplicates_dimension_mismatch():
    with pytest.raises(ManifestError):
        find_near_duplicates({"a": unit([1, 0]), "b": unit([1, 0, 0])}, 0.9)


@settings(deadline=None, max_examples=30)
@given(st.integers(2, 40), st.integers(2, 12), st.integers(0, 10_000))
def test_duplicates_bruteforce_property(n, d, seed):
    vecs = random_unit_vectors(n, d, seed=seed)
    emb = {f"v{i:03d}": v for i, v in enumerate(vecs)}
    got = {(p.id_a, p.id_b) for p in find_near_duplicates(emb, threshold=0.8)}
    ids = sorted(emb)
    expected = {
        (ids[i], ids[j])
        for i in range(n)
        for j in range(i + 1, n)
        if float(np.dot(emb[ids[i]].values, emb[ids[j]].values)) >= 0.8
    }
    assert got == expected


def _leak_manifest(tmp_path):
    man = build_toy_manifest(tmp_path, classes=2, per_split=(2, 1, 2))
    return man


def test_leakage_moves_both_to_train(tmp_path):
    man = _leak_manifest(tmp_path)
    # i00_03 is a test record, i00_00 a train record.
    pairs = [DuplicatePair(id_a="i00_00", id_b="i00_03", similarity=0.99)]
    out = resolve_split_leakage(man, pairs)
    by_id = out.by_id()
    assert by_id["i00_00"].split == "train"
    assert by_id["i00_03"].split == "train"
    assert len(out.records) == len(man.records)


def test_leakage_empty_pairs_identity(tmp_path):
    man = _leak_manifest(tmp_path)
    assert resolve_split_leakage(man, []).records == man.records


def test_leakage_idempotent(tmp_path):
    man = _leak_manifest(tmp_path)
    pairs = [
        DuplicatePair(id_a="i00_02", id_b="i00_04", similarity=0.97),
        DuplicatePair(id_a="i01_03", id_b="i01_01", similarity=0.98),
    ]
    once = resolve_split_leakage(man, pairs)
    twice = resolve_split_leakage(once, pairs)
    assert once.records == twice.records
    # No pair may still span test and another split.
    by_id = once.by_id()
    for p in pairs:
        splits = {by_id[p.id_a].split, by_id[p.id_b].split}
        assert not ("test" in splits and len(splits) > 1)


def test_leakage_unknown_id_errors(tmp_path):
    man = _leak_manifest(tmp_path)
    with pytest.raises(ManifestError, match="ghost"):
        resolve_split_leakage(man, [DuplicatePair("ghost", "i00_00", 0.99)])
