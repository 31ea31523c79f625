import json

import numpy as np
import pytest

from novocap.errors import DataError, NumericError
from novocap.features import (
    CategoryRecord,
    ImageRecord,
    compute_prototype,
    ingest_dataset_file,
    ingest_feature_file,
    read_category_file,
    write_category_file,
    write_dataset_file,
    write_feature_file,
)
from novocap.numerics import SeededRng


def test_prototype_of_singleton():
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(compute_prototype([v]), v)


def test_prototype_mean():
    out = compute_prototype([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert out.tolist() == [0.5, 0.5]


def test_prototype_matches_two_pass_oracle():
    rng = SeededRng(9)
    samples = [rng.normal(6) for _ in range(50)]
    proto = compute_prototype(samples)
    # independent summation order: accumulate column-wise over a stacked array
    stacked = np.stack(samples)
    oracle = stacked.sum(axis=0) / 50.0
    assert np.allclose(proto, oracle, atol=1e-12, rtol=0)


def test_prototype_permutation_invariant_exactly():
    rng = SeededRng(10)
    samples = [rng.normal(5) for _ in range(17)]
    a = compute_prototype(samples)
    b = compute_prototype(list(reversed(samples)))
    assert np.array_equal(a, b)


def test_prototype_normalize_flag():
    out = compute_prototype([np.array([3.0, 4.0])], normalize=True)
    assert np.allclose(out, [0.6, 0.8])


def test_prototype_errors():
    with pytest.raises(DataError):
        compute_prototype([])
    with pytest.raises(NumericError):
        compute_prototype([np.zeros(2), np.zeros(3)])


def test_ingest_feature_file_single(tmp_path):
    path = tmp_path / "f.jsonl"
    path.write_text(
        json.dumps(
            {"name": "drone", "singular": "drone", "plural": "drones", "samples": [[1, 2, 3]]}
        )
        + "\n"
    )
    recs = ingest_feature_file(path)
    assert len(recs) == 1
    assert recs[0].prototype.tolist() == [1.0, 2.0, 3.0]
    assert recs[0].sample_count == 1


def test_ingest_feature_file_sample_count(tmp_path):
    path = tmp_path / "f.jsonl"
    samples = [[float(i), 0.0] for i in range(5)]
    path.write_text(
        json.dumps({"name": "x", "singular": "x", "plural": "xs", "samples": samples}) + "\n"
    )
    assert ingest_feature_file(path)[0].sample_count == 5


def test_ingest_feature_file_truncated_line_atomic(tmp_path):
    path = tmp_path / "f.jsonl"
    good = json.dumps({"name": "a", "singular": "a", "plural": "as", "samples": [[1.0]]})
    path.write_text(good + "\n" + good[: len(good) // 2] + "\n")
    with pytest.raises(DataError) as err:
        ingest_feature_file(path)
    assert ":2" in str(err.value)


def test_ingest_feature_file_dimension_mismatch(tmp_path):
    path = tmp_path / "f.jsonl"
    path.write_text(
        json.dumps({"name": "a", "singular": "a", "plural": "as", "samples": [[1.0], [1.0, 2.0]]})
        + "\n"
    )
    with pytest.raises(DataError) as err:
        ingest_feature_file(path)
    assert ":1" in str(err.value)


def test_dataset_roundtrip(tmp_path):
    rng = SeededRng(4)
    records = [
        ImageRecord(
            image_id=f"img-{i}",
            feature=rng.normal(3),
            tags=(("zebra", True), ("desk", False)) if i % 2 else (),
            captions=("two zebras", "a desk") if i % 2 else (),
        )
        for i in range(4)
    ]
    path = tmp_path / "d.jsonl"
    write_dataset_file(path, records)
    back = ingest_dataset_file(path)
    assert len(back) == 4
    for a, b in zip(records, back):
        assert a.image_id == b.image_id
        assert np.array_equal(a.feature, b.feature)
        assert a.tags == b.tags
        assert a.captions == b.captions


def test_dataset_plurality_flag_propagates(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(
        json.dumps(
            {
                "image_id": "i0",
                "feature": [0.0, 1.0],
                "tags": [{"category": "zebra", "plural": True}],
                "captions": [],
            }
        )
        + "\n"
    )
    rec = ingest_dataset_file(path)[0]
    assert rec.tags == (("zebra", True),)
    assert rec.captions == ()


def test_category_file_roundtrip(tmp_path):
    cats = [
        CategoryRecord("hot dog", "hot dog", "hot dogs", np.zeros(2), 1, "known"),
        CategoryRecord("fern", "fern", "ferns", np.zeros(2), 1, "novel"),
    ]
    path = tmp_path / "c.jsonl"
    write_category_file(path, cats)
    assert read_category_file(path) == [
        ("hot dog", "hot dog", "hot dogs"),
        ("fern", "fern", "ferns"),
    ]


def test_feature_file_roundtrip_bitexact(tmp_path):
    rng = SeededRng(3)
    cats = [CategoryRecord("a", "a", "as", np.zeros(3), 1, "novel")]
    samples = {"a": [rng.normal(3) for _ in range(4)]}
    path = tmp_path / "f.jsonl"
    write_feature_file(path, cats, samples)
    rec = ingest_feature_file(path)[0]
    assert np.array_equal(rec.prototype, compute_prototype(samples["a"]))


def test_missing_file_errors():
    with pytest.raises(DataError):
        ingest_dataset_file("/nonexistent/x.jsonl")
