"""Category prototypes and precomputed feature ingestion.

Pixel-level extraction is out of scope: categories and images arrive as
feature vectors in newline-delimited JSON files, one record per line.

Feature file record:   {"name", "singular", "plural", "samples": [[...], ...]}
Dataset file record:   {"image_id", "feature": [...],
                        "tags": [{"category", "plural": bool}, ...],
                        "captions": [...]}
Category list record:  {"name", "singular", "plural"}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericError

STATUS_KNOWN = "known"
STATUS_NOVEL = "novel"


@dataclass
class CategoryRecord:
    name: str
    singular: str
    plural: str
    prototype: np.ndarray
    sample_count: int
    status: str = STATUS_KNOWN


@dataclass
class ImageRecord:
    image_id: str
    feature: np.ndarray
    tags: Tuple[Tuple[str, bool], ...] = ()
    captions: Tuple[str, ...] = ()


def compute_prototype(samples: Sequence[np.ndarray], normalize: bool = False) -> np.ndarray:
    """Per-coordinate mean of the sample vectors.

    Accumulation uses exactly-rounded summation (math.fsum), so the result is
    invariant under permutation of the sample list. Optional L2
    normalization, off by default.
    """
    if len(samples) == 0:
        raise DataError("cannot compute a prototype from zero samples")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    dim = arrs[0].shape
    if len(dim) != 1:
        raise NumericError(f"samples must be vectors, got shape {dim}")
    for a in arrs:
        if a.shape != dim:
            raise NumericError(f"sample dimension mismatch: {a.shape} vs {dim}")
        if not np.isfinite(a).all():
            raise NumericError("non-finite feature sample")
    n = len(arrs)
    proto = np.array(
        [math.fsum(a[j] for a in arrs) / n for j in range(dim[0])], dtype=np.float64
    )
    if normalize:
        norm = float(np.sqrt(np.dot(proto, proto)))
        if norm == 0.0:
            raise NumericError("cannot L2-normalize a zero prototype")
        proto = proto / norm
    return proto


def _read_jsonl(path) -> List[Tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON record ({exc.msg})")
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            out.append((lineno, obj))
    return out


def _require(obj: dict, key: str, path, lineno: int):
    if key not in obj:
        raise DataError(f"{path}:{lineno}: missing field {key!r}")
    return obj[key]


def ingest_feature_file(path, status: str = STATUS_NOVEL, normalize: bool = False) -> List[CategoryRecord]:
    """Read a category feature file; prototype = mean of the listed samples.

    Parsing is atomic: any malformed line raises (with its line number) and
    no partial record list is returned.
    """
    records: List[CategoryRecord] = []
    dim: Optional[int] = None
    seen = set()
    for lineno, obj in _read_jsonl(path):
        name = _require(obj, "name", path, lineno)
        singular = _require(obj, "singular", path, lineno)
        plural = _require(obj, "plural", path, lineno)
        samples = _require(obj, "samples", path, lineno)
        if not isinstance(samples, list) or not samples:
            raise DataError(f"{path}:{lineno}: 'samples' must be a nonempty array")
        if name in seen:
            raise DataError(f"{path}:{lineno}: duplicate category {name!r}")
        seen.add(name)
        vectors = []
        for s in samples:
            v = np.asarray(s, dtype=np.float64)
            if v.ndim != 1:
                raise DataError(f"{path}:{lineno}: sample is not a flat vector")
            if dim is None:
                dim = v.shape[0]
            elif v.shape[0] != dim:
                raise DataError(
                    f"{path}:{lineno}: feature dimension {v.shape[0]} != {dim}"
                )
            vectors.append(v)
        try:
            proto = compute_prototype(vectors, normalize=normalize)
        except NumericError as exc:
            raise DataError(f"{path}:{lineno}: {exc}")
        records.append(
            CategoryRecord(
                name=name,
                singular=str(singular),
                plural=str(plural),
                prototype=proto,
                sample_count=len(vectors),
                status=status,
            )
        )
    if not records:
        raise DataError(f"{path}: no category records")
    return records


def ingest_dataset_file(path) -> List[ImageRecord]:
    """Read an image dataset file (captions optional at inference time)."""
    records: List[ImageRecord] = []
    dim: Optional[int] = None
    for lineno, obj in _read_jsonl(path):
        image_id = _require(obj, "image_id", path, lineno)
        feature = np.asarray(_require(obj, "feature", path, lineno), dtype=np.float64)
        if feature.ndim != 1:
            raise DataError(f"{path}:{lineno}: 'feature' is not a flat vector")
        if dim is None:
            dim = feature.shape[0]
        elif feature.shape[0] != dim:
            raise DataError(f"{path}:{lineno}: feature dimension {feature.shape[0]} != {dim}")
        if not np.isfinite(feature).all():
            raise DataError(f"{path}:{lineno}: non-finite feature")
        tags = []
        for tag in obj.get("tags", []):
            if not isinstance(tag, dict) or "category" not in tag:
                raise DataError(f"{path}:{lineno}: malformed tag entry")
            tags.append((str(tag["category"]), bool(tag.get("plural", False))))
        captions = tuple(str(c) for c in obj.get("captions", []))
        records.append(
            ImageRecord(
                image_id=str(image_id),
                feature=feature,
                tags=tuple(tags),
                captions=captions,
            )
        )
    if not records:
        raise DataError(f"{path}: no image records")
    return records


def write_feature_file(path, categories: Sequence[CategoryRecord], samples_by_name: dict) -> None:
    """Write a category feature file from explicit per-category sample lists."""
    with open(path, "w", encoding="utf-8") as fh:
        for cat in categories:
            samples = samples_by_name[cat.name]
            fh.write(
                json.dumps(
                    {
                        "name": cat.name,
                        "singular": cat.singular,
                        "plural": cat.plural,
                        "samples": [list(map(float, s)) for s in samples],
                    }
                )
                + "\n"
            )


def write_dataset_file(path, records: Sequence[ImageRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "feature": [float(x) for x in rec.feature],
                        "tags": [
                            {"category": name, "plural": plural}
                            for name, plural in rec.tags
                        ],
                        "captions": list(rec.captions),
                    }
                )
                + "\n"
            )


def read_category_file(path) -> List[Tuple[str, str, str]]:
    """Read a bare category list: (name, singular, plural) per line."""
    out = []
    seen = set()
    for lineno, obj in _read_jsonl(path):
        name = str(_require(obj, "name", path, lineno))
        if name in seen:
            raise DataError(f"{path}:{lineno}: duplicate category {name!r}")
        seen.add(name)
        out.append(
            (name, str(_require(obj, "singular", path, lineno)), str(_require(obj, "plural", path, lineno)))
        )
    if not out:
        raise DataError(f"{path}: no categories")
    return out


def write_category_file(path, categories: Sequence[CategoryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cat in categories:
            fh.write(
                json.dumps(
                    {"name": cat.name, "singular": cat.singular, "plural": cat.plural}
                )
                + "\n"
            )
