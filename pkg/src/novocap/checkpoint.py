"""Versioned, digest-protected model checkpoints as structured text.

The file is JSON: a header with format name, version, and a sha256 digest of
the canonical payload, plus the payload itself. Floats are serialized with
their shortest round-trip repr, so load(save(m)) reproduces every parameter
bit-exactly. The assembled U/M/b_out tables are stored alongside the
parameters that generate them: that redundancy is what makes the
known-rows-unchanged property checkable by diffing two checkpoint files, and
the loader verifies the stored tables against a fresh reassembly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .converter import AffineMap, Converter
from .captioner import CaptionerParams
from .errors import DataError
from .features import CategoryRecord
from .model import CaptionModel, ModelConfig, assembled_tables
from .vocab import TokenEntry, Vocabulary

FORMAT_NAME = "novocap-checkpoint"
FORMAT_VERSION = 1

_PARAM_FIELDS = (
    "Wz", "bz", "Wr", "br", "Wc", "bc",
    "W_init", "b_init", "U_text", "M_text", "b_text", "b_cat_s", "b_cat_p",
)


def _arr(a: np.ndarray):
    return a.tolist()


def model_payload(model: CaptionModel, extra: Optional[dict] = None) -> dict:
    tables = assembled_tables(model)
    return {
        "config": asdict(model.config),
        "vocab": {
            "text_end": model.vocab.text_end,
            "entries": [
                [e.surface, e.kind, e.category, e.number] for e in model.vocab.entries
            ],
        },
        "categories": [
            {
                "name": c.name,
                "singular": c.singular,
                "plural": c.plural,
                "status": c.status,
                "sample_count": c.sample_count,
                "prototype": _arr(c.prototype),
            }
            for c in model.categories
        ],
        "params": {name: _arr(getattr(model.params, name)) for name in _PARAM_FIELDS},
        "converter": {
            name: {"W": _arr(amap.W), "b": _arr(amap.b)}
            for name, amap in model.converter.maps()
        },
        "tables": {"U": _arr(tables.U), "M": _arr(tables.M), "b": _arr(tables.b)},
        "extra": extra or {},
    }


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: CaptionModel, path, extra: Optional[dict] = None) -> None:
    payload = model_payload(model, extra)
    digest = hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "sha256": digest,
        "payload": payload,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_payload(path) -> dict:
    """Parse and integrity-check a checkpoint file; returns the payload."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a checkpoint file ({exc.msg})")
    if doc.get("format") != FORMAT_NAME:
        raise DataError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {doc.get('version')} != supported {FORMAT_VERSION}"
        )
    payload = doc.get("payload")
    digest = hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()
    if digest != doc.get("sha256"):
        raise DataError(f"{path}: digest mismatch, file corrupted")
    return payload


def load_checkpoint(path) -> CaptionModel:
    payload = read_payload(path)
    config = ModelConfig(**payload["config"])
    vocab = Vocabulary(
        [TokenEntry(s, k, c, n) for s, k, c, n in payload["vocab"]["entries"]],
        payload["vocab"]["text_end"],
    )
    categories = [
        CategoryRecord(
            name=c["name"],
            singular=c["singular"],
            plural=c["plural"],
            prototype=np.array(c["prototype"], dtype=np.float64),
            sample_count=int(c["sample_count"]),
            status=c["status"],
        )
        for c in payload["categories"]
    ]
    params = CaptionerParams(
        **{name: np.array(payload["params"][name], dtype=np.float64) for name in _PARAM_FIELDS}
    )
    conv = Converter(
        **{
            name: AffineMap(
                W=np.array(block["W"], dtype=np.float64),
                b=np.array(block["b"], dtype=np.float64),
            )
            for name, block in payload["converter"].items()
        }
    )
    model = CaptionModel(
        config=config, vocab=vocab, categories=categories, params=params, converter=conv
    )
    stored = payload["tables"]
    tables = assembled_tables(model)
    if not (
        np.array_equal(np.array(stored["U"]), tables.U)
        and np.array_equal(np.array(stored["M"]), tables.M)
        and np.array_equal(np.array(stored["b"]), tables.b)
    ):
        raise DataError(f"{path}: stored tables do not match reassembly")
    return model
