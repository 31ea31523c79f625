"""The full caption model: vocabulary, categories, captioner, converter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .captioner import CaptionerParams, init_captioner_params
from .converter import (
    BIAS_OFFSET,
    BIAS_POLICIES,
    Converter,
    EmbeddingTables,
    assemble_tables,
    init_converter,
)
from .errors import DataError
from .features import STATUS_KNOWN, CategoryRecord
from .numerics import SeededRng
from .vocab import Vocabulary


@dataclass
class ModelConfig:
    d_v: int = 32
    d1: int = 64
    d2: int = 64  # hidden size; logits are M h + b with no extra projection
    bias_policy: str = BIAS_OFFSET
    novel_bias_delta: float = 2.0
    converter_bias: bool = True
    max_caption_len: int = 20

    def validate(self) -> None:
        if self.bias_policy not in BIAS_POLICIES:
            raise DataError(f"unknown bias policy {self.bias_policy!r}")
        for name in ("d_v", "d1", "d2", "max_caption_len"):
            if getattr(self, name) < 1:
                raise DataError(f"ModelConfig.{name} must be >= 1")


@dataclass
class CaptionModel:
    config: ModelConfig
    vocab: Vocabulary
    categories: List[CategoryRecord]
    params: CaptionerParams
    converter: Converter


def init_model(
    vocab: Vocabulary,
    categories: Sequence[CategoryRecord],
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    log_priors=None,
) -> CaptionModel:
    config = config or ModelConfig()
    config.validate()
    rng = SeededRng(seed)
    n_known = sum(1 for c in categories if c.status == STATUS_KNOWN)
    params = init_captioner_params(
        text_end=vocab.text_end,
        n_base_categories=n_known,
        d_v=config.d_v,
        d1=config.d1,
        hidden=config.d2,
        rng=rng.child(1),
        log_priors=log_priors,
    )
    converter = init_converter(config.d_v, config.d1, config.d2, rng.child(2))
    return CaptionModel(
        config=config,
        vocab=vocab,
        categories=list(categories),
        params=params,
        converter=converter,
    )


def assembled_tables(model: CaptionModel) -> EmbeddingTables:
    """U/M/b_out recomputed from the current parameters and prototypes."""
    p = model.params
    return assemble_tables(
        model.vocab,
        model.converter,
        model.categories,
        p.U_text,
        p.M_text,
        p.b_text,
        p.b_cat_s,
        p.b_cat_p,
        bias_policy=model.config.bias_policy,
        delta=model.config.novel_bias_delta,
    )


def trainable_blocks(model: CaptionModel) -> Dict[str, np.ndarray]:
    """Named parameter arrays in fixed update order."""
    p = model.params
    blocks = {
        "cell.Wz": p.Wz,
        "cell.bz": p.bz,
        "cell.Wr": p.Wr,
        "cell.br": p.br,
        "cell.Wc": p.Wc,
        "cell.bc": p.bc,
        "init.W": p.W_init,
        "init.b": p.b_init,
        "U_text": p.U_text,
        "M_text": p.M_text,
        "b_text": p.b_text,
        "b_cat_s": p.b_cat_s,
        "b_cat_p": p.b_cat_p,
    }
    for name, amap in model.converter.maps():
        blocks[f"conv.{name}.W"] = amap.W
        if model.config.converter_bias:
            blocks[f"conv.{name}.b"] = amap.b
    return blocks


def novel_token_ids(model: CaptionModel) -> set:
    novel_names = {c.name for c in model.categories if c.status != STATUS_KNOWN}
    return {
        row for row, name, _ in model.vocab.category_rows() if name in novel_names
    }
