"""Visual-prototype-to-embedding converter and embedding table assembly.

Four independent affine maps estimate the singular/plural input and output
word embeddings of a category from its prototype feature. Text-block rows of
the tables are free parameters; category rows are recomputed from the
converter whenever tables are assembled, so an expanded vocabulary needs no
retraining: new rows are appended and every existing row stays bit-identical.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericError
from .features import STATUS_KNOWN, STATUS_NOVEL, CategoryRecord
from .numerics import SeededRng
from .vocab import SINGULAR, Vocabulary

BIAS_OFFSET = "offset"
BIAS_EXACT_MASK = "exact-mask"
BIAS_POLICIES = (BIAS_OFFSET, BIAS_EXACT_MASK)


@dataclass
class AffineMap:
    W: np.ndarray  # (out_dim, d_v)
    b: np.ndarray  # (out_dim,)

    def apply(self, v: np.ndarray) -> np.ndarray:
        if v.shape[0] != self.W.shape[1]:
            raise NumericError(
                f"prototype dimension {v.shape[0]} != converter input {self.W.shape[1]}"
            )
        return self.W @ v + self.b


@dataclass
class Converter:
    f_u_s: AffineMap
    f_u_p: AffineMap
    f_m_s: AffineMap
    f_m_p: AffineMap

    @property
    def d_v(self) -> int:
        return self.f_u_s.W.shape[1]

    def maps(self) -> List[Tuple[str, AffineMap]]:
        return [
            ("f_u_s", self.f_u_s),
            ("f_u_p", self.f_u_p),
            ("f_m_s", self.f_m_s),
            ("f_m_p", self.f_m_p),
        ]


def init_converter(d_v: int, d1: int, d2: int, rng: SeededRng) -> Converter:
    """Seeded init: weights uniform in [-1/sqrt(d_v), +1/sqrt(d_v)], zero biases."""
    bound = 1.0 / math.sqrt(d_v)

    def make(out_dim: int) -> AffineMap:
        return AffineMap(
            W=rng.uniform(-bound, bound, (out_dim, d_v)),
            b=np.zeros(out_dim, dtype=np.float64),
        )

    return Converter(f_u_s=make(d1), f_u_p=make(d1), f_m_s=make(d2), f_m_p=make(d2))


def embed_category(conv: Converter, prototype: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(u_singular, u_plural, m_singular, m_plural) for one prototype."""
    prototype = np.asarray(prototype, dtype=np.float64)
    return (
        conv.f_u_s.apply(prototype),
        conv.f_u_p.apply(prototype),
        conv.f_m_s.apply(prototype),
        conv.f_m_p.apply(prototype),
    )


@dataclass
class EmbeddingTables:
    U: np.ndarray      # (V, d1) input embeddings
    M: np.ndarray      # (V, d2) output embeddings
    b: np.ndarray      # (V,) output bias
    text_end: int
    # rows >= base_end were appended by vocabulary expansion; decode kernels
    # process the two blocks separately so that every array op touching the
    # base block keeps the exact shape it had before expansion (bit-stable
    # logits and softmax normalizers are what make expansion invariance an
    # equality rather than a tolerance)
    base_end: int = -1

    def __post_init__(self):
        if self.base_end < 0:
            self.base_end = self.b.shape[0]


def novel_bias_value(b_text: np.ndarray, policy: str, delta: float) -> float:
    if policy == BIAS_EXACT_MASK:
        return -np.inf
    if policy == BIAS_OFFSET:
        return float(np.min(b_text)) - float(delta)
    raise DataError(f"unknown bias policy {policy!r}")


def assemble_tables(
    vocab: Vocabulary,
    conv: Converter,
    categories: Sequence[CategoryRecord],
    U_text: np.ndarray,
    M_text: np.ndarray,
    b_text: np.ndarray,
    b_cat_s: np.ndarray,
    b_cat_p: np.ndarray,
    bias_policy: str = BIAS_OFFSET,
    delta: float = 2.0,
) -> EmbeddingTables:
    """Fill U/M/b: text rows from the free parameters, category rows from the
    converter, known-category biases from the trainable blocks, novel-category
    biases from the suppression policy."""
    V = len(vocab)
    if U_text.shape[0] != vocab.text_end:
        raise NumericError(
            f"text parameter rows {U_text.shape[0]} != text block size {vocab.text_end}"
        )
    d1 = U_text.shape[1]
    d2 = M_text.shape[1]
    U = np.zeros((V, d1), dtype=np.float64)
    M = np.zeros((V, d2), dtype=np.float64)
    b = np.zeros(V, dtype=np.float64)
    U[: vocab.text_end] = U_text
    M[: vocab.text_end] = M_text
    b[: vocab.text_end] = b_text

    by_name = {c.name: c for c in categories}
    known_index = {
        c.name: i for i, c in enumerate(c for c in categories if c.status == STATUS_KNOWN)
    }
    embeds = {}
    suppressed = novel_bias_value(b_text, bias_policy, delta)
    for row, name, number in vocab.category_rows():
        cat = by_name.get(name)
        if cat is None or cat.prototype is None:
            raise DataError(f"category {name!r} has no prototype")
        if name not in embeds:
            embeds[name] = embed_category(conv, cat.prototype)
        u_s, u_p, m_s, m_p = embeds[name]
        if number == SINGULAR:
            U[row] = u_s
            M[row] = m_s
            b[row] = b_cat_s[known_index[name]] if cat.status == STATUS_KNOWN else suppressed
        else:
            U[row] = u_p
            M[row] = m_p
            b[row] = b_cat_p[known_index[name]] if cat.status == STATUS_KNOWN else suppressed

    novel_rows = sorted(
        row
        for row, name, _ in vocab.category_rows()
        if by_name[name].status != STATUS_KNOWN
    )
    # expansion appends, so novel rows form the table's tail; anything else
    # would only cost bit-stability, so fall back to one block
    if novel_rows and novel_rows == list(range(novel_rows[0], V)):
        base_end = novel_rows[0]
    else:
        base_end = V
    return EmbeddingTables(U=U, M=M, b=b, text_end=vocab.text_end, base_end=base_end)


def expand_vocabulary(model, new_categories: Sequence[CategoryRecord]):
    """Online vocabulary expansion: returns a new model, no retraining.

    Appends singular and plural tokens for each new category; their embedding
    rows come from the trained converter and their bias rows from the
    suppression policy when tables are next assembled. The trainable
    parameters are shared untouched, so every pre-existing row of U, M, and
    b_out is bit-identical before and after. Repeated expansion composes with
    expansion by the union, up to row order.
    """
    if not new_categories:
        return dataclasses.replace(model)
    seen = set()
    d_v = model.converter.d_v
    for cat in new_categories:
        if model.vocab.has_category(cat.name) or cat.name in seen:
            raise DataError(f"duplicate category {cat.name!r}")
        seen.add(cat.name)
        if cat.prototype is None or cat.sample_count < 1:
            raise DataError(f"category {cat.name!r} has no prototype samples")
        if cat.prototype.shape[0] != d_v:
            raise NumericError(
                f"prototype dimension {cat.prototype.shape[0]} != model d_v {d_v}"
            )
    added = [dataclasses.replace(c, status=STATUS_NOVEL) for c in new_categories]
    return dataclasses.replace(
        model,
        vocab=model.vocab.with_appended_categories(added),
        categories=list(model.categories) + added,
    )
