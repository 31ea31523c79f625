import dataclasses

import numpy as np
import pytest

from conftest import tiny_categories, tiny_model
from novocap.checkpoint import model_payload
from novocap.converter import (
    BIAS_EXACT_MASK,
    BIAS_OFFSET,
    AffineMap,
    Converter,
    assemble_tables,
    embed_category,
    expand_vocabulary,
    init_converter,
    novel_bias_value,
)
from novocap.errors import DataError, NumericError
from novocap.features import CategoryRecord
from novocap.model import assembled_tables, init_model
from novocap.numerics import SeededRng
from novocap.vocab import build_vocabulary


def test_embed_zero_weights_returns_biases():
    rng = SeededRng(1)
    conv = init_converter(3, 4, 5, rng)
    for _, amap in conv.maps():
        amap.W[...] = 0.0
        amap.b[...] = rng.normal(amap.b.shape)
    outs = embed_category(conv, np.array([9.0, 9.0, 9.0]))
    expected = [conv.f_u_s.b, conv.f_u_p.b, conv.f_m_s.b, conv.f_m_p.b]
    for out, b in zip(outs, expected):
        assert np.array_equal(out, b)


def test_embed_identity_weights():
    conv = init_converter(4, 4, 4, SeededRng(2))
    for _, amap in conv.maps():
        amap.W[...] = np.eye(4)
        amap.b[...] = 0.0
    p = np.array([1.0, -2.0, 3.0, 0.5])
    for out in embed_category(conv, p):
        assert np.array_equal(out, p)


def test_embed_affinity():
    conv = init_converter(5, 6, 7, SeededRng(3))
    rng = SeededRng(4)
    p, q = rng.normal(5), rng.normal(5)
    zero = np.zeros(5)
    e_p = embed_category(conv, p)
    e_q = embed_category(conv, q)
    e_0 = embed_category(conv, zero)
    e_pq = embed_category(conv, p + q)
    for a, b, z, ab in zip(e_p, e_q, e_0, e_pq):
        assert np.allclose(a + b - z, ab, atol=1e-10, rtol=0)
    # affine combination: f(a*p + (1-a)*q) == a*f(p) + (1-a)*f(q)
    alpha = 0.3
    e_mix = embed_category(conv, alpha * p + (1 - alpha) * q)
    for a, b, mix in zip(e_p, e_q, e_mix):
        assert np.allclose(alpha * a + (1 - alpha) * b, mix, atol=1e-10, rtol=0)


def _text_params(vocab, d1, d2, rng):
    return (
        rng.normal((vocab.text_end, d1)),
        rng.normal((vocab.text_end, d2)),
        rng.normal(vocab.text_end),
    )


def test_assemble_zero_categories_equals_text_params():
    vocab = build_vocabulary(["just words here"], [])
    rng = SeededRng(5)
    U_text, M_text, b_text = _text_params(vocab, 4, 5, rng)
    conv = init_converter(3, 4, 5, rng)
    tables = assemble_tables(
        vocab, conv, [], U_text, M_text, b_text, np.zeros(0), np.zeros(0)
    )
    assert np.array_equal(tables.U, U_text)
    assert np.array_equal(tables.M, M_text)
    assert np.array_equal(tables.b, b_text)


def test_assemble_known_category_row_is_converter_output():
    cats = tiny_categories()
    vocab = build_vocabulary(["red box"], cats)
    rng = SeededRng(6)
    U_text, M_text, b_text = _text_params(vocab, 5, 6, rng)
    conv = init_converter(4, 5, 6, rng)
    b_s, b_p = rng.normal(2), rng.normal(2)
    tables = assemble_tables(vocab, conv, cats, U_text, M_text, b_text, b_s, b_p)
    row = vocab.category_token_id(cats[0].name, "s")
    assert np.array_equal(tables.U[row], conv.f_u_s.apply(cats[0].prototype))
    assert np.array_equal(tables.M[row], conv.f_m_s.apply(cats[0].prototype))
    assert tables.b[row] == b_s[0]
    prow = vocab.category_token_id(cats[1].name, "p")
    assert np.array_equal(tables.U[prow], conv.f_u_p.apply(cats[1].prototype))
    assert tables.b[prow] == b_p[1]


def test_assemble_category_permutation_permutes_rows():
    cats = tiny_categories()
    rng = SeededRng(7)
    conv = init_converter(4, 5, 6, rng)
    swapped = [cats[1], cats[0]]
    vocab_a = build_vocabulary(["red box"], cats)
    vocab_b = build_vocabulary(["red box"], swapped)
    U_text, M_text, b_text = _text_params(vocab_a, 5, 6, rng)
    b_s, b_p = rng.normal(2), rng.normal(2)
    t_a = assemble_tables(vocab_a, conv, cats, U_text, M_text, b_text, b_s, b_p)
    t_b = assemble_tables(
        vocab_b, conv, swapped, U_text, M_text, b_text, b_s[::-1].copy(), b_p[::-1].copy()
    )
    te = vocab_a.text_end
    # singular block order swaps: rows (te, te+1) exchange, same for plural
    assert np.array_equal(t_a.U[te], t_b.U[te + 1])
    assert np.array_equal(t_a.U[te + 1], t_b.U[te])
    assert np.array_equal(t_a.M[te + 2], t_b.M[te + 3])
    assert t_a.b[te] == t_b.b[te + 1]


def test_novel_bias_policies():
    b_text = np.array([-3.0, 0.5, -1.0])
    assert novel_bias_value(b_text, BIAS_OFFSET, 2.0) == -5.0
    assert novel_bias_value(b_text, BIAS_EXACT_MASK, 2.0) == -np.inf
    with pytest.raises(DataError):
        novel_bias_value(b_text, "nope", 2.0)


def _novel(name, seed, d_v=4):
    rng = SeededRng(seed)
    return CategoryRecord(name, name, name + "s", rng.normal(d_v), 5, "novel")


def test_expand_empty_is_identity(model9):
    expanded = expand_vocabulary(model9, [])
    assert model_payload(expanded) == model_payload(model9)


def test_expand_appends_and_preserves_known_rows(model9):
    before = assembled_tables(model9)
    expanded = expand_vocabulary(model9, [_novel("drone", 21), _novel("umbrella", 22)])
    after = assembled_tables(expanded)
    v_old = len(model9.vocab)
    assert len(expanded.vocab) == v_old + 4
    assert np.array_equal(after.U[:v_old], before.U)
    assert np.array_equal(after.M[:v_old], before.M)
    assert np.array_equal(after.b[:v_old], before.b)
    # novel bias rows carry the suppression value
    suppressed = novel_bias_value(
        model9.params.b_text, model9.config.bias_policy, model9.config.novel_bias_delta
    )
    assert all(after.b[r] == suppressed for r in range(v_old, v_old + 4))
    # trainable parameters are the same objects: nothing retrained
    assert expanded.params is model9.params
    assert expanded.converter is model9.converter


def test_expand_reassembly_is_bit_stable(model9):
    expanded = expand_vocabulary(model9, [_novel("drone", 23)])
    t1 = assembled_tables(expanded)
    t2 = assembled_tables(expanded)
    assert np.array_equal(t1.U, t2.U) and np.array_equal(t1.M, t2.M) and np.array_equal(t1.b, t2.b)


def test_expand_composes_up_to_row_order(model9):
    a, b = _novel("drone", 24), _novel("umbrella", 25)
    two_step = expand_vocabulary(expand_vocabulary(model9, [a]), [b])
    one_step = expand_vocabulary(model9, [a, b])
    t2, t1 = assembled_tables(two_step), assembled_tables(one_step)

    def rows_by_surface(model, tables):
        return {
            model.vocab.surface(r): (tuple(tables.U[r]), tuple(tables.M[r]), tables.b[r])
            for r, _, _ in model.vocab.category_rows()
        }

    assert rows_by_surface(two_step, t2) == rows_by_surface(one_step, t1)


def test_expand_rejects_duplicates_and_bad_dims(model9):
    with pytest.raises(DataError):
        expand_vocabulary(model9, [_novel("zebra", 26)])  # already known
    with pytest.raises(DataError):
        expand_vocabulary(model9, [_novel("drone", 27), _novel("drone", 28)])
    with pytest.raises(NumericError):
        expand_vocabulary(model9, [_novel("drone", 29, d_v=7)])


def test_expanded_model_marks_status_novel(model9):
    expanded = expand_vocabulary(model9, [dataclasses.replace(_novel("drone", 30), status="known")])
    assert expanded.categories[-1].status == "novel"
