from decimal import Decimal, getcontext

import numpy as np
import pytest

from novocap.errors import NumericError
from novocap.numerics import (
    SeededRng,
    finite_difference_gradient,
    log_softmax,
    matvec,
    max_relative_error,
    softmax,
)


def test_matvec_identity():
    out = matvec([[1.0, 0.0], [0.0, 1.0]], [3.0, 4.0])
    assert out.tolist() == [3.0, 4.0]


def test_matvec_hand_arithmetic():
    assert matvec([[1, 2], [3, 4]], [1, 1]).tolist() == [3.0, 7.0]


def test_matvec_matches_elementwise_loop_oracle_exactly():
    rng = SeededRng(42)
    m = rng.normal((5, 3))
    v = rng.normal(3)
    out = matvec(m, v)
    for i in range(5):
        acc = 0.0
        for j in range(3):
            acc += m[i][j] * v[j]
        assert out[i] == acc


def test_matvec_shape_mismatch():
    with pytest.raises(NumericError):
        matvec([[1.0, 2.0]], [1.0, 2.0, 3.0])


def test_softmax_symmetry():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]


def test_softmax_masked_entry_exactly_zero():
    out = softmax([0.0, -np.inf])
    assert out[0] == 1.0
    assert out[1] == 0.0


def test_softmax_high_precision_reference():
    # 30-digit reference via the decimal module
    getcontext().prec = 30
    exps = [Decimal(x).exp() for x in (1, 2, 3)]
    total = sum(exps)
    expected = [float(e / total) for e in exps]
    out = softmax([1.0, 2.0, 3.0])
    assert np.allclose(out, expected, atol=1e-12, rtol=0)


def test_softmax_is_probability_vector():
    rng = SeededRng(7)
    for _ in range(50):
        out = softmax(rng.normal(9) * 10.0)
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_masked_extension_identity():
    # appending masked rows leaves the original distribution bit-identical
    rng = SeededRng(8)
    for _ in range(20):
        logits = rng.normal(6) * 3.0
        extended = np.concatenate([logits, [-np.inf, -np.inf]])
        assert np.array_equal(softmax(extended)[:6], softmax(logits))
        assert np.array_equal(log_softmax(extended)[:6], log_softmax(logits))


def test_softmax_rejects_degenerate_input():
    with pytest.raises(NumericError):
        softmax([-np.inf, -np.inf])
    with pytest.raises(NumericError):
        softmax([1.0, np.inf])
    with pytest.raises(NumericError):
        softmax([1.0, np.nan])


def test_softmax_deterministic():
    logits = SeededRng(3).normal(12)
    assert np.array_equal(softmax(logits), softmax(logits.copy()))


def test_log_softmax_matches_log_of_softmax():
    logits = np.array([0.3, -1.2, 4.0, -np.inf])
    ls = log_softmax(logits)
    assert ls[3] == -np.inf
    assert np.allclose(np.exp(ls[:3]), softmax(logits)[:3], atol=1e-15)


def test_fd_gradient_quadratic():
    grad = finite_difference_gradient(lambda x: float(x @ x), [1.0, 2.0])
    assert np.allclose(grad, [2.0, 4.0], atol=1e-6)


def test_fd_gradient_linear():
    grad = finite_difference_gradient(lambda x: float(x.sum()), [0.3, -2.0, 7.5])
    assert np.allclose(grad, [1.0, 1.0, 1.0], atol=1e-9)


def test_fd_gradient_rejects_nonfinite():
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda x: float("inf"), [1.0])
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda x: 0.0, [1.0], h=0.0)


def test_seeded_rng_reproducible():
    a = SeededRng(123).normal(10)
    b = SeededRng(123).normal(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, SeededRng(124).normal(10))


def test_seeded_rng_children_independent():
    root = SeededRng(5)
    c1 = root.child(1).normal(4)
    c2 = root.child(2).normal(4)
    assert not np.array_equal(c1, c2)
    assert np.array_equal(c1, SeededRng(5).child(1).normal(4))


def test_max_relative_error():
    assert max_relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
