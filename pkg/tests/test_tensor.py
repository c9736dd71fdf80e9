import io

import numpy as np
import pytest

from dcar import tensor as F
from dcar.tensor import Tensor
from helpers import PRIMITIVES, gradcheck, primitive_cases


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_float32(name):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        case = {n: (fn, inp) for n, fn, inp in primitive_cases(rng)}[name]
        assert gradcheck(*case, rng) < 1e-2


def test_primitive_gradients_float64():
    with F.precision(np.float64):
        rng = np.random.default_rng(11)
        for name, fn, inputs in primitive_cases(rng):
            inputs = [x.astype(np.float64) for x in inputs]
            assert gradcheck(fn, inputs, rng, eps=1e-6) < 1e-6, name


def test_gradients_accumulate_on_reused_leaf():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with F.Tape() as tape:
        y = F.sum(F.add(F.mul(x, x), x))
    F.backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with F.Tape() as tape:
        y = F.exp(x)
    with pytest.raises(ValueError):
        F.backward(y, tape)


def test_cleared_tape_cannot_be_reused():
    tape = F.Tape()
    tape.clear()
    with pytest.raises(F.TapeError):
        with tape:
            pass


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_mask_zeros_exactly():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    mask = np.array([[1, 0, 1, 0], [1, 1, 1, 1], [0, 0, 0, 0]], dtype=bool)
    p = F.softmax(x, mask).data
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p[:2].sum(-1), 1.0, atol=1e-6)
    assert np.all(p[2] == 0.0)


def test_softmax_is_shift_stable():
    big = Tensor(np.array([[1000.0, 1001.0, 1002.0]]))
    assert np.all(np.isfinite(F.softmax(big).data))


def test_cross_entropy_value_and_zero_weights():
    logits = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    loss = F.cross_entropy_from_logits(logits, [1, 0]).item()
    assert loss == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2, rel=1e-6)
    assert F.cross_entropy_from_logits(logits, [1, 0], [0.0, 0.0]).item() == 0.0
    with pytest.raises(IndexError):
        F.cross_entropy_from_logits(logits, [2, 0])


def test_adam_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = F.AdamState(learning_rate=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = v = np.zeros(2)
    expected = p.data.astype(np.float64).copy()
    for t, g in enumerate(grads, 1):
        p.grad = g.astype(np.float32)
        F.adam_step([p], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-5)


def test_adam_skips_missing_grad_and_rejects_nan():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.array([1.0, 1.0], dtype=np.float32)
    F.adam_step([a, b], F.AdamState())
    assert np.all(b.data == 1.0) and np.all(a.data < 1.0)
    before = a.data.copy()
    a.grad = np.array([np.nan, 1.0], dtype=np.float32)
    with pytest.raises(F.NumericError):
        F.adam_step([a], F.AdamState())
    np.testing.assert_array_equal(a.data, before)


def test_array_serialization_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = io.BytesIO()
    F.write_array(buf, arr)
    raw = buf.getvalue()
    assert raw[:12] == np.array([2, 2, 3], dtype="<u4").tobytes()
    assert raw[12:] == arr.astype("<f4").tobytes()
    buf.seek(0)
    np.testing.assert_array_equal(F.read_array(buf), arr)


def test_truncated_array_raises():
    buf = io.BytesIO()
    F.write_array(buf, np.ones((4,)))
    with pytest.raises(EOFError):
        F.read_array(io.BytesIO(buf.getvalue()[:-2]))


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert F.clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0, rel=1e-9)
