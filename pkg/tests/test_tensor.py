import numpy as np
import pytest

from fdg import tensor as tn
from fdg.errors import ShapeError


def test_matmul_hand_cases():
    I = tn.tensor([[1, 0], [0, 1]])
    B = tn.tensor([[3, 4], [5, 6]])
    assert np.array_equal(tn.matmul(I, B), B)
    assert tn.matmul(tn.tensor([[1, 2]]), tn.tensor([[3], [4]])).tolist() == [[11.0]]


def test_matmul_vs_triple_loop(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(tn.matmul(a, b) - ref)) < 1e-12


def test_matmul_identity_exact(rng):
    A = rng.normal(size=(4, 4))
    I = np.eye(4)
    assert np.array_equal(tn.matmul(I, A), A)
    assert np.array_equal(tn.matmul(A, I), A)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_examples():
    assert tn.elementwise("scale", tn.tensor([2, -4]), 0.5).tolist() == [1.0, -2.0]
    assert tn.elementwise("relu", tn.tensor([-1, 0, 3])).tolist() == [0.0, 0.0, 3.0]
    x = tn.tensor([1.5, -2.0])
    assert np.array_equal(tn.elementwise("add", x, np.zeros(2)), x)
    mask = tn.elementwise("relu_grad_mask", tn.tensor([-1, 2]), tn.tensor([5, 7]))
    assert mask.tolist() == [0.0, 7.0]


def test_elementwise_rejects_mismatch():
    with pytest.raises(ShapeError):
        tn.elementwise("add", np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        tn.elementwise("pow", np.ones(2), np.ones(2))


def test_reductions():
    assert tn.reduce("l2sq", tn.tensor([3, 4])) == 25.0
    assert tn.reduce("mean", tn.tensor([1, 2, 3])) == 2.0


def test_sum_matches_sequential_loop(rng):
    x = rng.normal(size=(4, 4)) * 10.0 ** rng.integers(-8, 8, size=(4, 4))
    acc = 0.0
    for v in x.ravel():
        acc += v
    with tn.deterministic(True):
        assert tn.reduce("sum", x) == acc


def test_l2sq_zero_iff_all_zero(rng):
    assert tn.reduce("l2sq", np.zeros(5)) == 0.0
    assert tn.reduce("l2sq", rng.normal(size=5)) > 0.0


def test_repeat_evaluation_bit_identical(rng):
    x = rng.normal(size=(64, 33))
    assert tn.reduce("sum", x) == tn.reduce("sum", x.copy())
    assert tn.digest([tn.matmul(x.T, x)]) == tn.digest([tn.matmul(x.T, x)])


def test_tensor_rejects_empty_dims():
    with pytest.raises(ShapeError):
        tn.tensor(np.zeros((0, 3)))


def test_tensor_default_dtype_and_copy():
    src = np.arange(3)
    t = tn.tensor(src)
    assert t.dtype == np.float64 and t.flags.c_contiguous
    t[0] = 9
    assert src[0] == 0
    assert tn.tensor([1, 2], "float32").dtype == np.float32


@pytest.mark.parametrize("dtype", [np.float64, np.float32, np.int64])
def test_bytes_round_trip(rng, dtype):
    a = (rng.normal(size=(3, 2, 4)) * 100).astype(dtype)
    buf = tn.to_bytes(a) + tn.to_bytes(a[0])
    b, off = tn.from_bytes(buf)
    c, end = tn.from_bytes(buf, off)
    assert b.dtype == a.dtype and np.array_equal(a, b)
    assert np.array_equal(c, a[0]) and end == len(buf)


def test_bytes_truncated():
    buf = tn.to_bytes(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tn.from_bytes(buf[:-1])
    with pytest.raises(ValueError):
        tn.from_bytes(buf[:3])
