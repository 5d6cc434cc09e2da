"""Tests for the numpy autodiff engine."""

from __future__ import annotations

import numpy as np
import pytest

from pdum.kags.errors import ContractError, DimensionError, NumericError
from pdum.kags.tensor import (
    Tensor,
    backward,
    batch_norm,
    concat,
    current_dtype,
    default_dtype,
    grad_enabled,
    matmul,
    no_grad,
    parameter,
    softmax_rows,
    stack,
)


def test_default_dtype_is_float32_and_scoped() -> None:
    """Leaves default to float32; the float64 scope ends with its block."""
    assert Tensor([1.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert current_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_default_dtype_rejects_integers() -> None:
    """Only floating widths may become the default."""
    with pytest.raises(ContractError):
        with default_dtype(np.int32):
            pass


def test_broadcast_add_reduces_gradient() -> None:
    """A broadcast operand receives the summed upstream gradient."""
    with default_dtype(np.float64):
        a = parameter(np.ones((2, 3)))
        b = parameter(np.arange(3.0))
        backward((a + b).sum())
    np.testing.assert_allclose(a.grad, np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def test_matmul_gradients_match_closed_form() -> None:
    """d sum(A B) / dA = 1 B^T and d/dB = A^T 1."""
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        a = parameter(rng.standard_normal((3, 4)))
        b = parameter(rng.standard_normal((4, 2)))
        backward(matmul(a, b).sum())
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_matmul_dimension_error_names_shapes() -> None:
    """Mismatched inner extents raise with both shapes in the message."""
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_softmax_rows_is_stable_and_normalized() -> None:
    """Rows sum to one even for very large logits."""
    x = Tensor([[1000.0, 1000.0, 999.0], [0.0, 0.0, 0.0]])
    y = softmax_rows(x).numpy()
    np.testing.assert_allclose(y.sum(axis=-1), [1.0, 1.0], rtol=1e-6)
    np.testing.assert_allclose(y[1], [1 / 3, 1 / 3, 1 / 3], rtol=1e-6)


def test_gradients_accumulate_until_cleared() -> None:
    """Two backward passes add into the same leaf gradient."""
    with default_dtype(np.float64):
        x = parameter([1.0, 2.0])
        backward((x * x).sum())
        backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_twice_on_same_graph_is_rejected() -> None:
    """A consumed graph cannot be differentiated again."""
    x = parameter([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_requires_scalar_root() -> None:
    """Only single-element roots can seed the reverse pass."""
    x = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_requires_grad_dependency() -> None:
    """A constant root has nothing to differentiate."""
    with pytest.raises(ContractError):
        backward(Tensor([1.0, 2.0]).sum())


def test_no_grad_skips_recording() -> None:
    """Results computed under no_grad are constants."""
    x = parameter([1.0, 2.0])
    with no_grad():
        assert not grad_enabled()
        y = (x * x).sum()
    assert grad_enabled()
    assert not y.requires_grad
    assert y.is_leaf


def test_repeated_index_accumulates_gradient() -> None:
    """Gathering the same row twice doubles its gradient."""
    with default_dtype(np.float64):
        table = parameter(np.arange(6.0).reshape(3, 2))
        backward(table[np.array([0, 0, 1])].sum())
    np.testing.assert_allclose(table.grad, [[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])


def test_concat_and_stack_split_gradients() -> None:
    """Each input receives the slice of the gradient that matches it."""
    with default_dtype(np.float64):
        a = parameter(np.ones((2, 2)))
        b = parameter(np.ones((1, 2)))
        joined = concat([a, b], axis=0)
        assert joined.shape == (3, 2)
        backward((joined * np.array([[1.0], [2.0], [3.0]])).sum())
        np.testing.assert_allclose(a.grad, [[1.0, 1.0], [2.0, 2.0]])
        np.testing.assert_allclose(b.grad, [[3.0, 3.0]])

        c = parameter([1.0, 2.0])
        d = parameter([3.0, 4.0])
        backward((stack([c, d], axis=0) * np.array([[1.0, 1.0], [5.0, 5.0]])).sum())
        np.testing.assert_allclose(c.grad, [1.0, 1.0])
        np.testing.assert_allclose(d.grad, [5.0, 5.0])


def test_concat_misaligned_raises() -> None:
    """Extents off the concatenation axis must agree."""
    with pytest.raises(DimensionError):
        concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))], axis=0)


def test_non_finite_values_raise() -> None:
    """NaN leaves and infinite intermediate results are rejected."""
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        Tensor([0.0, 1.0]).log()


def test_reshape_and_item_contracts() -> None:
    """Bad reshapes and multi-element item() calls raise."""
    x = Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        x.reshape(4, 2)
    with pytest.raises(ContractError):
        x.item()
    assert x.reshape(3, 2).shape == (3, 2)
    assert x.T.shape == (3, 2)


def test_batch_norm_uses_own_statistics_per_leading_index() -> None:
    """Each leading index is normalized by the mean and variance of its rows."""
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        x = Tensor(rng.standard_normal((2, 5, 3)) * np.array([[[1.0]], [[10.0]]]) + 4.0)
        out, mean, var = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.numpy().mean(axis=1), np.zeros((2, 3)), atol=1e-10)
    np.testing.assert_allclose(out.numpy().var(axis=1), np.ones((2, 3)), rtol=1e-3)
    assert mean.shape == (2, 1, 3)
    assert var.shape == (2, 1, 3)


def test_batch_norm_with_fixed_statistics() -> None:
    """Given statistics are applied as-is."""
    with default_dtype(np.float64):
        x = Tensor([[2.0, 4.0]])
        out, _, _ = batch_norm(
            x, Tensor([1.0, 2.0]), Tensor([0.5, 0.0]), stats=(np.array([1.0, 1.0]), np.array([1.0, 4.0])), eps=0.0
        )
    np.testing.assert_allclose(out.numpy(), [[1.5, 3.0]])
