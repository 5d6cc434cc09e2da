"""Tests for second-order pooling, group pooling and activation maps."""

from __future__ import annotations

import numpy as np
import pytest

from pdum.kags.errors import ContractError, DimensionError
from pdum.kags.gsm import class_activation_map, gsm_forward, sop_covariance, sop_forward, sop_params
from pdum.kags.tensor import Tensor, default_dtype


def test_sop_forward_shape() -> None:
    """A grid pools to a single 1 x 1 x d vector."""
    rng = np.random.default_rng(0)
    p = sop_params(rng, 8, 3)
    out = sop_forward(Tensor(rng.standard_normal((4, 5, 8))), p)
    assert out.shape == (1, 1, 8)


def test_sop_covariance_is_raw_gram_matrix() -> None:
    """The covariance is y^T y of the channel-reduced positions, without centering."""
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        p = sop_params(rng, 6, 2)
        x = rng.standard_normal((3, 3, 6))
        cov = sop_covariance(Tensor(x), p).numpy()
    y = x.reshape(9, 6) @ p.reduce.weight.data + p.reduce.bias.data
    np.testing.assert_allclose(cov, y.T @ y, rtol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_sop_covariance_is_symmetric_positive_semidefinite(seed: int) -> None:
    """The pooled covariance is symmetric with no negative eigenvalues, single grids and stacks alike."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        p = sop_params(rng, 8, 4)
        single = sop_covariance(Tensor(rng.standard_normal((3, 4, 8))), p).numpy()
        stacked = sop_covariance(Tensor(rng.standard_normal((2, 3, 3, 8))), p).numpy()
    for cov in (single, *stacked):
        assert cov.shape == (4, 4)
        np.testing.assert_allclose(cov, cov.T, rtol=1e-12, atol=1e-12)
        tol = 1e-10 * max(1.0, float(np.abs(cov).max()))
        assert np.linalg.eigvalsh(cov).min() >= -tol


def test_sop_ignores_position_order() -> None:
    """Shuffling the spatial positions leaves the pooled vector unchanged."""
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        p = sop_params(rng, 8, 4)
        x = rng.standard_normal((3, 4, 8))
        shuffled = x.reshape(12, 8)[rng.permutation(12)].reshape(3, 4, 8)
        a = sop_forward(Tensor(x), p).numpy()
        b = sop_forward(Tensor(shuffled), p).numpy()
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_gsm_is_invariant_to_image_order() -> None:
    """Group pooling does not depend on the order of the album's images."""
    rng = np.random.default_rng(3)
    with default_dtype(np.float64):
        inner, outer = sop_params(rng, 8, 3), sop_params(rng, 8, 3)
        grids = [Tensor(rng.standard_normal((2, 3, 8))) for _ in range(5)]
        a = gsm_forward(grids, inner, outer).numpy()
        b = gsm_forward(grids[::-1], inner, outer).numpy()
    assert a.shape == (1, 1, 8)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_gsm_accepts_a_stacked_album() -> None:
    """A pre-stacked N x h x w x d tensor gives the same result as a list."""
    rng = np.random.default_rng(4)
    with default_dtype(np.float64):
        inner, outer = sop_params(rng, 8, 3), sop_params(rng, 8, 3)
        stacked = rng.standard_normal((3, 2, 2, 8))
        a = gsm_forward(Tensor(stacked), inner, outer).numpy()
        b = gsm_forward([Tensor(g) for g in stacked], inner, outer).numpy()
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_gsm_rejects_empty_album() -> None:
    """At least one image is required."""
    p = sop_params(np.random.default_rng(0), 8, 3)
    with pytest.raises(ContractError):
        gsm_forward([], p, p)


def test_sop_rejects_bad_shapes() -> None:
    """Channel width and reduced count are checked."""
    rng = np.random.default_rng(5)
    with pytest.raises(DimensionError):
        sop_params(rng, 4, 5)
    with pytest.raises(DimensionError):
        sop_forward(Tensor(np.zeros((2, 2, 5))), sop_params(rng, 4, 2))


def test_class_activation_map_is_positionwise_dot_product() -> None:
    """Each cell is the dot product of the grid vector with the aggregation."""
    rng = np.random.default_rng(6)
    grid = rng.standard_normal((3, 4, 5))
    a = rng.standard_normal((1, 1, 5))
    with default_dtype(np.float64):
        cam = class_activation_map(Tensor(grid), Tensor(a)).numpy()
    np.testing.assert_allclose(cam, np.einsum("hwd,d->hw", grid, a.ravel()), rtol=1e-10)
    with pytest.raises(DimensionError):
        class_activation_map(Tensor(grid), Tensor(np.ones(4)))
