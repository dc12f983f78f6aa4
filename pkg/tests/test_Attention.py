"""Compact non-local attention against a dense kernel that materializes every pairwise term."""

from __future__ import annotations

import numpy as np
import pytest

from pymlcvnet import Tensor as T
from pymlcvnet.Attention import CGNLBlock, cgnl_forward
from pymlcvnet.Exceptions import ArgumentError, ShapeError
from pymlcvnet.Layers import component_rng
from pymlcvnet.Tensor import Tensor, grad_check


def _dense_oracle(features: np.ndarray, block: CGNLBlock) -> np.ndarray:
    """Builds the (R*w) x (R*w) kernel theta_vec phi_vec^T per group and applies it to g_vec."""
    rows = features.shape[0]
    width = block.channels // block.groups
    theta, phi, g = features @ block.theta.data, features @ block.phi.data, features @ block.g.data
    response = np.zeros_like(features)
    for k in range(block.groups):
        cols = slice(k * width, (k + 1) * width)
        theta_vec = theta[:, cols].reshape(-1)
        phi_vec = phi[:, cols].reshape(-1)
        g_vec = g[:, cols].reshape(-1)
        kernel = np.outer(theta_vec, phi_vec)
        response[:, cols] = (kernel @ g_vec).reshape(rows, width) / (rows * width)
    return features + response @ block.z.data


def _block(rng, channels, groups, random_z=True) -> CGNLBlock:
    block = CGNLBlock(channels, groups, rng)
    if random_z:
        block.z = Tensor(rng.normal(size=(channels, channels)), requires_grad=True)
    return block


def test_hand_example_with_ones_and_identity_output():
    block = CGNLBlock(2, 1, component_rng(0, 'cgnl'))
    for name in ('theta', 'phi', 'g'):
        getattr(block, name).data[:] = 1.0
    block.z = Tensor(np.eye(2))
    out = cgnl_forward(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), block)
    np.testing.assert_allclose(out.data, [[88.0, 89.0], [206.0, 207.0]], atol=1e-12)


def test_compact_form_matches_dense_kernel(rng):
    for _ in range(50):
        groups = int(rng.choice([1, 2, 4]))
        channels = groups * int(rng.integers(1, 32 // groups + 1))
        rows = int(rng.integers(1, 17))
        block = _block(rng, channels, groups)
        features = rng.normal(size=(rows, channels))
        np.testing.assert_allclose(cgnl_forward(Tensor(features), block).data, _dense_oracle(features, block),
                                   rtol=0, atol=1e-9)


def test_zero_initialized_output_map_is_identity(rng):
    block = CGNLBlock(16, 4, rng)
    features = rng.normal(size=(9, 16))
    np.testing.assert_array_equal(cgnl_forward(Tensor(features), block).data, features)


def test_row_permutation_equivariance(rng):
    block = _block(rng, 16, 2)
    features = rng.normal(size=(12, 16))
    order = rng.permutation(12)
    out = cgnl_forward(Tensor(features), block).data
    permuted = cgnl_forward(Tensor(features[order]), block).data
    np.testing.assert_allclose(permuted, out[order], rtol=0, atol=1e-12)


def test_group_inner_product_is_order_independent(rng):
    values = rng.normal(size=(12, 8))
    order = rng.permutation(12)
    assert T.exact_sum(Tensor(values)).item() == T.exact_sum(Tensor(values[order])).item()


@pytest.mark.parametrize('groups', [1, 2, 4])
def test_gradients(rng, groups):
    block = _block(rng, 16, groups)
    features = Tensor(rng.normal(size=(8, 16)))
    weights = rng.normal(size=(8, 16))

    def function(*_):
        return T.sum(T.mul(cgnl_forward(features, block), weights))
    assert grad_check(function, [features, block.theta, block.phi, block.g, block.z]) < 1e-4


def test_bad_group_count_and_width():
    with pytest.raises(ArgumentError):
        CGNLBlock(10, 4, component_rng(0, 'cgnl'))
    block = CGNLBlock(8, 2, component_rng(0, 'cgnl'))
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((3, 6))))
