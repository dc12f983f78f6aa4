"""
Compact generalized non-local attention with a linear (dot-product) kernel.

For each channel group the non-local response sum_j f(theta_i, phi_j) g_j over
all positions and channels collapses to theta_vec * (phi_vec . g_vec), so the
(R*D)^2 similarity matrix is never built.
"""
from __future__ import annotations

import logging

import numpy as np

from . import Tensor as T
from .Exceptions import ArgumentError, ShapeError
from .Layers import Module, xavier_uniform
from .Tensor import Tensor

logger = logging.getLogger(__name__)


class CGNLBlock(Module):
    """
    Learnable maps theta, phi, g (D x D) and the output map z (D x D, zero at init).

    With z = 0 the block is the identity, so inserting it into a trained
    pipeline leaves the outputs unchanged until z is learned.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator):
        if channels < 1 or groups < 1 or channels % groups:
            raise ArgumentError(f'CGNLBlock: {groups} groups do not divide {channels} channels.')
        self.channels = channels
        self.groups = groups
        self.theta = Tensor(xavier_uniform(rng, channels, channels), requires_grad=True)
        self.phi = Tensor(xavier_uniform(rng, channels, channels), requires_grad=True)
        self.g = Tensor(xavier_uniform(rng, channels, channels), requires_grad=True)
        self.z = Tensor(np.zeros((channels, channels)), requires_grad=True)

    def scale(self, rows: int) -> float:
        return 1.0 / (rows * (self.channels // self.groups))

    def __call__(self, features: Tensor) -> Tensor:
        return cgnl_forward(features, self)


def cgnl_forward(features: Tensor, block: CGNLBlock) -> Tensor:
    """
    A' = A + Y z where, per channel group, Y_g = theta_g * (phi_g . g_g) / (R * D/groups).

    The group inner product is a correctly rounded sum, so permuting the rows of A
    permutes the rows of A' exactly.
    """
    if features.ndim != 2 or features.shape[1] != block.channels:
        raise ShapeError('cgnl_forward', features.shape, (None, block.channels))
    rows = features.shape[0]
    if rows < 1:
        raise ArgumentError('cgnl_forward needs at least one row.')
    theta = T.matmul(features, block.theta)
    phi = T.matmul(features, block.phi)
    g = T.matmul(features, block.g)

    width = block.channels // block.groups
    scale = block.scale(rows)
    responses = []
    for k in range(block.groups):
        cols = slice(k * width, (k + 1) * width)
        similarity = T.exact_sum(T.mul(phi[:, cols], g[:, cols]))
        responses.append(T.scale(T.mul(theta[:, cols], similarity), scale))
    response = responses[0] if block.groups == 1 else T.concat(responses, axis=1)
    return T.add(features, T.matmul(response, block.z))
