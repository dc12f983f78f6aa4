"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a Node on its output when gradients are enabled and at least one
input requires them. `backward` walks the resulting Graph in reverse topological
order and accumulates gradients into the leaves.
"""
from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .Exceptions import ArgumentError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass
class Node:
    op: str
    inputs: Tuple['Tensor', ...]
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad: bool = requires_grad
        self.name: Optional[str] = name
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f'item() needs a single-element tensor, got shape {self.shape}.')
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f', name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})'

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return self.__mul__(other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return getitem(self, key)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], op: str,
            backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out.node = Node(op, inputs, backward_fn)
    return out


class Graph:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, order: list[Tensor]):
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t.node is None]

    def __len__(self):
        return len(self.order)


def backward(output: Tensor, graph: Optional[Graph] = None) -> None:
    """
    Populate `.grad` on every leaf that requires gradients.

    Gradients accumulate across calls until `zero_grad` is called on the leaves.
    """
    if output.size != 1:
        raise ArgumentError(f'backward needs a scalar output, got shape {output.shape}.')
    if not output.requires_grad:
        return
    graph = graph or Graph.from_output(output)
    pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for tensor in reversed(graph.order):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        for parent, parent_grad in zip(tensor.node.inputs, tensor.node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _check_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.reshape((-1,) + shape).sum(axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), 'matmul', grad_fn)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('add', a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), 'add', grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('sub', a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _result(a.data - b.data, (a, b), 'sub', grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('mul', a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), 'mul', grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def grad_fn(g):
        return (g * factor,)
    return _result(a.data * factor, (a,), 'scale', grad_fn)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def grad_fn(g):
        return (g * mask,)
    return _result(np.where(mask, a.data, 0.0), (a,), 'relu', grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ArgumentError('concat needs at least one tensor.')
    reference = tensors[0].shape
    ax = axis % len(reference)
    for t in tensors[1:]:
        if len(t.shape) != len(reference) or any(
                t.shape[d] != reference[d] for d in range(len(reference)) if d != ax):
            raise ShapeError('concat', reference, t.shape)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, 'concat', grad_fn)


def max_reduce(a: Tensor, axis: int) -> Tuple[Tensor, np.ndarray]:
    """Maximum along `axis`; returns the values and the (first) argmax indices."""
    a = as_tensor(a)
    ax = axis % a.ndim
    argmax = np.argmax(a.data, axis=ax)
    values = np.take_along_axis(a.data, np.expand_dims(argmax, ax), axis=ax).squeeze(ax)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(argmax, ax), np.expand_dims(g, ax), axis=ax)
        return (grad,)
    return _result(values, (a,), 'max_reduce', grad_fn), argmax


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                  training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    Per-channel batch normalization over the rows of an (R, C) tensor.

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place (running = momentum * running + (1 - momentum) * batch).
    In inference mode the running statistics are used and the op is affine.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError('batch_norm_1d', x.shape, gamma.shape)

    if training:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    rows = x.shape[0]

    def grad_fn(g):
        d_gamma = np.sum(g * x_hat, axis=0)
        d_beta = np.sum(g, axis=0)
        d_hat = g * gamma.data
        if training:
            d_x = (inv_std / rows) * (rows * d_hat - d_hat.sum(axis=0) - x_hat * np.sum(d_hat * x_hat, axis=0))
        else:
            d_x = d_hat * inv_std
        return d_x, d_gamma, d_beta
    return _result(x_hat * gamma.data + beta.data, (x, gamma, beta), 'batch_norm_1d', grad_fn)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.data, axes), (a,), 'transpose', grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError('reshape', original, tuple(shape))

    def grad_fn(g):
        return (g.reshape(original),)
    return _result(data, (a,), 'reshape', grad_fn)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the first axis; `indices` may have any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ArgumentError(f'take_rows: indices out of range for {a.shape[0]} rows.')

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, indices, g)
        return (grad,)
    return _result(a.data[indices], (a,), 'take_rows', grad_fn)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        grad[key] += g
        return (grad,)
    return _result(a.data[key], (a,), 'getitem', grad_fn)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _result(np.sum(a.data, axis=axis), (a,), 'sum', grad_fn)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def exact_sum(a: Tensor) -> Tensor:
    """Correctly rounded sum of all elements; independent of element order."""
    a = as_tensor(a)

    def grad_fn(g):
        return (np.full_like(a.data, float(g)),)
    return _result(np.array(math.fsum(a.data.ravel().tolist())), (a,), 'exact_sum', grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - log_norm
    softmax = np.exp(out)

    def grad_fn(g):
        return (g - softmax * np.sum(g, axis=axis, keepdims=True),)
    return _result(out, (a,), 'log_softmax', grad_fn)


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    a = as_tensor(a)
    magnitude = np.abs(a.data)
    quadratic = magnitude < beta
    out = np.where(quadratic, 0.5 * a.data ** 2 / beta, magnitude - 0.5 * beta)

    def grad_fn(g):
        return (g * np.where(quadratic, a.data / beta, np.sign(a.data)),)
    return _result(out, (a,), 'smooth_l1', grad_fn)


def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_probes: Optional[int] = None, seed: int = 0) -> float:
    """
    Compare analytic gradients against central finite differences.

    :param function: Maps the input tensors to a scalar tensor.
    :param inputs: Tensors to differentiate with respect to; their `.grad` is reset.
    :param eps: Finite-difference step.
    :param max_probes: If given, check at most this many randomly chosen elements per input.
    :param seed: Seed for the probe selection.
    :return: Max over probed elements of |a - n| / max(|a|, |n|, 1e-8).
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    output = function(*inputs)
    backward(output)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_probe = None
    with no_grad():
        for position, (t, grad) in enumerate(zip(inputs, analytic)):
            probes = np.arange(t.size)
            if max_probes is not None and t.size > max_probes:
                probes = np.sort(rng.choice(t.size, size=max_probes, replace=False))
            if not t.data.flags.c_contiguous:
                t.data = t.data.copy()
            flat = t.data.reshape(-1)
            for index in probes:
                original = flat[index]
                flat[index] = original + eps
                plus = function(*inputs).item()
                flat[index] = original - eps
                minus = function(*inputs).item()
                flat[index] = original
                numeric = (plus - minus) / (2.0 * eps)
                exact = grad.reshape(-1)[index]
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                if error > worst:
                    worst = error
                    worst_probe = (position, int(index), float(exact), float(numeric))
    if worst_probe is not None:
        logger.debug(f'grad_check worst probe (input, index, analytic, numeric): {worst_probe}, error {worst:.3e}')
    return worst
