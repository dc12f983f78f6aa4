from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import Tensor as T
from .Exceptions import ArgumentError, ShapeError
from .Tensor import Tensor

logger = logging.getLogger(__name__)


def component_rng(seed: int, name: str) -> np.random.Generator:
    """
    Independent random stream per named component.

    Components that exist in several model variants draw identical initial weights
    regardless of which other components are present.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode('utf-8'))])


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """
    Base class for anything holding parameters.

    Parameters are Tensor attributes, buffers are numpy attributes named in
    `buffer_names`, and children are Module attributes or lists of Modules.
    """
    buffer_names: Tuple[str, ...] = ()

    def _children(self) -> Iterator[Tuple[str, Module]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f'{key}.{i}', child

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield f'{prefix}{key}', value
        for key, child in self._children():
            yield from child.named_parameters(f'{prefix}{key}.')

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for key in self.buffer_names:
            yield f'{prefix}{key}', getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f'{prefix}{key}.')

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into parameters and buffers in place."""
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if strict and (missing or unexpected):
            raise ArgumentError(f'State mismatch. Missing: {missing}. Unexpected: {unexpected}.')
        for name, target in targets.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeError(f'load_state_dict[{name}]', target.shape, value.shape)
            target[...] = value


class Linear(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        if zero_init:
            weight = np.zeros((in_channels, out_channels))
        else:
            weight = xavier_uniform(rng, in_channels, out_channels)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias: Optional[Tensor] = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class BatchNorm1d(Module):
    buffer_names = ('running_mean', 'running_var')

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.population: Optional[RowStatistics] = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.population is not None:
            self.population.add(x.data)
        return T.batch_norm_1d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class SharedMLP(Module):
    """
    Per-row MLP: linear -> batch_norm -> relu for each width.

    With `activate_last=False` the final width is a plain linear output layer.
    """

    def __init__(self, in_channels: int, widths: Sequence[int], rng: np.random.Generator,
                 batch_norm: bool = True, activate_last: bool = True, zero_init_last: bool = False):
        if not widths:
            raise ArgumentError('SharedMLP needs at least one width.')
        self.in_channels = in_channels
        self.widths = list(widths)
        self.activate_last = activate_last
        self.linears: list[Linear] = []
        self.norms: list[BatchNorm1d] = []
        previous = in_channels
        for i, width in enumerate(widths):
            last = i == len(widths) - 1
            self.linears.append(Linear(previous, width, rng, zero_init=zero_init_last and last))
            if batch_norm and (activate_last or not last):
                self.norms.append(BatchNorm1d(width))
            previous = width
        self.batch_norm = batch_norm

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_channels:
            raise ShapeError('SharedMLP', x.shape, (None, self.in_channels))
        for i, linear in enumerate(self.linears):
            x = linear(x)
            last = i == len(self.linears) - 1
            if last and not self.activate_last:
                break
            if self.batch_norm:
                x = self.norms[i](x, training)
            x = T.relu(x)
        return x


@dataclass
class RowStatistics:
    """Running per-channel mean and variance over every row passed to `add`."""
    channels: int
    count: int = 0
    mean: np.ndarray = field(init=False)
    m2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.zeros(self.channels)
        self.m2 = np.zeros(self.channels)

    def add(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        n = rows.shape[0]
        if n == 0:
            return
        batch_mean = rows.mean(axis=0)
        batch_m2 = ((rows - batch_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + batch_m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.ones(self.channels)


def recalibrate_batch_norm(module: Module, passes: Iterable[Callable[[], object]]) -> int:
    """
    Replace every BatchNorm1d running statistic with the pooled statistics of its inputs.

    Each pass is a callable that runs one training-mode forward through `module`.
    Norms that see no rows keep their previous statistics, and so does every norm
    when a pass raises.

    :param module: Root module whose norms are recalibrated.
    :param passes: Forward callables, run in order without recording a graph.
    :return: Number of passes run.
    """
    norms = [m for m in module.modules() if isinstance(m, BatchNorm1d)]
    saved = [(norm.running_mean.copy(), norm.running_var.copy()) for norm in norms]
    for norm in norms:
        norm.population = RowStatistics(norm.running_mean.shape[0])
    count, completed = 0, False
    try:
        with T.no_grad():
            for forward in passes:
                forward()
                count += 1
        completed = True
    finally:
        for norm, (mean, var) in zip(norms, saved):
            population, norm.population = norm.population, None
            if completed and population.count:
                norm.running_mean[...] = population.mean
                norm.running_var[...] = population.var
            else:
                norm.running_mean[...] = mean
                norm.running_var[...] = var
    logger.debug(f'recalibrate_batch_norm: {len(norms)} norms over {count} passes')
    return count
