"""
Layer modules
-------------

Thin stateful wrappers over ``core.functional``: each layer registers its parameters in a
``ParamRegistry`` under ``<prefix>.<leaf>`` when constructed and reads them back on every
forward pass. ``Module`` carries the train/eval flag and propagates it to children.
"""

from typing import List, Optional, Tuple, Union

import numpy as np

from ..core import functional as F
from ..core.tensor import Tensor
from ..errors import ConfigError
from .params import ParamRegistry

IntPair = Union[int, Tuple[int, int]]


class Module:
    def __init__(self, registry: ParamRegistry, prefix: str) -> None:
        self.registry = registry
        self.prefix = prefix
        self.training = True
        self._children: List['Module'] = []

    def name(self, leaf: str) -> str:
        return f"{self.prefix}.{leaf}" if self.prefix else leaf

    def child(self, module: 'Module') -> 'Module':
        self._children.append(module)
        return module

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for module in self._children:
            module.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.registry.with_prefix(self.prefix)]

    def forward(self, *args, **kwargs) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

# ----------------------------------------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, out_channels: int,
                 kernel: IntPair, stride: IntPair = 1, padding: IntPair = 0, dilation: IntPair = 1,
                 bias: bool = True) -> None:
        super().__init__(registry, prefix)
        if in_channels < 1 or out_channels < 1:
            raise ConfigError(f"{prefix}: channel counts must be >= 1, got {in_channels}->{out_channels}")
        kh, kw = F._pair(kernel)
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = registry.add(self.name('weight'), (out_channels, in_channels, kh, kw),
                                   'weight', fan_in=in_channels * kh * kw)
        self.bias = registry.add(self.name('bias'), (out_channels,), 'bias') if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, out_channels: int,
                 kernel: IntPair, stride: IntPair = 1, padding: IntPair = 0,
                 output_padding: IntPair = 0, bias: bool = True) -> None:
        super().__init__(registry, prefix)
        kh, kw = F._pair(kernel)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = registry.add(self.name('weight'), (in_channels, out_channels, kh, kw),
                                   'weight', fan_in=out_channels * kh * kw)
        self.bias = registry.add(self.name('bias'), (out_channels,), 'bias') if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5) -> None:
        super().__init__(registry, prefix)
        self.momentum, self.eps = momentum, eps
        self.gamma = registry.add(self.name('gamma'), (channels,), 'gamma')
        self.beta = registry.add(self.name('beta'), (channels,), 'beta')
        registry.add_buffer(self.name('running_mean'), np.zeros(channels))
        registry.add_buffer(self.name('running_var'), np.ones(channels))
        self.gamma.data[...] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(
            x, self.gamma, self.beta,
            self.registry.buffer(self.name('running_mean')),
            self.registry.buffer(self.name('running_var')),
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Dropout2d(Module):
    def __init__(self, p: float, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__(ParamRegistry(), '')
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout2d(x, self.p, self.training, self.rng)
