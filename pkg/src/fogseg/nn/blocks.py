"""
Composite blocks
----------------

Classes:
    BlockConfig:      Validated channel/dilation/dropout settings shared by the blocks
    Downsampler:      Parallel 3x3 stride-2 conv and 2x2 max pool, concatenated, then BN + ReLU
    NonBottleneck1D:  Two factorized (3x1, 1x3) conv pairs with a residual add
    DenseBlock:       L layers of BN -> ReLU -> 3x3 conv, each fed every earlier output
    Transition:       1x1 conv -> BN -> ReLU -> 2x2 average pool

All blocks keep their parameters in the registry passed at construction, under the block's
prefix, and never hold state besides that.
"""

from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..core import functional as F
from ..core.tensor import Tensor
from ..errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Dropout2d, Module
from .params import ParamRegistry


class BlockConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    in_channels: int
    out_channels: int
    dilation: int = 1
    dropout_p: float = 0.0
    growth_rate: int = 12
    layers_per_dense_block: int = 4

    @model_validator(mode='after')
    def _check(self) -> 'BlockConfig':
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.growth_rate < 1 or self.layers_per_dense_block < 0:
            raise ValueError("growth_rate must be >= 1 and layers_per_dense_block >= 0")
        return self

# ----------------------------------------------------------------------------------------------------------


class Downsampler(Module):
    """Halves H and W; the conv branch contributes ``out - in`` channels, the pool branch ``in``."""

    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, out_channels: int) -> None:
        super().__init__(registry, prefix)
        if out_channels <= in_channels:
            raise ConfigError(f"{prefix}: downsampler needs out_channels > in_channels, "
                              f"got {in_channels}->{out_channels}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.conv = self.child(Conv2d(registry, self.name('conv'), in_channels, out_channels - in_channels,
                                      3, stride=2, padding=1, bias=False))
        self.bn = self.child(BatchNorm2d(registry, self.name('bn'), out_channels))

    @classmethod
    def from_config(cls, registry: ParamRegistry, prefix: str, cfg: BlockConfig) -> 'Downsampler':
        return cls(registry, prefix, cfg.in_channels, cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = F.concat_channels(self.conv(x), F.max_pool2d(x))
        return F.relu(self.bn(out))


class NonBottleneck1D(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, channels: int, dilation: int = 1,
                 dropout_p: float = 0.0, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__(registry, prefix)
        if dilation < 1:
            raise ConfigError(f"{prefix}: dilation must be >= 1, got {dilation}")
        c, d = channels, dilation
        self.conv3x1_1 = self.child(Conv2d(registry, self.name('conv3x1_1'), c, c, (3, 1), padding=(1, 0)))
        self.conv1x3_1 = self.child(Conv2d(registry, self.name('conv1x3_1'), c, c, (1, 3), padding=(0, 1)))
        self.bn1 = self.child(BatchNorm2d(registry, self.name('bn1'), c))
        self.conv3x1_2 = self.child(Conv2d(registry, self.name('conv3x1_2'), c, c, (3, 1),
                                           padding=(d, 0), dilation=(d, 1)))
        self.conv1x3_2 = self.child(Conv2d(registry, self.name('conv1x3_2'), c, c, (1, 3),
                                           padding=(0, d), dilation=(1, d)))
        self.bn2 = self.child(BatchNorm2d(registry, self.name('bn2'), c))
        self.dropout = self.child(Dropout2d(dropout_p, rng))

    @classmethod
    def from_config(cls, registry: ParamRegistry, prefix: str, cfg: BlockConfig,
                    rng: Optional[np.random.Generator] = None) -> 'NonBottleneck1D':
        if cfg.in_channels != cfg.out_channels:
            raise ConfigError(f"{prefix}: non-bottleneck blocks preserve channels")
        return cls(registry, prefix, cfg.in_channels, cfg.dilation, cfg.dropout_p, rng)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.conv3x1_1(x))
        out = F.relu(self.bn1(self.conv1x3_1(out)))
        out = F.relu(self.conv3x1_2(out))
        out = self.dropout(self.bn2(self.conv1x3_2(out)))
        return F.relu(F.elementwise_add(out, x))


class DenseBlock(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, growth_rate: int = 12,
                 layers: int = 4) -> None:
        super().__init__(registry, prefix)
        self.in_channels, self.growth_rate = in_channels, growth_rate
        self.layers: List[tuple] = []
        for i in range(layers):
            width = in_channels + i * growth_rate
            bn = self.child(BatchNorm2d(registry, self.name(f'layer{i}.bn'), width))
            conv = self.child(Conv2d(registry, self.name(f'layer{i}.conv'), width, growth_rate, 3, padding=1))
            self.layers.append((bn, conv))

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.layers) * self.growth_rate

    @classmethod
    def from_config(cls, registry: ParamRegistry, prefix: str, cfg: BlockConfig) -> 'DenseBlock':
        return cls(registry, prefix, cfg.in_channels, cfg.growth_rate, cfg.layers_per_dense_block)

    def forward(self, x: Tensor) -> Tensor:
        features = [x]
        for bn, conv in self.layers:
            inp = F.concat_channels(*features)
            features.append(conv(F.relu(bn(inp))))
        return F.concat_channels(*features)


class Transition(Module):
    """Channel projection; ``pool=False`` keeps the resolution (used for the last dense stage)."""

    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, out_channels: int,
                 pool: bool = True) -> None:
        super().__init__(registry, prefix)
        self.pool = pool
        self.conv = self.child(Conv2d(registry, self.name('conv'), in_channels, out_channels, 1, bias=False))
        self.bn = self.child(BatchNorm2d(registry, self.name('bn'), out_channels))

    @classmethod
    def from_config(cls, registry: ParamRegistry, prefix: str, cfg: BlockConfig) -> 'Transition':
        return cls(registry, prefix, cfg.in_channels, cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn(self.conv(x)))
        return F.avg_pool2d(out) if self.pool else out
