"""
Two-encoder segmentation network
--------------------------------

``SegNet`` couples an RGB encoder (downsamplers plus plain and dilated non-bottleneck
blocks) with a luminance/depth encoder (downsampler plus dense blocks and transitions).
The two encoders meet at three matched stages (16, 64 and 128 channels at 1/2, 1/4 and 1/8
resolution) where their feature maps are summed. The fused maps feed a decoder that
upsamples back to full resolution through two skip-connected stages and emits raw
per-class logits.

``use_depth`` selects the two-channel luminance+depth encoder (E_LD) or the
luminance-only variant (E_L); ``forward(rgb, ld=None)`` runs the RGB path alone.
"""

from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .. import config
from ..core import functional as F
from ..core.tensor import Tensor
from ..errors import ShapeError
from .blocks import DenseBlock, Downsampler, NonBottleneck1D, Transition
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .params import ParamRegistry, init_params, param_count

Stages = Tuple[Tensor, Tensor, Tensor]

SEG_PREFIXES = ('rgb_encoder', 'ld_encoder', 'decoder')


class SegNetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_classes: int = config.NUM_CLASSES
    stage_channels: Tuple[int, int, int] = (16, 64, 128)
    use_depth: bool = True
    input_height: int = 64
    input_width: int = 128
    rgb_plain_blocks: int = 5
    dilations: Tuple[int, ...] = (2, 4, 8, 16, 2, 4, 8, 16)
    decoder_blocks: int = 2
    dense_growth: int = 12
    dense_layers: int = 4
    dropout_p: float = 0.0

    @field_validator('stage_channels')
    @classmethod
    def _increasing(cls, value):
        if len(value) != 3 or value[0] < 1 or not (value[0] < value[1] < value[2]):
            raise ValueError(f"stage_channels must be 3 strictly increasing positive ints, got {value}")
        return value

    @model_validator(mode='after')
    def _dims(self) -> 'SegNetConfig':
        if self.input_height % 8 or self.input_width % 8:
            raise ValueError(f"input dims must be multiples of 8, got {self.input_height}x{self.input_width}")
        if self.stage_channels[0] <= 3:
            raise ValueError("first stage must be wider than the 3-channel RGB input")
        return self

    @property
    def ld_channels(self) -> int:
        return 2 if self.use_depth else 1

    @classmethod
    def from_run_config(cls, run: 'config.RunConfig') -> 'SegNetConfig':
        return cls(
            num_classes=run.num_classes, stage_channels=run.stage_channels, use_depth=run.use_depth,
            input_height=run.height, input_width=run.width, rgb_plain_blocks=run.rgb_plain_blocks,
            dilations=run.dilations, decoder_blocks=run.decoder_blocks, dense_growth=run.dense_growth,
            dense_layers=run.dense_layers, dropout_p=run.dropout_p,
        )

# ----------------------------------------------------------------------------------------------------------


class RGBEncoder(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, cfg: SegNetConfig,
                 rng: np.random.Generator) -> None:
        super().__init__(registry, prefix)
        c16, c64, c128 = cfg.stage_channels
        self.down0 = self.child(Downsampler(registry, self.name('down0'), 3, c16))
        self.down1 = self.child(Downsampler(registry, self.name('down1'), c16, c64))
        self.down2 = self.child(Downsampler(registry, self.name('down2'), c64, c128))
        self.blocks = [
            self.child(NonBottleneck1D(registry, self.name(f'plain{i}'), c128, 1, cfg.dropout_p, rng))
            for i in range(cfg.rgb_plain_blocks)
        ]
        self.blocks += [
            self.child(NonBottleneck1D(registry, self.name(f'dilated{i}'), c128, d, cfg.dropout_p, rng))
            for i, d in enumerate(cfg.dilations)
        ]

    def forward(self, rgb: Tensor) -> Stages:
        f16 = self.down0(rgb)
        f64 = self.down1(f16)
        f128 = self.down2(f64)
        for block in self.blocks:
            f128 = block(f128)
        return f16, f64, f128


class LDEncoder(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, cfg: SegNetConfig) -> None:
        super().__init__(registry, prefix)
        c16, c64, c128 = cfg.stage_channels
        g, layers = cfg.dense_growth, cfg.dense_layers
        self.in_channels = cfg.ld_channels
        self.down = self.child(Downsampler(registry, self.name('down'), self.in_channels, c16))
        self.dense1 = self.child(DenseBlock(registry, self.name('dense1'), c16, g, layers))
        self.trans1 = self.child(Transition(registry, self.name('trans1'), self.dense1.out_channels, c64))
        self.dense2 = self.child(DenseBlock(registry, self.name('dense2'), c64, g, layers))
        self.trans2 = self.child(Transition(registry, self.name('trans2'), self.dense2.out_channels, c128))
        self.dense3 = self.child(DenseBlock(registry, self.name('dense3'), c128, g, layers))
        # the downsampler already halved once, so the last stage projects without pooling
        self.trans3 = self.child(Transition(registry, self.name('trans3'), self.dense3.out_channels, c128,
                                            pool=False))

    def forward(self, ld: Tensor) -> Stages:
        if ld.ndim != 4 or ld.shape[1] != self.in_channels:
            raise ShapeError('encode_ld', 'channels', self.in_channels, ld.shape[1] if ld.ndim == 4 else ld.shape)
        g16 = self.down(ld)
        g64 = self.trans1(self.dense1(g16))
        g128 = self.trans3(self.dense3(self.trans2(self.dense2(g64))))
        return g16, g64, g128


class UpStage(Module):
    """Transposed conv x2 -> BN -> ReLU, concat skip, 1x1 projection, non-bottleneck blocks."""

    def __init__(self, registry: ParamRegistry, prefix: str, in_channels: int, out_channels: int,
                 blocks: int, dropout_p: float, rng: np.random.Generator) -> None:
        super().__init__(registry, prefix)
        self.up = self.child(ConvTranspose2d(registry, self.name('up'), in_channels, out_channels, 3,
                                             stride=2, padding=1, output_padding=1, bias=False))
        self.bn = self.child(BatchNorm2d(registry, self.name('bn'), out_channels))
        self.project = self.child(Conv2d(registry, self.name('project'), 2 * out_channels, out_channels, 1))
        self.blocks = [
            self.child(NonBottleneck1D(registry, self.name(f'nb{i}'), out_channels, 1, dropout_p, rng))
            for i in range(blocks)
        ]

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        out = F.relu(self.bn(self.up(x)))
        if out.shape != skip.shape:
            raise ShapeError('decode', 'skip shape', out.shape, skip.shape)
        out = self.project(F.concat_channels(out, skip))
        for block in self.blocks:
            out = block(out)
        return out


class Decoder(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, cfg: SegNetConfig,
                 rng: np.random.Generator) -> None:
        super().__init__(registry, prefix)
        c16, c64, c128 = cfg.stage_channels
        self.stage1 = self.child(UpStage(registry, self.name('stage1'), c128, c64, cfg.decoder_blocks,
                                         cfg.dropout_p, rng))
        self.stage2 = self.child(UpStage(registry, self.name('stage2'), c64, c16, cfg.decoder_blocks,
                                         cfg.dropout_p, rng))
        self.head = self.child(ConvTranspose2d(registry, self.name('head'), c16, cfg.num_classes, 2, stride=2))

    def forward(self, fused128: Tensor, skip64: Tensor, skip16: Tensor) -> Tensor:
        out = self.stage1(fused128, skip64)
        out = self.stage2(out, skip16)
        return self.head(out)

# ----------------------------------------------------------------------------------------------------------


def fuse(rgb_stage: Tensor, ld_stage: Tensor) -> Tensor:
    """Element-wise sum of matched encoder stages."""
    if rgb_stage.shape != ld_stage.shape:
        raise ShapeError('fuse', 'stage shape', rgb_stage.shape, ld_stage.shape)
    return rgb_stage + ld_stage


class SegNet(Module):
    def __init__(self, cfg: Optional[SegNetConfig] = None, registry: Optional[ParamRegistry] = None,
                 seed: int = 0) -> None:
        super().__init__(registry if registry is not None else ParamRegistry(), '')
        self.cfg = cfg or SegNetConfig()
        self.rng = np.random.default_rng(seed)
        self.rgb_encoder = self.child(RGBEncoder(self.registry, 'rgb_encoder', self.cfg, self.rng))
        self.ld_encoder = self.child(LDEncoder(self.registry, 'ld_encoder', self.cfg))
        self.decoder = self.child(Decoder(self.registry, 'decoder', self.cfg, self.rng))

    def parameters(self):
        return [t for n, t in self.registry.items() if n.split('.')[0] in SEG_PREFIXES]

    def init(self, seed: int = 0, scheme: str = 'kaiming_uniform') -> 'SegNet':
        init_params(self.registry, scheme, seed, prefix=SEG_PREFIXES)
        return self

    def reseed(self, seed: int, epoch: int = 0) -> None:
        """Reset the dropout stream so an epoch draws the same masks on every run."""
        self.rng.bit_generator.state = np.random.default_rng([seed, epoch, 99]).bit_generator.state

    def _check_rgb(self, rgb: Tensor) -> None:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeError('encode_rgb', 'channels', 3, rgb.shape[1] if rgb.ndim == 4 else rgb.shape)
        if rgb.shape[2] % 8:
            raise ShapeError('encode_rgb', 'height', 'multiple of 8', rgb.shape[2])
        if rgb.shape[3] % 8:
            raise ShapeError('encode_rgb', 'width', 'multiple of 8', rgb.shape[3])

    def encode_rgb(self, rgb: Tensor) -> Stages:
        self._check_rgb(rgb)
        return self.rgb_encoder(rgb)

    def encode_ld(self, ld: Tensor) -> Stages:
        return self.ld_encoder(ld)

    def decode(self, fused128: Tensor, skip64: Tensor, skip16: Tensor) -> Tensor:
        return self.decoder(fused128, skip64, skip16)

    def forward(self, rgb: Tensor, ld: Optional[Tensor] = None) -> Tensor:
        f16, f64, f128 = self.encode_rgb(rgb)
        if ld is not None:
            if ld.shape[0] != rgb.shape[0] or ld.shape[2:] != rgb.shape[2:]:
                raise ShapeError('forward', 'ld batch/spatial', rgb.shape, ld.shape)
            g16, g64, g128 = self.encode_ld(ld)
            f16, f64, f128 = fuse(f16, g16), fuse(f64, g64), fuse(f128, g128)
        return self.decode(f128, f64, f16)

    def predict(self, rgb: Tensor, ld: Optional[Tensor] = None) -> np.ndarray:
        """Argmax label map (N x H x W, int64)."""
        return self.forward(rgb, ld).data.argmax(axis=1)


def param_report() -> dict:
    """Parameter count of the default network against the 2.4M reference figure."""
    net = SegNet(SegNetConfig())
    count = param_count(net.registry)
    return {
        'param_count': count,
        'reference': config.REFERENCE_PARAM_COUNT,
        'deviation': (count - config.REFERENCE_PARAM_COUNT) / config.REFERENCE_PARAM_COUNT,
        'per_module': {
            prefix: sum(t.size for _, t in net.registry.with_prefix(prefix))
            for prefix in SEG_PREFIXES
        },
    }
