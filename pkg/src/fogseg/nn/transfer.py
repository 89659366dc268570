"""
Unpaired foggy <-> clear translation
------------------------------------

A cycle-consistent pair of ResNet-style generators and PatchGAN discriminators:

    gen_xy:  foggy X -> clear Y'      disc_y: real clear Y vs Y'
    gen_yx:  clear Y -> foggy X'      disc_x: real foggy X vs X'

Generators work in the (-1, 1) range (tanh head); ``translate`` owns the conversion from and
to the [0, 1] range used by the segmentation pipeline.

Functions:
    adversarial_loss: Log-form GAN objective for the discriminator or generator role
    cycle_loss:       lambda-scaled L1 reconstruction error over both directions
    gan_train_step:   One generator update followed by one update per discriminator
"""

from typing import Dict, Literal, NamedTuple, Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..core import functional as F
from ..core.tensor import Tensor, no_grad
from ..errors import FogSegError, ShapeError
from ..utils.logger import get_logger
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .params import ParamRegistry, init_params

logger = get_logger(__name__)

LOG_EPS = 1e-8
TRANSFER_PREFIXES = ('gen_xy', 'gen_yx', 'disc_x', 'disc_y')

GeneratorLoss = Literal['non_saturating', 'literal']


class TransferConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    gen_filters: int = 32
    disc_filters: int = 32
    gen_res_blocks: int = 3
    disc_layers: int = 3
    lambda_cycle: float = 10.0
    generator_loss: GeneratorLoss = 'non_saturating'

    @model_validator(mode='after')
    def _check(self) -> 'TransferConfig':
        if self.gen_filters < 1 or self.disc_filters < 1 or self.disc_layers < 1 or self.gen_res_blocks < 0:
            raise ValueError("filters and disc_layers must be >= 1, gen_res_blocks >= 0")
        if self.lambda_cycle < 0:
            raise ValueError("lambda_cycle must be >= 0")
        return self

    @classmethod
    def from_run_config(cls, run) -> 'TransferConfig':
        return cls(gen_filters=run.gen_filters, disc_filters=run.disc_filters,
                   gen_res_blocks=run.gen_res_blocks, disc_layers=run.disc_layers,
                   lambda_cycle=run.lambda_cycle, generator_loss=run.generator_loss)

# ----------------------------------------------------------------------------------------------------------


class ResidualBlock(Module):
    def __init__(self, registry: ParamRegistry, prefix: str, channels: int) -> None:
        super().__init__(registry, prefix)
        self.conv1 = self.child(Conv2d(registry, self.name('conv1'), channels, channels, 3, padding=1, bias=False))
        self.bn1 = self.child(BatchNorm2d(registry, self.name('bn1'), channels))
        self.conv2 = self.child(Conv2d(registry, self.name('conv2'), channels, channels, 3, padding=1, bias=False))
        self.bn2 = self.child(BatchNorm2d(registry, self.name('bn2'), channels))

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(out))


class Generator(Module):
    """7x7 stem, two stride-2 downsamplings, residual blocks, two upsamplings, 7x7 tanh head."""

    def __init__(self, registry: ParamRegistry, prefix: str, filters: int = 32, res_blocks: int = 3) -> None:
        super().__init__(registry, prefix)
        f = filters
        self.stem = self.child(Conv2d(registry, self.name('stem.conv'), 3, f, 7, padding=3, bias=False))
        self.stem_bn = self.child(BatchNorm2d(registry, self.name('stem.bn'), f))
        self.down = []
        for i, (cin, cout) in enumerate(((f, 2 * f), (2 * f, 4 * f))):
            conv = self.child(Conv2d(registry, self.name(f'down{i}.conv'), cin, cout, 3, stride=2, padding=1,
                                     bias=False))
            self.down.append((conv, self.child(BatchNorm2d(registry, self.name(f'down{i}.bn'), cout))))
        self.res = [self.child(ResidualBlock(registry, self.name(f'res{i}'), 4 * f)) for i in range(res_blocks)]
        self.up = []
        for i, (cin, cout) in enumerate(((4 * f, 2 * f), (2 * f, f))):
            deconv = self.child(ConvTranspose2d(registry, self.name(f'up{i}.deconv'), cin, cout, 3, stride=2,
                                                padding=1, output_padding=1, bias=False))
            self.up.append((deconv, self.child(BatchNorm2d(registry, self.name(f'up{i}.bn'), cout))))
        self.head = self.child(Conv2d(registry, self.name('head.conv'), f, 3, 7, padding=3))

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError('generator_forward', 'channels', 3, image.shape[1] if image.ndim == 4 else image.shape)
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ShapeError('generator_forward', 'height/width', 'multiples of 4', image.shape[2:])
        out = F.relu(self.stem_bn(self.stem(image)))
        for conv, bn in self.down:
            out = F.relu(bn(conv(out)))
        for block in self.res:
            out = block(out)
        for deconv, bn in self.up:
            out = F.relu(bn(deconv(out)))
        return F.tanh(self.head(out))


class PatchDiscriminator(Module):
    """Stride-2 4x4 conv stack ending in a 1-channel map of raw patch logits."""

    def __init__(self, registry: ParamRegistry, prefix: str, filters: int = 32, layers: int = 3) -> None:
        super().__init__(registry, prefix)
        self.first = self.child(Conv2d(registry, self.name('conv0'), 3, filters, 4, stride=2, padding=1))
        self.body = []
        width = filters
        for i in range(1, layers + 1):
            out = filters * min(2 ** i, 8)
            stride = 2 if i < layers else 1
            conv = self.child(Conv2d(registry, self.name(f'conv{i}'), width, out, 4, stride=stride, padding=1,
                                     bias=False))
            self.body.append((conv, self.child(BatchNorm2d(registry, self.name(f'bn{i}'), out))))
            width = out
        self.last = self.child(Conv2d(registry, self.name(f'conv{layers + 1}'), width, 1, 4, padding=1))

    def forward(self, image: Tensor) -> Tensor:
        out = F.leaky_relu(self.first(image), 0.2)
        for conv, bn in self.body:
            out = F.leaky_relu(bn(conv(out)), 0.2)
        return self.last(out)


class TransferModel(Module):
    def __init__(self, cfg: Optional[TransferConfig] = None, registry: Optional[ParamRegistry] = None) -> None:
        super().__init__(registry if registry is not None else ParamRegistry(), '')
        self.cfg = cfg or TransferConfig()
        c = self.cfg
        self.gen_xy = self.child(Generator(self.registry, 'gen_xy', c.gen_filters, c.gen_res_blocks))
        self.gen_yx = self.child(Generator(self.registry, 'gen_yx', c.gen_filters, c.gen_res_blocks))
        self.disc_x = self.child(PatchDiscriminator(self.registry, 'disc_x', c.disc_filters, c.disc_layers))
        self.disc_y = self.child(PatchDiscriminator(self.registry, 'disc_y', c.disc_filters, c.disc_layers))

    def init(self, seed: int = 0, scheme: str = 'gan_normal') -> 'TransferModel':
        init_params(self.registry, scheme, seed, prefix=TRANSFER_PREFIXES)
        return self

    def generator_forward(self, image: Tensor, which: Literal['xy', 'yx'] = 'xy') -> Tensor:
        return (self.gen_xy if which == 'xy' else self.gen_yx)(image)

    def discriminator_forward(self, image: Tensor, which: Literal['x', 'y'] = 'y') -> Tensor:
        return (self.disc_x if which == 'x' else self.disc_y)(image)

    def generator_params(self):
        return self.registry.with_prefix('gen_xy') + self.registry.with_prefix('gen_yx')

    def translate(self, image: Tensor) -> Tensor:
        """
        Map a foggy [0, 1] batch to its corrected counterpart Y' in [0, 1].

        Runs the generator in eval mode without recording a graph; ``translate_differentiable``
        keeps the graph for joint fine-tuning.
        """
        was_training = self.gen_xy.training
        self.gen_xy.eval()
        try:
            with no_grad():
                out = self.translate_differentiable(image)
        finally:
            self.gen_xy.train(was_training)
        return out

    def translate_differentiable(self, image: Tensor) -> Tensor:
        return (self.gen_xy(image * 2.0 - 1.0) + 1.0) * 0.5

# ----------------------------------------------------------------------------------------------------------


def adversarial_loss(d_real_logits: Optional[Tensor], d_fake_logits: Tensor,
                     role: Literal['discriminator', 'generator'] = 'discriminator',
                     generator_loss: GeneratorLoss = 'non_saturating') -> Tensor:
    """
    Log-form GAN objective on raw patch logits (logs guarded by 1e-8).

    Discriminator role: -(mean log s(real) + mean log(1 - s(fake))).
    Generator role: -mean log s(fake) (non-saturating) or mean log(1 - s(fake)) (literal).
    """
    p_fake = d_fake_logits.sigmoid()
    if role == 'discriminator':
        if d_real_logits is None:
            raise FogSegError("discriminator loss needs real logits")
        p_real = d_real_logits.sigmoid()
        return -((p_real + LOG_EPS).log().mean() + (1.0 - p_fake + LOG_EPS).log().mean())
    if role != 'generator':
        raise FogSegError(f"unknown adversarial role '{role}'")
    if generator_loss == 'literal':
        return (1.0 - p_fake + LOG_EPS).log().mean()
    return -(p_fake + LOG_EPS).log().mean()


def cycle_loss(x: Tensor, reconstructed_x: Tensor, y: Optional[Tensor] = None,
               reconstructed_y: Optional[Tensor] = None, lambda_cycle: float = 10.0) -> Tensor:
    if x.shape != reconstructed_x.shape:
        raise ShapeError('cycle_loss', 'x shape', x.shape, reconstructed_x.shape)
    total = (x - reconstructed_x).abs().mean()
    if y is not None and reconstructed_y is not None:
        if y.shape != reconstructed_y.shape:
            raise ShapeError('cycle_loss', 'y shape', y.shape, reconstructed_y.shape)
        total = total + (y - reconstructed_y).abs().mean()
    return total * lambda_cycle


class GanLosses(NamedTuple):
    gen: float
    disc: float
    cycle: float


class Optimizer(Protocol):
    def step(self) -> None: ...

    def zero_grad(self) -> None: ...


def gan_train_step(batch_x: Tensor, batch_y: Tensor, model: TransferModel, optimizers: Dict[str, Optimizer],
                   adversarial_weight: float = 1.0) -> GanLosses:
    """
    One generator update (both adversarial directions plus cycle term), then one update of
    each discriminator on fresh forward passes with the fakes detached.

    Args:
        batch_x: foggy batch in (-1, 1)
        batch_y: clear batch in (-1, 1)
        optimizers: ``gen``, ``disc_x`` and ``disc_y`` optimizers over the matching parameters
        adversarial_weight: scale of the adversarial part of the generator objective

    Returns:
        GanLosses: generator loss, summed discriminator loss and the cycle term (floats)
    """
    cfg = model.cfg
    model.train()

    # generator update
    model.registry.zero_grad()
    fake_y = model.gen_xy(batch_x)
    rec_x = model.gen_yx(fake_y)
    fake_x = model.gen_yx(batch_y)
    rec_y = model.gen_xy(fake_x)
    adv = adversarial_loss(None, model.disc_y(fake_y), 'generator', cfg.generator_loss) \
        + adversarial_loss(None, model.disc_x(fake_x), 'generator', cfg.generator_loss)
    cyc = cycle_loss(batch_x, rec_x, batch_y, rec_y, cfg.lambda_cycle)
    gen_loss = adv * adversarial_weight + cyc
    gen_loss.backward()
    optimizers['gen'].step()

    # discriminator updates
    model.registry.zero_grad()
    loss_dy = adversarial_loss(model.disc_y(batch_y), model.disc_y(fake_y.detach()), 'discriminator')
    loss_dx = adversarial_loss(model.disc_x(batch_x), model.disc_x(fake_x.detach()), 'discriminator')
    disc_loss = loss_dy + loss_dx
    disc_loss.backward()
    optimizers['disc_y'].step()
    optimizers['disc_x'].step()

    gen_value, disc_value = gen_loss.item(), disc_loss.item()
    if not (np.isfinite(gen_value) and np.isfinite(disc_value)):
        raise FogSegError(f"non-finite GAN losses: gen={gen_value} disc={disc_value}")
    return GanLosses(gen_value, disc_value, cyc.item())
