"""
Finite-difference gradient checks
---------------------------------

``gradcheck`` compares the autodiff gradient of a scalar-valued closure against central
differences, entry by entry:

    numeric[i] = (f(x - 2h e_i) - 8 f(x - h e_i) + 8 f(x + h e_i) - f(x + 2h e_i)) / 12h
    error      = max_i |analytic[i] - numeric[i]| / (|numeric[i]| + 1e-8)

The fourth-order stencil keeps truncation error far below the tolerance at h = 1e-3, so the
relative test holds even for entries whose gradient is small. Entries whose stencil moves a
piecewise op onto another branch (a ReLU flipping, a different pooling winner, a sign change)
are not comparable against a finite difference; they are counted as skipped and left out.

Checks are meant to run in float64; ``run_gradcheck_suite`` converts every case to float64
and runs composite blocks in inference mode with non-trivial running statistics.

Functions:
    gradcheck:           Check one closure w.r.t. a list of tensors
    assert_gradcheck:    Same, raising GradcheckError on failure
    run_gradcheck_suite: Every differentiable op and composite block
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import GradcheckError
from ..utils.logger import get_logger
from . import functional as F
from .tensor import Tensor, no_grad, record_branches

logger = get_logger(__name__)

OFFSETS = (-2, -1, 1, 2)
NamedTensors = Sequence[Tuple[str, Tensor]]


class GradcheckResult(NamedTuple):
    name: str
    max_error: float
    errors: Dict[str, float]
    tol: float
    h: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and bool(np.isfinite(self.max_error)) and self.max_error < self.tol


def _named(tensors: Union[NamedTensors, Sequence[Tensor]]) -> List[Tuple[str, Tensor]]:
    named = []
    for i, item in enumerate(tensors):
        named.append(item if isinstance(item, tuple) else (f'input{i}', item))
    return named


def gradcheck(fn: Callable[[], Tensor], tensors: Union[NamedTensors, Sequence[Tensor]], h: float = 1e-3,
              tol: float = 1e-4, name: str = 'gradcheck', max_entries: Optional[int] = None,
              seed: int = 0) -> GradcheckResult:
    """
    Compare autodiff against central differences for every entry of every tensor in ``tensors``.

    Args:
        fn: Closure returning a scalar Tensor; must be deterministic
        tensors: Tensors (or (name, tensor) pairs) to perturb; they must require grad
        max_entries: Check only this many seeded random entries per tensor

    Returns:
        GradcheckResult: worst per-entry relative error overall and per tensor, with the
        number of entries checked and skipped
    """
    named = _named(tensors)
    for _, tensor in named:
        tensor.grad = None
    with record_branches() as base:
        out = fn()
    out.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in named}

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    checked = skipped = 0
    with no_grad():
        for tname, tensor in named:
            flat = tensor.data.reshape(-1)
            if not np.shares_memory(flat, tensor.data):
                raise GradcheckError(f"{name}: '{tname}' is not contiguous")
            indices = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                indices = np.sort(rng.choice(flat.size, max_entries, replace=False))
            auto = analytic[tname].reshape(-1)
            entry_errors = []
            for i in indices:
                original = flat[i]
                values, crossed = {}, False
                for offset in OFFSETS:
                    flat[i] = original + offset * h
                    with record_branches() as seen:
                        values[offset] = fn().item()
                    crossed = crossed or seen != base
                flat[i] = original
                if crossed:
                    skipped += 1
                    continue
                # differences first: an entry that leaves f untouched gives exactly 0
                numeric = (8.0 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12.0 * h)
                entry_errors.append(abs(auto[i] - numeric) / (abs(numeric) + 1e-8))
            checked += len(entry_errors)
            errors[tname] = float(np.max(entry_errors)) if entry_errors else 0.0

    max_error = float(np.max(list(errors.values()))) if errors else 0.0
    result = GradcheckResult(name, max_error, errors, tol, h, checked, skipped)
    logger.debug(f"gradcheck {name}", extra={
        "operation": "gradcheck",
        "case": name,
        "max_error": max_error,
        "checked": checked,
        "skipped": skipped,
        "passed": result.passed,
    })
    return result


def assert_gradcheck(fn: Callable[[], Tensor], tensors: Union[NamedTensors, Sequence[Tensor]],
                     **kwargs) -> GradcheckResult:
    result = gradcheck(fn, tensors, **kwargs)
    if not result.passed:
        if not result.checked:
            raise GradcheckError(f"{result.name}: every entry straddles a kink, nothing was checked")
        worst = max(result.errors, key=result.errors.get)
        raise GradcheckError(f"{result.name}: relative error {result.max_error:.3e} >= {result.tol:g} "
                             f"(worst tensor '{worst}')")
    return result

# ----------------------------------------------------------------------------------------------------------
# suite


def _leaf(rng: np.random.Generator, *shape: int, low: Optional[float] = None) -> Tensor:
    data = rng.uniform(low, 1.0, size=shape) if low is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return np.sign(rng.standard_normal(shape)) * rng.uniform(0.1, 1.0, shape)


def _distinct(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """Values 0.05 apart, so no 2x2 window holds a near tie."""
    size = int(np.prod(shape))
    return ((rng.permutation(size) - size / 2) * 0.05).reshape(shape)


def _projection(rng: np.random.Generator, out: Tensor) -> Tensor:
    """Fixed random weights; a plain sum is blind to anything a batch norm centres away."""
    return Tensor(rng.standard_normal(out.shape), dtype=np.float64)


def _scalar(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    weights: Dict[str, Tensor] = {}

    def closure() -> Tensor:
        out = fn()
        if 'w' not in weights:
            weights['w'] = _projection(rng, out)
        return (out * weights['w']).sum()
    return closure


def _inference(module, registry, rng: np.random.Generator) -> None:
    """float64, eval mode and random running statistics, so every batch norm is a real affine map."""
    registry.to_dtype(np.float64)
    module.eval()
    for name, buffer in registry.buffer_items():
        if name.endswith('running_mean'):
            buffer[...] = rng.normal(0.0, 0.1, buffer.shape)
        elif name.endswith('running_var'):
            buffer[...] = rng.uniform(0.5, 2.0, buffer.shape)


Case = Tuple[str, Callable[[], Tensor], List[Tuple[str, Tensor]], Optional[int]]


def _case(name: str, fn: Callable[..., Tensor], tensors: List[Tuple[str, Tensor]],
          rng: np.random.Generator, project: bool = True, max_entries: Optional[int] = None) -> Case:
    args = [t for _, t in tensors]

    def body() -> Tensor:
        return fn(*args)
    return name, (_scalar(body, rng) if project else body), tensors, max_entries


def _op_cases(rng: np.random.Generator) -> List[Case]:
    from ..data.sample import luminance_tensor
    from ..losses import ClassWeights, seg_loss
    from ..nn.transfer import adversarial_loss, cycle_loss

    def leaf(*shape: int, low: Optional[float] = None) -> Tensor:
        return _leaf(rng, *shape, low=low)

    def fixed(data: np.ndarray) -> Tensor:
        return Tensor(data, requires_grad=True, dtype=np.float64)

    x3 = leaf(2, 3, 4)
    image, weight, bias = leaf(2, 3, 8, 8), leaf(4, 3, 3, 3), leaf(4)
    small = leaf(2, 4, 4, 4)
    rm, rv = np.zeros(3), np.ones(3)
    em, ev = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, 0] = 255
    weights = ClassWeights(weights=(1.0, 2.5, 0.5), c=1.1)
    cx, cy = leaf(2, 3, 4, 4), leaf(2, 3, 4, 4)
    rx = fixed(cx.data + _away_from_zero(rng, 2, 3, 4, 4))
    ry = fixed(cy.data + _away_from_zero(rng, 2, 3, 4, 4))

    return [
        _case('add_broadcast', lambda a, b: a + b, [('a', leaf(2, 3, 4, 4)), ('b', leaf(1, 3, 1, 4))], rng),
        _case('mul', lambda a, b: a * b, [('a', leaf(2, 3, 4)), ('b', leaf(2, 3, 4))], rng),
        _case('div', lambda a, b: a / b, [('a', leaf(2, 3)), ('b', leaf(2, 3, low=0.5))], rng),
        _case('neg', lambda x: -x, [('x', x3)], rng),
        _case('exp', lambda x: x.exp(), [('x', x3)], rng),
        _case('log', lambda x: x.log(), [('x', leaf(2, 3, 4, low=0.5))], rng),
        _case('abs', lambda x: x.abs(), [('x', fixed(_away_from_zero(rng, 2, 3, 4)))], rng),
        _case('sigmoid', lambda x: x.sigmoid(), [('x', x3)], rng),
        _case('tanh', lambda x: x.tanh(), [('x', x3)], rng),
        _case('sum_axis', lambda x: x.sum(axis=1, keepdims=True), [('x', x3)], rng),
        _case('mean_axis', lambda x: x.mean(axis=(0, 2)), [('x', x3)], rng),
        _case('reshape', lambda x: x.reshape(4, 6), [('x', x3)], rng),
        _case('conv2d', lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1),
              [('x', image), ('weight', weight), ('bias', bias)], rng),
        _case('conv2d_strided', lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1),
              [('x', image), ('weight', weight), ('bias', bias)], rng),
        _case('conv2d_dilated', lambda x, w: F.conv2d(x, w, None, padding=2, dilation=2),
              [('x', image), ('weight', weight)], rng),
        _case('conv2d_asymmetric', lambda x, w: F.conv2d(x, w, None, padding=(1, 0)),
              [('x', image), ('weight', leaf(4, 3, 3, 1))], rng),
        _case('conv_transpose2d',
              lambda x, w, b: F.conv_transpose2d(x, w, b, stride=2, padding=1, output_padding=1),
              [('x', small), ('weight', leaf(4, 3, 3, 3)), ('bias', leaf(3))], rng),
        _case('conv_transpose2d_k2', lambda x, w: F.conv_transpose2d(x, w, None, stride=2),
              [('x', small), ('weight', leaf(4, 3, 2, 2))], rng),
        _case('max_pool2d', F.max_pool2d, [('x', fixed(_distinct(rng, 2, 3, 4, 4)))], rng),
        _case('avg_pool2d', F.avg_pool2d, [('x', leaf(2, 3, 4, 4))], rng),
        _case('batch_norm2d_train', lambda x, g, b: F.batch_norm2d(x, g, b, rm, rv, True),
              [('x', leaf(2, 3, 4, 4)), ('gamma', leaf(3)), ('beta', leaf(3))], rng),
        _case('batch_norm2d_eval', lambda x, g, b: F.batch_norm2d(x, g, b, em, ev, False),
              [('x', leaf(2, 3, 4, 4)), ('gamma', leaf(3)), ('beta', leaf(3))], rng),
        _case('relu', F.relu, [('x', fixed(_away_from_zero(rng, 2, 3, 4, 4)))], rng),
        _case('leaky_relu', lambda x: F.leaky_relu(x, 0.2), [('x', fixed(_away_from_zero(rng, 2, 3, 4, 4)))],
              rng),
        _case('concat_channels', F.concat_channels, [('a', leaf(2, 2, 4, 4)), ('b', leaf(2, 3, 4, 4))], rng),
        _case('softmax_channels', F.softmax_channels, [('x', leaf(2, 3, 4, 4))], rng),
        _case('luminance', luminance_tensor, [('rgb', leaf(2, 3, 4, 4))], rng),
        _case('seg_loss', lambda z: seg_loss(z, labels, weights), [('logits', leaf(2, 3, 4, 4))], rng,
              project=False),
        _case('adversarial_discriminator', lambda r, f: adversarial_loss(r, f, 'discriminator'),
              [('real', leaf(2, 1, 3, 3)), ('fake', leaf(2, 1, 3, 3))], rng, project=False),
        _case('adversarial_generator', lambda f: adversarial_loss(None, f, 'generator'),
              [('fake', leaf(2, 1, 3, 3))], rng, project=False),
        _case('adversarial_generator_literal', lambda f: adversarial_loss(None, f, 'generator', 'literal'),
              [('fake', leaf(2, 1, 3, 3))], rng, project=False),
        _case('cycle_loss', lambda a, b, c, d: cycle_loss(a, b, c, d),
              [('x', cx), ('rec_x', rx), ('y', cy), ('rec_y', ry)], rng, project=False),
    ]


def _block_cases(rng: np.random.Generator) -> List[Case]:
    from ..losses import UncertaintyWeights, joint_loss
    from ..nn.blocks import DenseBlock, Downsampler, NonBottleneck1D, Transition
    from ..nn.params import ParamRegistry, init_params
    from ..nn.segnet import SegNet, SegNetConfig
    from ..nn.transfer import (Generator, PatchDiscriminator, TransferConfig, TransferModel, adversarial_loss,
                               cycle_loss)

    def registry_case(name: str, build, shape) -> Case:
        reg = ParamRegistry()
        module = build(reg)
        init_params(reg, seed=int(rng.integers(1 << 30)))
        _inference(module, reg, rng)
        x = _leaf(rng, *shape)
        return (name, _scalar(lambda: module(x), rng), [('x', x)] + reg.items(), None)

    cases: List[Case] = [
        registry_case('downsampler', lambda r: Downsampler(r, 'down', 3, 8), (2, 3, 8, 8)),
        registry_case('non_bottleneck_1d', lambda r: NonBottleneck1D(r, 'nb', 4, dilation=2), (2, 4, 8, 8)),
        registry_case('dense_block', lambda r: DenseBlock(r, 'dense', 4, growth_rate=3, layers=2), (2, 4, 8, 8)),
        registry_case('transition', lambda r: Transition(r, 'trans', 6, 4), (2, 6, 8, 8)),
        registry_case('transition_no_pool', lambda r: Transition(r, 'trans', 6, 4, pool=False), (2, 6, 4, 4)),
        registry_case('generator', lambda r: Generator(r, 'gen', filters=2, res_blocks=1), (2, 3, 8, 8)),
        registry_case('patch_discriminator', lambda r: PatchDiscriminator(r, 'disc', filters=2, layers=2),
                      (2, 3, 16, 16)),
    ]

    # the two networks below are sampled: every block inside them is checked in full above
    cfg = SegNetConfig(num_classes=3, stage_channels=(4, 6, 8), input_height=16, input_width=16,
                       rgb_plain_blocks=1, dilations=(2,), decoder_blocks=1, dense_growth=2, dense_layers=1)
    net = SegNet(cfg, seed=0).init(int(rng.integers(1 << 30)))
    _inference(net, net.registry, rng)
    rgb, ld = _leaf(rng, 1, 3, 16, 16), _leaf(rng, 1, 2, 16, 16)
    cases.append(('segnet', _scalar(lambda: net(rgb, ld), rng),
                  [('rgb', rgb), ('ld', ld)] + net.registry.items(), 8))

    gan = TransferModel(TransferConfig(gen_filters=2, disc_filters=2, gen_res_blocks=1, disc_layers=2))
    gan.init(int(rng.integers(1 << 30)), scheme='kaiming_uniform')
    _inference(gan, gan.registry, rng)
    bx, by = _leaf(rng, 2, 3, 16, 16), _leaf(rng, 2, 3, 16, 16)

    def gan_objective() -> Tensor:
        fake_y = gan.gen_xy(bx)
        fake_x = gan.gen_yx(by)
        adv = adversarial_loss(None, gan.disc_y(fake_y), 'generator') \
            + adversarial_loss(gan.disc_x(bx), gan.disc_x(fake_x), 'discriminator')
        return adv + cycle_loss(bx, gan.gen_yx(fake_y), by, gan.gen_xy(fake_x))
    cases.append(('gan_objective', gan_objective, gan.registry.items(), 8))

    u = UncertaintyWeights()
    u.registry.to_dtype(np.float64)
    u.s_adv.data[...] = 0.3
    u.s_seg.data[...] = -0.2
    l_adv = Tensor(rng.uniform(0.5, 2.0), dtype=np.float64)
    l_seg = Tensor(rng.uniform(0.5, 2.0), dtype=np.float64)
    cases.append(('joint_loss', lambda: joint_loss(l_adv, l_seg, u), u.registry.items(), None))
    return cases


def run_gradcheck_suite(h: float = 1e-3, tol: float = 1e-4, seed: int = 0,
                        blocks: bool = True) -> List[GradcheckResult]:
    """Check every differentiable op and, with ``blocks``, every composite block in float64 at step ``h``."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    if blocks:
        cases += _block_cases(rng)

    results = []
    for name, fn, tensors, max_entries in cases:
        results.append(gradcheck(fn, tensors, h=h, tol=tol, name=name, max_entries=max_entries, seed=seed))
    failed = [r.name for r in results if not r.passed]
    logger.info("Gradient check suite finished", extra={
        "operation": "gradcheck",
        "cases": len(results),
        "failed": failed,
        "max_error": max(r.max_error for r in results),
        "checked": sum(r.checked for r in results),
        "skipped": sum(r.skipped for r in results),
    })
    return results
