"""
Differentiable image operations
-------------------------------

Convolution, transposed convolution, 2x2 pooling, batch normalization, activations,
channel concatenation, channel dropout and channel softmax. Each op is a ``Function``
working on N x C x H x W numpy arrays; the lowercase wrappers validate shapes and raise
``ShapeError`` naming the offending dimension.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Function, Tensor, note_branch

IntPair = Union[int, Tuple[int, int]]


def _pair(value: IntPair) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _require_4d(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(op, 'rank', 4, x.ndim, 'expected N x C x H x W')

# ----------------------------------------------------------------------------------------------------------
# Convolutions


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1)):
        (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
        kh, kw = w.shape[2:]
        self.x_shape, self.w, self.has_bias = x.shape, w, b is not None
        self.stride, self.padding, self.dilation = stride, padding, dilation

        self.xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        extent = (dh * (kh - 1) + 1, dw * (kw - 1) + 1)
        # (N, C, H', W', kh, kw)
        self.windows = sliding_window_view(self.xp, extent, axis=(2, 3))[:, :, ::sh, ::sw, ::dh, ::dw]
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        (sh, sw), (ph, pw), (dh, dw) = self.stride, self.padding, self.dilation
        kh, kw = self.w.shape[2:]
        _, _, h, w_ = self.x_shape
        out_h, out_w = grad.shape[2:]

        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3)) if self.has_bias else None

        grad_x = None
        if self.needs_input_grad[0]:
            cols = np.tensordot(grad, self.w, axes=([1], [0]))  # (N, H', W', C, kh, kw)
            grad_xp = np.zeros(self.xp.shape, dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    r, c = i * dh, j * dw
                    grad_xp[:, :, r:r + sh * (out_h - 1) + 1:sh, c:c + sw * (out_w - 1) + 1:sw] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = grad_xp[:, :, ph:ph + h, pw:pw + w_]
        return grad_x, grad_w, grad_b


class ConvTranspose2d(Function):
    def forward(self, x, w, b=None, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)):
        (sh, sw), (ph, pw), (oph, opw) = stride, padding, output_padding
        n, _, h, w_ = x.shape
        _, cout, kh, kw = w.shape
        self.x, self.w, self.has_bias = x, w, b is not None
        self.stride, self.padding = stride, padding

        self.buf_shape = (n, cout, (h - 1) * sh + kh + oph, (w_ - 1) * sw + kw + opw)
        out_h, out_w = self.buf_shape[2] - 2 * ph, self.buf_shape[3] - 2 * pw
        self.out_hw = (out_h, out_w)

        cols = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Cout, kh, kw)
        buf = np.zeros(self.buf_shape, dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                buf[:, :, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w_ - 1) + 1:sw] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        out = buf[:, :, ph:ph + out_h, pw:pw + out_w]
        if b is not None:
            out = out + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        (sh, sw), (ph, pw) = self.stride, self.padding
        _, _, h, w_ = self.x.shape
        kh, kw = self.w.shape[2:]
        out_h, out_w = self.out_hw

        grad_buf = np.zeros(self.buf_shape, dtype=grad.dtype)
        grad_buf[:, :, ph:ph + out_h, pw:pw + out_w] = grad
        windows = sliding_window_view(grad_buf, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h, :w_]

        grad_x = None
        if self.needs_input_grad[0]:
            grad_x = np.tensordot(windows, self.w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(self.x, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return grad_x, grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntPair = 1,
           padding: IntPair = 0, dilation: IntPair = 1) -> Tensor:
    """
    2-D cross-correlation with zero padding.

    Output size per axis: floor((H + 2p - d(k - 1) - 1) / s) + 1.
    """
    _require_4d('conv2d', x)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if weight.ndim != 4:
        raise ShapeError('conv2d', 'weight rank', 4, weight.ndim)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError('conv2d', 'in_channels', weight.shape[1], x.shape[1])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError('conv2d', 'bias', (weight.shape[0],), bias.shape)
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ShapeError('conv2d', 'stride/dilation/padding', '>=1/>=1/>=0', (stride, dilation, padding))
    for axis, name in ((0, 'height'), (1, 'width')):
        extent = dilation[axis] * (weight.shape[2 + axis] - 1) + 1
        padded = x.shape[2 + axis] + 2 * padding[axis]
        if extent > padded:
            raise ShapeError('conv2d', name, f'>= {extent} after padding', padded,
                             'dilated kernel does not fit the padded input')
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding, dilation=dilation)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntPair = 1,
                     padding: IntPair = 0, output_padding: IntPair = 0) -> Tensor:
    """
    Transposed convolution; ``weight`` is laid out (Cin, Cout, kh, kw).

    Output size per axis: (H - 1)s - 2p + k + output_padding. It is the adjoint of ``conv2d``
    with the same weight, stride and padding.
    """
    _require_4d('conv_transpose2d', x)
    stride, padding, output_padding = _pair(stride), _pair(padding), _pair(output_padding)
    if weight.ndim != 4:
        raise ShapeError('conv_transpose2d', 'weight rank', 4, weight.ndim)
    if weight.shape[0] != x.shape[1]:
        raise ShapeError('conv_transpose2d', 'in_channels', weight.shape[0], x.shape[1])
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError('conv_transpose2d', 'bias', (weight.shape[1],), bias.shape)
    if min(stride) < 1 or min(padding) < 0:
        raise ShapeError('conv_transpose2d', 'stride/padding', '>=1/>=0', (stride, padding))
    for axis, name in ((0, 'height'), (1, 'width')):
        if not 0 <= output_padding[axis] < stride[axis]:
            raise ShapeError('conv_transpose2d', f'output_padding {name}', f'< {stride[axis]}',
                             output_padding[axis])
        size = (x.shape[2 + axis] - 1) * stride[axis] - 2 * padding[axis] \
            + weight.shape[2 + axis] + output_padding[axis]
        if size < 1:
            raise ShapeError('conv_transpose2d', name, '>= 1', size)
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding,
                                 output_padding=output_padding)

# ----------------------------------------------------------------------------------------------------------
# Pooling (2x2, stride 2)


def _windows_2x2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    # last axis scans each window row-major: (0,0), (0,1), (1,0), (1,1)
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unwindow_2x2(x: np.ndarray) -> np.ndarray:
    n, c, h2, w2, _ = x.shape
    return x.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


class MaxPool2d(Function):
    def forward(self, x):
        windows = _windows_2x2(x)
        self.index = windows.argmax(axis=-1)[..., None]  # first maximum wins ties
        note_branch(self.index)
        self.window_shape = windows.shape
        return np.take_along_axis(windows, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        routed = np.zeros(self.window_shape, dtype=grad.dtype)
        np.put_along_axis(routed, self.index, grad[..., None], axis=-1)
        return (_unwindow_2x2(routed),)


class AvgPool2d(Function):
    def forward(self, x):
        return _windows_2x2(x).mean(axis=-1)

    def backward(self, grad):
        spread = np.broadcast_to(grad[..., None] * 0.25, grad.shape + (4,))
        return (_unwindow_2x2(np.ascontiguousarray(spread)),)


def _check_pool(op: str, x: Tensor) -> None:
    _require_4d(op, x)
    if x.shape[2] % 2:
        raise ShapeError(op, 'height', 'even', x.shape[2])
    if x.shape[3] % 2:
        raise ShapeError(op, 'width', 'even', x.shape[3])


def max_pool2d(x: Tensor) -> Tensor:
    _check_pool('max_pool2d', x)
    return MaxPool2d.apply(x)


def avg_pool2d(x: Tensor) -> Tensor:
    _check_pool('avg_pool2d', x)
    return AvgPool2d.apply(x)

# ----------------------------------------------------------------------------------------------------------
# Normalization


class BatchNorm2d(Function):
    def forward(self, x, gamma, beta, running_mean=None, running_var=None, training=True,
                momentum=0.1, eps=1e-5):
        axes = (0, 2, 3)
        self.training, self.gamma = training, gamma
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running_mean is not None:
                running_mean *= (1.0 - momentum)
                running_mean += momentum * mean
                running_var *= (1.0 - momentum)
                running_var += momentum * var * (count / (count - 1))
            self.count = count
        else:
            mean, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :, None, None]
        self.xhat = (x - mean[None, :, None, None].astype(x.dtype)) * self.inv_std
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        grad_gamma = (grad * self.xhat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_xhat = grad * self.gamma[None, :, None, None]
        if self.training:
            sum_g = grad_xhat.sum(axis=axes, keepdims=True)
            sum_gx = (grad_xhat * self.xhat).sum(axis=axes, keepdims=True)
            grad_x = self.inv_std / self.count * (self.count * grad_xhat - sum_g - self.xhat * sum_gx)
        else:
            grad_x = grad_xhat * self.inv_std
        return grad_x, grad_gamma, grad_beta


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool = True, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """
    Per-channel batch normalization.

    In train mode the batch statistics normalize the input and ``running_mean`` /
    ``running_var`` are updated in place by exponential moving average (unbiased variance).
    In eval mode the running statistics are used and nothing is mutated.
    """
    _require_4d('batch_norm2d', x)
    c = x.shape[1]
    for name, arr in (('gamma', gamma), ('beta', beta), ('running_mean', running_mean),
                      ('running_var', running_var)):
        if tuple(np.shape(arr.data if isinstance(arr, Tensor) else arr)) != (c,):
            raise ShapeError('batch_norm2d', name, (c,), np.shape(arr.data if isinstance(arr, Tensor) else arr))
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ShapeError('batch_norm2d', 'batch x spatial count', '>= 2',
                         x.shape[0] * x.shape[2] * x.shape[3], 'train mode needs at least two values per channel')
    return BatchNorm2d.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                             training=training, momentum=momentum, eps=eps)

# ----------------------------------------------------------------------------------------------------------
# Activations and plumbing


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        note_branch(self.mask)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    def forward(self, x, slope=0.2):
        positive = x > 0
        note_branch(positive)
        self.scale = np.where(positive, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Concat(Function):
    def forward(self, *arrays):
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


class ChannelDropout(Function):
    def forward(self, x, mask=None):
        self.mask = mask.astype(x.dtype)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class ChannelSoftmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        return (self.out * (grad - (grad * self.out).sum(axis=1, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError('elementwise_add', 'shape', a.shape, b.shape)
    return a + b


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis; N, H and W must agree."""
    if not tensors:
        raise ShapeError('concat_channels', 'inputs', '>= 1 tensor', 0)
    for t in tensors:
        _require_4d('concat_channels', t)
    ref = tensors[0].shape
    for t in tensors[1:]:
        for axis, name in ((0, 'batch'), (2, 'height'), (3, 'width')):
            if t.shape[axis] != ref[axis]:
                raise ShapeError('concat_channels', name, ref[axis], t.shape[axis])
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors)


def dropout2d(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero whole channels with probability ``p`` and rescale survivors; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = rng.random(x.shape[:2]) >= p
    mask = (keep / (1.0 - p))[:, :, None, None]
    return ChannelDropout.apply(x, mask=mask)


def softmax_channels(x: Tensor) -> Tensor:
    _require_4d('softmax_channels', x)
    return ChannelSoftmax.apply(x)


def sequence_sum(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total
