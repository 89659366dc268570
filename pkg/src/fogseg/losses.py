"""
Segmentation and joint losses
-----------------------------

Functions:
    pixel_softmax:  Per-pixel distribution over the class channel (max-shifted)
    seg_loss:       Class-weighted cross-entropy via fused log-softmax, 255 ignored
    class_weights:  w = 1 / ln(c + p_class) from pixel counts
    joint_loss:     Homoscedastic-uncertainty weighting exp(-s) * l + s / 2 of the two terms

Classes:
    ClassWeights:       Per-class weight vector plus the ``c`` it was built with
    UncertaintyWeights: Learnable ``s_adv`` / ``s_seg`` scalars registered as ``uncertainty.*``
"""

from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import config
from .core import functional as F
from .core.tensor import Function, Tensor
from .errors import DataError, ShapeError
from .nn.params import ParamRegistry

Reduction = Literal['mean', 'sum']


def pixel_softmax(logits: Tensor) -> Tensor:
    return F.softmax_channels(logits)

# ----------------------------------------------------------------------------------------------------------


class ClassWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    weights: Tuple[float, ...]
    c: float = config.CLASS_WEIGHT_C

    @classmethod
    def uniform(cls, num_classes: int = config.NUM_CLASSES) -> 'ClassWeights':
        """Unit weight for every class."""
        return cls(weights=(1.0,) * num_classes)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self) -> int:
        return len(self.weights)


def class_weights(pixel_counts: Sequence[int], c: float = config.CLASS_WEIGHT_C) -> ClassWeights:
    """
    Inverse-log class weighting.

    Raises:
        DataError: Zero total count, negative counts, or ``c + p <= 1`` for some class
    """
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DataError("pixel counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DataError("class_weights needs a positive total pixel count")
    p = counts / total
    if np.any(c + p <= 1.0):
        raise DataError(f"c={c} gives a non-positive log for some class; use c > 1")
    return ClassWeights(weights=tuple(float(w) for w in 1.0 / np.log(c + p)), c=c)


def label_histogram(labels: np.ndarray, num_classes: int = config.NUM_CLASSES,
                    ignore_label: int = config.IGNORE_LABEL) -> np.ndarray:
    valid = labels[labels != ignore_label].astype(np.int64)
    return np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]

# ----------------------------------------------------------------------------------------------------------


class WeightedCrossEntropy(Function):
    def forward(self, logits, labels=None, weights=None, ignore_label=255, reduction='mean'):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        valid = labels != ignore_label
        self.target = np.where(valid, labels, 0).astype(np.int64)
        picked = np.take_along_axis(log_probs, self.target[:, None], axis=1)[:, 0]
        self.pixel_weight = (weights.astype(logits.dtype)[self.target] * valid).astype(logits.dtype)
        count = int(valid.sum())
        self.normalizer = float(count) if (reduction == 'mean' and count > 0) else 1.0
        self.probs = np.exp(log_probs)
        return np.asarray(-(self.pixel_weight * picked).sum() / self.normalizer, dtype=logits.dtype)

    def backward(self, grad):
        out = self.probs.copy()
        np.put_along_axis(out, self.target[:, None], np.take_along_axis(out, self.target[:, None], 1) - 1.0, 1)
        out *= self.pixel_weight[:, None] * (grad / self.normalizer)
        return (out,)


def seg_loss(logits: Tensor, labels: np.ndarray, weights: Optional[ClassWeights] = None,
             ignore_label: int = config.IGNORE_LABEL, reduction: Reduction = 'mean') -> Tensor:
    """
    Weighted cross-entropy over non-ignored pixels.

    ``mean`` divides by the number of non-ignored pixels; ``sum`` sums over them. With every
    pixel ignored the loss and its gradient are zero.

    Raises:
        ShapeError: logits/labels disagree in N, H or W, or weights in K
        DataError:  a label outside [0, K) other than ``ignore_label``
    """
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ShapeError('seg_loss', 'logits rank', 4, logits.ndim)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError('seg_loss', 'labels shape', (n, h, w), labels.shape)
    bad = (labels != ignore_label) & ((labels < 0) | (labels >= k))
    if np.any(bad):
        raise DataError(f"label {int(labels[bad][0])} outside [0, {k}) and not the ignore label {ignore_label}")
    weights = ClassWeights.uniform(k) if weights is None else weights
    if len(weights) != k:
        raise ShapeError('seg_loss', 'class weights', k, len(weights))
    if reduction not in ('mean', 'sum'):
        raise ValueError(f"unknown reduction '{reduction}'")
    return WeightedCrossEntropy.apply(logits, labels=labels, weights=weights.as_array(np.float64),
                                      ignore_label=ignore_label, reduction=reduction)

# ----------------------------------------------------------------------------------------------------------


class UncertaintyWeights:
    """Learnable log-variances; the effective loss weights are exp(-s)."""

    PREFIX = 'uncertainty'

    def __init__(self, registry: Optional[ParamRegistry] = None) -> None:
        self.registry = registry if registry is not None else ParamRegistry()
        self.s_adv = self.registry.add(f'{self.PREFIX}.s_adv', (), 'scalar')
        self.s_seg = self.registry.add(f'{self.PREFIX}.s_seg', (), 'scalar')

    @property
    def lambda_adv(self) -> float:
        return float(np.exp(-self.s_adv.item()))

    @property
    def lambda_seg(self) -> float:
        return float(np.exp(-self.s_seg.item()))


def joint_loss(l_adv: Optional[Tensor], l_seg: Tensor, u: UncertaintyWeights) -> Tensor:
    """
    exp(-s_adv) l_adv + s_adv / 2 + exp(-s_seg) l_seg + s_seg / 2.

    ``l_adv=None`` drops the adversarial term together with its regularizer (no domain
    adaptation), leaving ``s_adv`` untouched.
    """
    total = (-u.s_seg).exp() * l_seg + u.s_seg * 0.5
    if l_adv is not None:
        total = total + (-u.s_adv).exp() * l_adv + u.s_adv * 0.5
    return total
