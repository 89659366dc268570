"""
Samples and per-sample transforms
---------------------------------

A ``Sample`` holds one scene as numpy arrays in channel-first layout:

    rgb:    3 x H x W float32 in [0, 1]
    depth:  1 x H x W float32 in [0, 1] (normalized disparity) or None
    labels: H x W uint8 train ids in [0, 19) or 255

Luminance is never stored; it is recomputed from ``rgb`` with the configured coefficients
(0.299, 0.587, 0.144 by default, exactly as published, so white maps to 1.03).

PNG reading and writing go through Pillow; images are resized bilinearly and label maps
with nearest-neighbour sampling.
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .. import config
from ..core import functional as F
from ..core.tensor import Tensor
from ..errors import DataError, ShapeError
from .labels import colorize, raw_to_train_ids


def luminance(rgb: np.ndarray, coefficients: Sequence[float] = config.LUMINANCE_COEFFICIENTS) -> np.ndarray:
    """Weighted channel sum, 3 x H x W -> 1 x H x W, no clamping."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError('luminance', 'channels', 3, rgb.shape)
    r, g, b = coefficients
    return (r * rgb[0] + g * rgb[1] + b * rgb[2])[None].astype(np.float32)


def luminance_tensor(rgb: Tensor, coefficients: Sequence[float] = config.LUMINANCE_COEFFICIENTS) -> Tensor:
    """Differentiable batch luminance (N x 3 x H x W -> N x 1 x H x W) as a fixed 1x1 conv."""
    weight = Tensor(np.asarray(coefficients, dtype=rgb.dtype).reshape(1, 3, 1, 1))
    return F.conv2d(rgb, weight)


class Sample:
    def __init__(self, rgb: np.ndarray, labels: np.ndarray, depth: Optional[np.ndarray] = None,
                 coefficients: Sequence[float] = config.LUMINANCE_COEFFICIENTS, name: str = '') -> None:
        self.rgb = np.asarray(rgb, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.depth = None if depth is None else np.asarray(depth, dtype=np.float32)
        self.coefficients = tuple(coefficients)
        self.name = name

    @property
    def luminance(self) -> np.ndarray:
        return luminance(self.rgb, self.coefficients)

    @property
    def size(self) -> Tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    def __repr__(self) -> str:
        return f"Sample(name={self.name!r}, size={self.size}, depth={self.depth is not None})"


def validate_sample(sample: Sample, num_classes: int = config.NUM_CLASSES,
                    ignore_label: int = config.IGNORE_LABEL) -> Sample:
    """
    Check the Sample invariants.

    Raises:
        DataError: ranges violated
        ShapeError: spatial dims disagree
    """
    if sample.rgb.ndim != 3 or sample.rgb.shape[0] != 3:
        raise ShapeError('validate_sample', 'rgb channels', 3, sample.rgb.shape)
    h, w = sample.size
    if sample.labels.shape != (h, w):
        raise ShapeError('validate_sample', 'labels shape', (h, w), sample.labels.shape)
    if sample.depth is not None and sample.depth.shape != (1, h, w):
        raise ShapeError('validate_sample', 'depth shape', (1, h, w), sample.depth.shape)
    if sample.rgb.min() < 0 or sample.rgb.max() > 1:
        raise DataError(f"{sample.name}: rgb outside [0, 1]")
    if sample.depth is not None and (sample.depth.min() < 0 or sample.depth.max() > 1):
        raise DataError(f"{sample.name}: depth outside [0, 1]")
    labels = sample.labels
    if np.any((labels >= num_classes) & (labels != ignore_label)):
        raise DataError(f"{sample.name}: labels outside [0, {num_classes}) u {{{ignore_label}}}")
    return sample

# ----------------------------------------------------------------------------------------------------------


def encode_labels(raw: np.ndarray, num_classes: int = config.NUM_CLASSES,
                  ignore_label: int = config.IGNORE_LABEL) -> np.ndarray:
    """Train ids 0..K-1 pass through, everything else becomes the ignore label."""
    raw = np.asarray(raw)
    return np.where(raw < num_classes, raw, ignore_label).astype(np.uint8)


def decode_disparity(raw: np.ndarray, disparity_max: float) -> np.ndarray:
    """
    16-bit Cityscapes disparity -> 1 x H x W in [0, 1].

    d = (p - 1) / 256 for p > 0 and 0 for invalid pixels, then divided by the corpus maximum.
    """
    raw = np.asarray(raw)
    if raw.dtype != np.uint16:
        raise DataError(f"disparity must be 16-bit, got {raw.dtype}")
    if raw.ndim != 2:
        raise ShapeError('decode_disparity', 'rank', 2, raw.ndim)
    if disparity_max <= 0:
        raise DataError(f"disparity_max must be positive, got {disparity_max}")
    p = raw.astype(np.float64)
    d = np.where(p > 0, (p - 1.0) / 256.0, 0.0)
    return np.clip(d / disparity_max, 0.0, 1.0)[None].astype(np.float32)


def make_ld(sample: Sample, use_depth: bool) -> np.ndarray:
    """[luminance, depth] (2 x H x W) or luminance alone (1 x H x W)."""
    if not use_depth:
        return sample.luminance
    if sample.depth is None:
        raise DataError(f"{sample.name}: depth requested but the sample has none")
    return np.concatenate([sample.luminance, sample.depth], axis=0)


def augment_hflip(sample: Sample, rng: np.random.Generator) -> Sample:
    """Flip every modality along width with probability 0.5."""
    if rng.random() >= 0.5:
        return sample
    return hflip(sample)


def hflip(sample: Sample) -> Sample:
    return Sample(
        rgb=sample.rgb[:, :, ::-1].copy(),
        labels=sample.labels[:, ::-1].copy(),
        depth=None if sample.depth is None else sample.depth[:, :, ::-1].copy(),
        coefficients=sample.coefficients,
        name=sample.name,
    )

# ----------------------------------------------------------------------------------------------------------
# PNG I/O


def _resize(image: Image.Image, size: Optional[Tuple[int, int]], resample) -> Image.Image:
    if size is None or image.size == (size[1], size[0]):
        return image
    return image.resize((size[1], size[0]), resample=resample)


def load_rgb(path: Path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """8-bit RGB PNG -> 3 x H x W float32 in [0, 1]; ``size`` is (H, W)."""
    with Image.open(path) as image:
        image = _resize(image.convert('RGB'), size, Image.Resampling.BILINEAR)
        return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_labels(path: Path, size: Optional[Tuple[int, int]] = None, raw_ids: bool = False) -> np.ndarray:
    """8-bit label PNG -> H x W uint8 train ids (raw Cityscapes ids converted when ``raw_ids``)."""
    with Image.open(path) as image:
        if image.mode != 'L':
            raise DataError(f"{path}: label images must be 8-bit single channel, got mode {image.mode}")
        values = np.asarray(_resize(image, size, Image.Resampling.NEAREST), dtype=np.uint8)
    return raw_to_train_ids(values) if raw_ids else encode_labels(values)


def read_disparity_png(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        values = np.asarray(image)
    if values.ndim != 2 or values.dtype not in (np.uint16, np.int32) or values.max(initial=0) > 65535:
        raise DataError(f"{path}: disparity must be a 16-bit single-channel PNG")
    return values.astype(np.uint16)


def load_disparity(path: Path, disparity_max: float, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    depth = decode_disparity(read_disparity_png(path), disparity_max)[0]
    if size is not None and depth.shape != tuple(size):
        resized = Image.fromarray(depth.astype(np.float32)).resize((size[1], size[0]), resample=Image.Resampling.BILINEAR)
        depth = np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)
    return depth[None]


def save_rgb(path: Path, rgb: np.ndarray) -> None:
    values = np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(values).save(path)


def save_labels(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def save_disparity(path: Path, raw: np.ndarray) -> None:
    Image.fromarray(np.asarray(raw, dtype=np.uint16)).save(path)


def save_prediction(path: Path, labels: np.ndarray) -> None:
    """Palette-coloured PNG of an H x W train-id map."""
    Image.fromarray(colorize(labels)).save(path)
