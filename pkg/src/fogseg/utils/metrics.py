"""
Segmentation Metrics Module
-------------------------------------------

Streaming confusion-matrix accumulation and the three scene-parsing scores reported for
every evaluation run:

  - global accuracy:        correctly classified pixels / all scored pixels
  - class average accuracy: mean over classes present in the ground truth of diag / rowsum
  - mIoU:                   mean over classes with a non-empty union of diag / union

Pixels labelled with the ignore label (255) are never counted.

Classes:
    ConfusionMatrix: K x K counts (rows = ground truth, columns = prediction); partial
                     matrices built on disjoint shards merge with ``+``.

Usage:
    ```python
    cm = ConfusionMatrix(19)
    for logits, labels in stream:
        cm.update(logits.argmax(axis=1), labels)
    global_acc, class_avg, miou = cm.metrics()
    cm.log_metrics(run_id=run_id)
    ```

The report helpers render the metrics as a plain-text table (one IoU row per class plus
the three aggregates) and as a ``key=value`` sidecar for scripts.
"""

from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .. import config
from ..errors import DataError, ShapeError
from .logger import get_logger

logger = get_logger(__name__)


class ConfusionMatrix:
    """Accumulated ground-truth x prediction counts"""

    def __init__(self, num_classes: int = config.NUM_CLASSES, ignore_label: int = config.IGNORE_LABEL) -> None:
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts: np.ndarray = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, predictions: np.ndarray, labels: np.ndarray) -> 'ConfusionMatrix':
        """
        Add one batch of predictions.

        Raises:
            ShapeError: predictions and labels differ in shape
            DataError: a prediction outside [0, K) or a label outside [0, K) u {ignore}
        """
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ShapeError('confusion_update', 'shape', labels.shape, predictions.shape)
        k = self.num_classes
        valid = labels != self.ignore_label
        pred, gt = predictions[valid].astype(np.int64), labels[valid].astype(np.int64)
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise DataError(f"prediction outside [0, {k})")
        if gt.size and (gt.min() < 0 or gt.max() >= k):
            raise DataError(f"label outside [0, {k}) and not the ignore label")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if not isinstance(other, ConfusionMatrix) or other.num_classes != self.num_classes:
            return NotImplemented
        merged = ConfusionMatrix(self.num_classes, self.ignore_label)
        merged.counts = self.counts + other.counts
        return merged

    # ------------------------------------------------------------------------------------------------------

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the union is empty."""
        diag = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - diag
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)

    def per_class_accuracy(self) -> np.ndarray:
        diag = np.diag(self.counts).astype(np.float64)
        rows = self.counts.sum(axis=1)
        return np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)

    def metrics(self) -> Tuple[float, float, float]:
        """(global accuracy, class average accuracy, mIoU)"""
        if self.total == 0:
            raise DataError("metrics of an empty confusion matrix")
        global_acc = float(np.trace(self.counts) / self.total)
        acc = self.per_class_accuracy()
        iou = self.per_class_iou()
        class_avg = float(np.mean(acc[~np.isnan(acc)]))
        miou = float(np.mean(iou[~np.isnan(iou)]))
        return global_acc, class_avg, miou

    def log_metrics(self, **context) -> None:
        """Log the current aggregates"""
        global_acc, class_avg, miou = self.metrics()
        logger.info("Segmentation Metrics Summary", extra={
            "operation": "evaluate",
            **context,
            "metrics": {
                "pixels": self.total,
                "global_acc": round(global_acc, 5),
                "class_avg": round(class_avg, 5),
                "miou": round(miou, 5),
            }
        })

# ----------------------------------------------------------------------------------------------------------


def metrics(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    return cm.metrics()


def report_table(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(cm.num_classes)]
    global_acc, class_avg, miou = cm.metrics()
    rows = pd.DataFrame({
        'name': names,
        'iou': cm.per_class_iou(),
        'accuracy': cm.per_class_accuracy(),
    })
    aggregates = pd.DataFrame({
        'name': ['global_acc', 'class_avg', 'miou'],
        'iou': [np.nan, np.nan, miou],
        'accuracy': [global_acc, class_avg, np.nan],
    })
    return pd.concat([rows, aggregates], ignore_index=True)


def format_report(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> str:
    """Plain-text table: one row per class, then global_acc, class_avg and miou."""
    table = report_table(cm, class_names)
    return table.to_string(index=False, na_rep='-', float_format=lambda v: f"{v:.5f}") + "\n"


def report_kv(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(cm.num_classes)]
    global_acc, class_avg, miou = cm.metrics()
    values: Dict[str, float] = {'global_acc': global_acc, 'class_avg': class_avg, 'miou': miou}
    for name, iou in zip(names, cm.per_class_iou()):
        values[f'iou.{name}'] = float(iou)
    return values


def format_kv(values: Dict[str, float]) -> str:
    return "".join(f"{key}={value:.6f}\n" for key, value in values.items())
