"""
Cityscapes label table
----------------------

The raw-id -> train-id mapping, class names and colours ship as ``cityscapes_labels.csv``
next to this module and are read with pandas once per process.
"""

from functools import lru_cache
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from .. import config

LABELS_CSV = Path(__file__).with_name('cityscapes_labels.csv')


@lru_cache(maxsize=1)
def label_table() -> pd.DataFrame:
    return pd.read_csv(LABELS_CSV)


def _train_rows() -> pd.DataFrame:
    table = label_table()
    return table[table['train_id'] != config.IGNORE_LABEL].sort_values('train_id')


def class_names() -> List[str]:
    """The 19 evaluated class names in train-id order."""
    return _train_rows()['name'].tolist()


def palette() -> np.ndarray:
    """19 x 3 uint8 colours indexed by train id."""
    return _train_rows()[['red', 'green', 'blue']].to_numpy(dtype=np.uint8)


def raw_to_train_ids(raw: np.ndarray) -> np.ndarray:
    """Convert raw Cityscapes ids to train ids; unknown ids become the ignore label."""
    table = label_table()
    lut = np.full(256, config.IGNORE_LABEL, dtype=np.uint8)
    lut[table['id'].to_numpy()] = table['train_id'].to_numpy()
    return lut[np.asarray(raw, dtype=np.uint8)]


def colorize(labels: np.ndarray) -> np.ndarray:
    """H x W train ids -> H x W x 3 uint8 image; ignored pixels are black."""
    colours = np.zeros((256, 3), dtype=np.uint8)
    colours[:len(palette())] = palette()
    return colours[np.asarray(labels, dtype=np.uint8)]
