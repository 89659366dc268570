"""
Dataset manifests and batch iteration
-------------------------------------

A manifest is a plain-text file with one sample per line, tab-separated paths relative
to the manifest's directory::

    # comment
    disparity_max=126.0
    images/0000.png<TAB>labels/0000.png<TAB>disparity/0000.png

The disparity column is optional. ``disparity_max`` is the corpus-level normalizer for the
16-bit disparity maps. Entries are kept sorted by their rgb path.

``SegmentationDataset`` loads samples with a thread pool (``workers``) and always delivers
them in the seeded shuffle order, independent of load completion order.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from .. import config
from ..core.tensor import Tensor
from ..errors import DataError
from ..utils.logger import get_logger
from .sample import (Sample, augment_hflip, load_disparity, load_labels, load_rgb, make_ld,
                     validate_sample)

logger = get_logger(__name__)


class ManifestEntry(NamedTuple):
    rgb: Path
    label: Path
    disparity: Optional[Path] = None


class DatasetManifest:
    def __init__(self, root: Path, split: str, entries: Sequence[ManifestEntry],
                 disparity_max: Optional[float] = None) -> None:
        self.root = Path(root)
        self.split = split
        self.entries: List[ManifestEntry] = sorted(entries, key=lambda e: str(e.rgb))
        self.disparity_max = disparity_max

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def has_disparity(self) -> bool:
        return bool(self.entries) and all(e.disparity is not None for e in self.entries)

    def resolve(self, relative: Path) -> Path:
        return self.root / relative

    @classmethod
    def read(cls, path: Path, check_files: bool = True) -> 'DatasetManifest':
        """
        Parse a manifest file.

        Raises:
            DataError: missing manifest, malformed line or a referenced file that does not exist
        """
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        entries: List[ManifestEntry] = []
        disparity_max: Optional[float] = None
        for lineno, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if line.startswith('disparity_max='):
                try:
                    disparity_max = float(line.split('=', 1)[1])
                except ValueError as e:
                    raise DataError(f"{path}:{lineno}: bad disparity_max") from e
                continue
            parts = line.split('\t')
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated paths, got {len(parts)}")
            entries.append(ManifestEntry(Path(parts[0]), Path(parts[1]), Path(parts[2]) if len(parts) == 3 else None))
        manifest = cls(path.parent, path.stem, entries, disparity_max)
        if check_files:
            manifest.check_files()
        logger.info(f"Loaded manifest {path.name}", extra={
            "operation": "load_manifest",
            "split": manifest.split,
            "entries": len(manifest),
            "has_disparity": manifest.has_disparity,
        })
        return manifest

    def check_files(self) -> None:
        for entry in self.entries:
            for rel in entry:
                if rel is not None and not self.resolve(rel).exists():
                    raise DataError(f"manifest {self.split}: missing file {self.resolve(rel)}")
        if any(e.disparity is not None for e in self.entries) and not self.disparity_max:
            raise DataError(f"manifest {self.split}: disparity listed without disparity_max")

    def write(self, path: Path) -> None:
        lines = [f"# {self.split}"]
        if self.disparity_max is not None:
            lines.append(f"disparity_max={self.disparity_max!r}")
        for entry in self.entries:
            cols = [entry.rgb.as_posix(), entry.label.as_posix()]
            if entry.disparity is not None:
                cols.append(entry.disparity.as_posix())
            lines.append('\t'.join(cols))
        Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')

# ----------------------------------------------------------------------------------------------------------


class Batch(NamedTuple):
    rgb: np.ndarray            # N x 3 x H x W
    ld: np.ndarray             # N x 2 x H x W or N x 1 x H x W
    labels: np.ndarray         # N x H x W
    names: List[str]

    def rgb_tensor(self) -> Tensor:
        return Tensor(self.rgb)

    def ld_tensor(self) -> Tensor:
        return Tensor(self.ld)


class SegmentationDataset:
    def __init__(self, manifest: DatasetManifest, height: int, width: int, use_depth: bool = True,
                 coefficients: Sequence[float] = config.LUMINANCE_COEFFICIENTS,
                 workers: int = config.WORKERS) -> None:
        if len(manifest) == 0:
            raise DataError(f"dataset {manifest.split} is empty")
        if use_depth and not manifest.has_disparity:
            raise DataError(f"dataset {manifest.split} has no disparity but use_depth is set")
        self.manifest = manifest
        self.size = (height, width)
        self.use_depth = use_depth
        self.coefficients = tuple(coefficients)
        self.workers = max(1, workers)

    def __len__(self) -> int:
        return len(self.manifest)

    def load_sample(self, index: int) -> Sample:
        """Decode one entry from disk; no state is kept, so workers can call this concurrently."""
        entry = self.manifest.entries[index]
        m = self.manifest
        depth = None
        if entry.disparity is not None and self.use_depth:
            depth = load_disparity(m.resolve(entry.disparity), m.disparity_max, self.size)
        sample = Sample(
            rgb=load_rgb(m.resolve(entry.rgb), self.size),
            labels=load_labels(m.resolve(entry.label), self.size),
            depth=depth,
            coefficients=self.coefficients,
            name=entry.rgb.stem,
        )
        return validate_sample(sample)

    def load_many(self, indices: Sequence[int]) -> List[Sample]:
        if self.workers == 1:
            return [self.load_sample(i) for i in indices]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.load_sample, indices))

    def order(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return rng.permutation(len(self)) if rng is not None else np.arange(len(self))

    def iter_batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                     augment: bool = False) -> Iterator[Batch]:
        """
        Seeded batches; the last batch may be smaller.

        The permutation and every flip decision are drawn from ``rng`` in delivery order.
        """
        order = self.order(rng)
        for start in range(0, len(order), batch_size):
            samples = self.load_many(order[start:start + batch_size].tolist())
            if augment and rng is not None:
                samples = [augment_hflip(s, rng) for s in samples]
            yield collate(samples, self.use_depth)

    def pixel_counts(self, num_classes: int = config.NUM_CLASSES) -> np.ndarray:
        counts = np.zeros(num_classes, dtype=np.int64)
        for sample in self.load_many(list(range(len(self)))):
            valid = sample.labels[sample.labels < num_classes]
            counts += np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]
        return counts


def collate(samples: Sequence[Sample], use_depth: bool) -> Batch:
    return Batch(
        rgb=np.stack([s.rgb for s in samples]),
        ld=np.stack([make_ld(s, use_depth) for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        names=[s.name for s in samples],
    )