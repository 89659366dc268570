"""
Synthetic haze corpus
---------------------

Procedural street-like scenes for desk-scale runs: a sky band over a road band, then
coloured rectangles and discs drawn in class colours with known label maps and a
synthetic disparity map (nearer = larger disparity). Each scene also gets a hazed copy

    hazy = (1 - alpha) * clean + alpha * 0.7,   alpha ~ U[0.3, 0.7] per image

sharing labels and depth. Everything is drawn from one seeded generator, so a seed fully
determines the corpus (and the PNG bytes written by ``write_corpus``).
"""

from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from ..errors import DataError
from ..utils.logger import get_logger
from .labels import palette
from .manifest import DatasetManifest, ManifestEntry
from .sample import Sample, decode_disparity, save_disparity, save_labels, save_rgb

logger = get_logger(__name__)

HAZE_GRAY = 0.7
SKY, ROAD = 10, 0
OBJECT_CLASSES = (1, 2, 5, 8, 11, 13, 18)  # sidewalk, building, pole, vegetation, person, car, bicycle


class FogCorpus(NamedTuple):
    clean: List[Sample]
    hazy: List[Sample]
    alphas: np.ndarray
    disparity_raw: List[np.ndarray]
    disparity_max: float


def haze(rgb: np.ndarray, alpha: float) -> np.ndarray:
    return ((1.0 - alpha) * rgb + alpha * HAZE_GRAY).astype(np.float32)


def _scene(rng: np.random.Generator, h: int, w: int, colours: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = np.full((h, w), ROAD, dtype=np.uint8)
    horizon = int(rng.integers(h // 4, h // 2))
    labels[:horizon] = SKY
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    # disparity grows towards the bottom of the image
    disparity = np.where(rows < horizon, 1.0, 4.0 + 60.0 * (rows - horizon) / max(h - horizon, 1)) * np.ones((1, w))

    for _ in range(int(rng.integers(3, 7))):
        cls = int(rng.choice(OBJECT_CLASSES))
        near = float(rng.uniform(10.0, 100.0))
        if rng.random() < 0.5:
            y0, x0 = int(rng.integers(0, h - 4)), int(rng.integers(0, w - 4))
            y1, x1 = min(h, y0 + int(rng.integers(4, h // 2 + 4))), min(w, x0 + int(rng.integers(4, w // 3 + 4)))
            mask = np.zeros((h, w), dtype=bool)
            mask[y0:y1, x0:x1] = True
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(3.0, max(h, w) / 5.0)
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        labels[mask] = cls
        disparity[mask] = near

    rgb = colours[labels].transpose(2, 0, 1).astype(np.float64) / 255.0
    rgb = np.clip(rgb + rng.normal(0.0, 0.02, size=rgb.shape), 0.0, 1.0)
    raw = np.rint(disparity * 256.0 + 1.0).astype(np.uint16)
    return rgb.astype(np.float32), labels, raw


def synth_fog_corpus(n: int, size: Tuple[int, int] = (64, 128), seed: int = 0,
                     alpha_range: Tuple[float, float] = (0.3, 0.7)) -> FogCorpus:
    """
    Generate ``n`` paired clean/hazy scenes of ``size`` = (H, W).

    Raises:
        DataError: ``n < 1`` or a size that is not a positive multiple of 8
    """
    h, w = size
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise DataError(f"corpus image size must be a positive multiple of 8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    colours = palette()

    scenes = [_scene(rng, h, w, colours) for _ in range(n)]
    alphas = rng.uniform(alpha_range[0], alpha_range[1], size=n)
    raws = [raw for _, _, raw in scenes]
    disparity_max = float(max(((raw.astype(np.float64).max() - 1.0) / 256.0) for raw in raws))

    clean, hazy = [], []
    for i, ((rgb, labels, raw), alpha) in enumerate(zip(scenes, alphas)):
        depth = decode_disparity(raw, disparity_max)
        name = f"{i:04d}"
        clean.append(Sample(rgb=rgb, labels=labels, depth=depth, name=name))
        hazy.append(Sample(rgb=haze(rgb, float(alpha)), labels=labels, depth=depth, name=name))

    logger.info("Synthesized haze corpus", extra={
        "operation": "synth_data",
        "samples": n,
        "size": [h, w],
        "seed": seed,
        "disparity_max": disparity_max,
    })
    return FogCorpus(clean, hazy, alphas, raws, disparity_max)


def write_corpus(corpus: FogCorpus, out_dir: Path, val_fraction: float = 0.25) -> Dict[str, Path]:
    """
    Write PNGs plus ``{clean,hazy}_{train,val}.txt`` manifests under ``out_dir``.

    The last ``val_fraction`` of the scenes (at least one when there are two or more)
    forms the validation split.
    """
    out_dir = Path(out_dir)
    for sub in ('clean', 'hazy', 'labels', 'disparity'):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    n = len(corpus.clean)
    n_val = min(n - 1, max(1, int(round(n * val_fraction)))) if n > 1 else 0
    splits = {'train': range(0, n - n_val), 'val': range(n - n_val, n)}

    for clean, hazy, raw in zip(corpus.clean, corpus.hazy, corpus.disparity_raw):
        save_rgb(out_dir / 'clean' / f"{clean.name}.png", clean.rgb)
        save_rgb(out_dir / 'hazy' / f"{hazy.name}.png", hazy.rgb)
        save_labels(out_dir / 'labels' / f"{clean.name}.png", clean.labels)
        save_disparity(out_dir / 'disparity' / f"{clean.name}.png", raw)

    paths: Dict[str, Path] = {}
    for domain in ('clean', 'hazy'):
        for split, indices in splits.items():
            entries = [
                ManifestEntry(Path(domain) / f"{corpus.clean[i].name}.png",
                              Path('labels') / f"{corpus.clean[i].name}.png",
                              Path('disparity') / f"{corpus.clean[i].name}.png")
                for i in indices
            ]
            key = f"{domain}_{split}"
            manifest = DatasetManifest(out_dir, key, entries, corpus.disparity_max)
            manifest.write(out_dir / f"{key}.txt")
            paths[key] = out_dir / f"{key}.txt"

    logger.info(f"Wrote corpus to {out_dir}", extra={
        "operation": "synth_data",
        "samples": n,
        "val_samples": n_val,
        "manifests": sorted(paths),
    })
    return paths
