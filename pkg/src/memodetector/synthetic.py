"""
Synthetic meme corpus for desk-scale runs

Every class gets its own solid colour and its own keyword in the meme text,
so both modalities carry the label. Images are small PNGs written next to
the manifest.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .manifest import DatasetManifest, LabelVocab, MemeInstance, assign_splits, write_manifest

logger = logging.getLogger(__name__)

SYNTHETIC_LABELS = ("happiness", "sadness", "anger", "fear", "surprise", "disgust", "love")
SYNTHETIC_KEYWORDS = ("sunny", "rainy", "stormy", "shadowy", "sparkling", "rotten", "warm")
MANIFEST_NAME = "manifest.jsonl"


def synthetic_labels(classes: int) -> tuple:
    if classes <= len(SYNTHETIC_LABELS):
        return SYNTHETIC_LABELS[:classes]
    return tuple(f"class_{i}" for i in range(classes))


def _keyword(label: int) -> str:
    return SYNTHETIC_KEYWORDS[label] if label < len(SYNTHETIC_KEYWORDS) else f"token{label}"


def make_synthetic_dataset(root: Union[str, Path], size: int = 32, classes: int = 4, seed: int = 0,
                           image_size: int = 32, ratio: Sequence[int] = (8, 1, 1),
                           languages: Sequence[str] = ("en",), name: Optional[str] = None) -> Path:
    """Write images plus a split-tagged manifest under root; returns the manifest path

    Labels cycle through the classes, so each class gets size // classes
    memes (the first size % classes classes get one more).
    """
    if classes < 2:
        raise ValueError("a synthetic dataset needs at least 2 classes")
    if size < classes:
        raise ValueError(f"size {size} is smaller than the {classes} classes")
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    colours = [tuple(int(c) for c in rng.integers(0, 256, size=3)) for _ in range(classes)]

    instances = []
    for i in range(size):
        label = i % classes
        meme_id = f"syn_{i:04d}"
        image_ref = f"images/{meme_id}.png"
        Image.new("RGB", (image_size, image_size), colours[label]).save(root / image_ref, format="PNG")
        instances.append(MemeInstance(
            id=meme_id,
            image_ref=image_ref,
            text=f"feeling {_keyword(label)} today",
            label=label,
            split=None,
            language=languages[i % len(languages)] if languages else None,
        ))

    manifest = DatasetManifest(instances, LabelVocab(synthetic_labels(classes)), name or "synthetic", root)
    manifest = assign_splits(manifest, ratio, seed=seed)
    path = write_manifest(manifest, root / MANIFEST_NAME)
    logger.info("Wrote %d synthetic memes in %d classes to %s", size, classes, path)
    return path
