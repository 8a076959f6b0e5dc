# wmcloak/core/synthetic.py
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from wmcloak.core.imagedata import Image, default_watermark_text, write_image
from wmcloak.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

OCTAVES = (4, 8, 16, 32)


def natural_like_image(size: Tuple[int, int], rng: np.random.Generator) -> Image:
    """Sum of upsampled noise octaves with a 1/f-like amplitude falloff"""
    height, width = size
    canvas = np.zeros((height, width, 3), dtype=np.float64)
    for octave in OCTAVES:
        coarse = rng.standard_normal((max(2, height * octave // 64), max(2, width * octave // 64), 3))
        canvas += cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC) / octave
    # mix channels so colours are correlated, as in photographs
    mixing = 0.6 * np.eye(3) + 0.4 * rng.random((3, 3))
    canvas = canvas @ mixing.T
    lo, hi = canvas.min(), canvas.max()
    pixels = (canvas - lo) / (hi - lo) if hi > lo else np.full_like(canvas, 0.5)
    return Image(pixels=np.clip(pixels, 0.0, 1.0))


def natural_like_images(n: int, size: Tuple[int, int] = (64, 64), seed: int = 0) -> List[Image]:
    """n smooth, textured RGB images in [0,1]; deterministic in seed"""
    rng = np.random.default_rng(seed)
    return [natural_like_image(tuple(size), rng) for _ in range(n)]


def write_toy_dataset(root: Union[str, Path], classes: Sequence[str], per_class: int,
                      size: Tuple[int, int] = (64, 64), seed: int = 0,
                      mapping: Optional[Dict[str, str]] = None) -> Path:
    """root/<class>/<nnn>.png plus root/mapping.json; returns the mapping path"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mapping = dict(mapping or {c: default_watermark_text(c) for c in classes})
    for class_name in classes:
        images = natural_like_images(per_class, size, derive_seed(seed, f"dataset/{class_name}"))
        for i, img in enumerate(images):
            write_image(img, root / class_name / f"{i:03d}.png")
    mapping_path = root / "mapping.json"
    with open(mapping_path, 'w') as file:
        json.dump(mapping, file, indent=4)
    logger.info(f"Wrote toy dataset with {len(classes)} classes × {per_class} images to {root}")
    return mapping_path
